"""End-to-end run: ingest, folds, seed ensembles, scoring, analyses, reports.

A run directory is self-contained: ``config.ini`` (snapshot), the report
files and ``manifest.json`` listing every output with its SHA-256.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import os
import platform
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, DataError, FormMeaningError, NumericError
from .estimators import (
    PmiRecord,
    TokenPmiRecord,
    estimate_entropy,
    mutual_information,
    score_heldout,
    score_tokens,
    uncertainty_coefficient,
    write_records,
)
from .hyperopt import run_search
from .lexicon import (
    MACROAREAS,
    FilterPolicy,
    Lexicon,
    filter_lexicon,
    load_alphabet,
    make_folds,
    parse_wordlists,
    reassign_families_to_macroareas,
)
from .models import ModelConfig, train_seed_ensemble
from .rng import make_rng
from .stats import (
    AnalysisReport,
    benjamini_hochberg,
    concept_token_analysis,
    per_concept_analysis,
    per_language_analysis,
    sign_flip_test,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
STRONG, WEAK = 0.01, 0.1


@dataclass
class RunConfig:
    input: Path
    alphabet: Path
    run_dir: Path
    fold_scheme: str = "macroarea"
    fold_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    seeds: int = 25
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    drop_loans: bool = True
    exclude_flags: frozenset[str] = frozenset({"pidgin_creole", "constructed"})
    hyperopt_budget: int = 0
    seeds_per_config: int = 25
    n_permutations: int = 100_000
    q: float = 0.01
    q_language: float = 0.01
    min_joint: int = 1000
    concept_analysis: bool = True
    language_analysis: bool = True
    pair_analysis: bool = True

    def __post_init__(self):
        if self.fold_scheme not in ("macroarea", "family"):
            raise ConfigError(f"fold scheme must be macroarea or family, got {self.fold_scheme!r}")
        if self.seeds < 1 or self.n_permutations < 1 or self.workers < 1:
            raise ConfigError("seeds, n_permutations and workers must be >= 1")
        for name in ("q", "q_language"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in (0, 1)")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["data"] = {
            "input": str(self.input),
            "alphabet": str(self.alphabet),
            "drop_loans": str(self.drop_loans).lower(),
            "exclude_flags": ",".join(sorted(self.exclude_flags)),
        }
        cp["folds"] = {"scheme": self.fold_scheme, "seed": str(self.fold_seed)}
        cp["model"] = {k: str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
                       for k, v in self.model.to_dict().items() if k != "conditional"}
        # workers is left out: outputs must not depend on it
        cp["training"] = {"seeds": str(self.seeds)}
        cp["hyperopt"] = {"budget": str(self.hyperopt_budget), "seeds_per_config": str(self.seeds_per_config)}
        cp["analysis"] = {
            "n_permutations": str(self.n_permutations),
            "q": repr(self.q),
            "q_language": repr(self.q_language),
            "min_joint": str(self.min_joint),
            "concept": str(self.concept_analysis).lower(),
            "language": str(self.language_analysis).lower(),
            "pair": str(self.pair_analysis).lower(),
        }
        buf = []
        for section in cp.sections():
            buf.append(f"[{section}]")
            buf.extend(f"{k} = {v}" for k, v in cp[section].items())
            buf.append("")
        return "\n".join(buf)


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Read an INI run config; relative paths resolve against the file's directory."""
    path = Path(path)
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path, encoding="utf-8"):
            raise ConfigError(f"cannot read config file {path}")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent
    o = dict(overrides or {})

    def get(section, key, conv=str, default=None):
        if key in o and o[key] is not None:
            return o[key]
        if cp.has_option(section, key):
            raw = cp.get(section, key)
            try:
                if conv is bool:
                    return cp.getboolean(section, key)
                return conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
        return default

    try:
        model_kwargs = {}
        for f in fields(ModelConfig):
            if f.name == "conditional":
                continue
            conv = {"int": int, "float": float, "bool": bool}[f.type]
            value = get("model", f.name, conv)
            if value is not None:
                model_kwargs[f.name] = value
        model = ModelConfig(**model_kwargs)
        input_path = get("data", "input")
        alphabet_path = get("data", "alphabet")
        run_dir = o.get("run_dir") or get("run", "run_dir", default="run")
        if not input_path or not alphabet_path:
            raise ConfigError("config needs [data] input and [data] alphabet")
        flags = get("data", "exclude_flags", default="pidgin_creole,constructed")
        return RunConfig(
            input=(base / input_path) if not Path(input_path).is_absolute() else Path(input_path),
            alphabet=(base / alphabet_path) if not Path(alphabet_path).is_absolute() else Path(alphabet_path),
            run_dir=Path(run_dir),
            fold_scheme=get("folds", "scheme", default="macroarea"),
            fold_seed=get("folds", "seed", int, 0),
            model=model,
            seeds=get("training", "seeds", int, 25),
            workers=get("training", "workers", int, os.cpu_count() or 1),
            drop_loans=get("data", "drop_loans", bool, True),
            exclude_flags=frozenset(f for f in str(flags).split(",") if f),
            hyperopt_budget=get("hyperopt", "budget", int, 0),
            seeds_per_config=get("hyperopt", "seeds_per_config", int, 25),
            n_permutations=get("analysis", "n_permutations", int, 100_000),
            q=get("analysis", "q", float, 0.01),
            q_language=get("analysis", "q_language", float, 0.01),
            min_joint=get("analysis", "min_joint", int, 1000),
            concept_analysis=get("analysis", "concept", bool, True),
            language_analysis=get("analysis", "language", bool, True),
            pair_analysis=get("analysis", "pair", bool, True),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_lexicon(input_path, alphabet_path, policy: FilterPolicy) -> Lexicon:
    try:
        alphabet = load_alphabet(Path(alphabet_path).read_text(encoding="utf-8"))
        raw = Path(input_path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read input: {exc}") from exc
    lex = parse_wordlists(raw, alphabet)
    return reassign_families_to_macroareas(filter_lexicon(lex, policy))


def _average_records(per_seed: Sequence[Sequence[PmiRecord]]) -> list[PmiRecord]:
    """Average each held-out word's cross-entropies over seeds."""
    base = per_seed[0]
    xu = np.mean([[r.word_xent_uncond for r in recs] for recs in per_seed], axis=0)
    xc = np.mean([[r.word_xent_cond for r in recs] for recs in per_seed], axis=0)
    return [
        replace(r, word_xent_uncond=float(u), word_xent_cond=float(c), pmi=float(u) - float(c))
        for r, u, c in zip(base, xu, xc)
    ]


def _average_tokens(per_seed: Sequence[Sequence[TokenPmiRecord]]) -> list[TokenPmiRecord]:
    base = per_seed[0]
    vals = np.mean([[r.pmi_token for r in recs] for recs in per_seed], axis=0)
    return [replace(r, pmi_token=float(v)) for r, v in zip(base, vals)]


def marker(p: float | None) -> str:
    if p is None:
        return ""
    return "‡" if p < STRONG else "*" if p < WEAK else ""


@dataclass
class FoldResult:
    label: tuple[str, str, str]
    seeds: list[int]
    seed_h: list[float]
    seed_mi: list[float]
    records: list[PmiRecord]
    tokens: list[TokenPmiRecord]
    failures: list[tuple[int, str]]
    config: ModelConfig


def run_fold(lex: Lexicon, fold, fold_id: int, cfg: RunConfig, want_tokens: bool) -> FoldResult:
    train_lex = lex.subset(fold.train)
    val_lex = lex.subset(fold.validation)
    test_lex = lex.subset(fold.test)
    model_cfg = cfg.model
    if cfg.hyperopt_budget > 0:
        model_cfg, _ = run_search(
            train_lex, val_lex, cfg.hyperopt_budget, cfg.seeds_per_config,
            fold_id=fold_id, seed=cfg.fold_seed, base=cfg.model,
        )
    pairs, failures = train_seed_ensemble(train_lex, val_lex, model_cfg, fold_id, cfg.seeds, cfg.workers)
    if not pairs:
        raise NumericError(f"fold {fold_id}: every seed failed: {failures[0][1]}")
    seed_records, seed_tokens, seed_h, seed_mi = [], [], [], []
    for pair in pairs:
        recs = score_heldout(pair.unconditional, pair.conditional, test_lex)
        h_w, h_wv = estimate_entropy(recs), estimate_entropy(recs, conditional=True)
        seed_h.append(h_w.value)
        seed_mi.append(mutual_information(h_w, h_wv))
        seed_records.append(recs)
        if want_tokens:
            seed_tokens.append(score_tokens(pair.unconditional, pair.conditional, test_lex))
    return FoldResult(
        fold.label,
        [p.seed for p in pairs],
        seed_h,
        seed_mi,
        _average_records(seed_records),
        _average_tokens(seed_tokens) if want_tokens else [],
        failures,
        model_cfg,
    )


def table1(results: Sequence[FoldResult], n_perm: int, q: float) -> dict:
    """Fold rows and their average, with sign-flip p-values over seeds."""
    rows = []
    pvals = []
    for i, r in enumerate(results):
        h = float(np.mean(r.seed_h))
        mi = float(np.mean(r.seed_mi))
        test = sign_flip_test(r.seed_mi, n_perm, make_rng("overall", i))
        pvals.append(test.p_value)
        rows.append(
            {
                "train": r.label[0],
                "validation": r.label[1],
                "test": r.label[2],
                "H_W": h,
                "MI": mi,
                "U": uncertainty_coefficient(mi, h),
                "p_value": test.p_value,
                "seeds": r.seeds,
                "seed_H_W": r.seed_h,
                "seed_MI": r.seed_mi,
            }
        )
    common = sorted(set.intersection(*(set(r.seeds) for r in results)))
    seed_avg = [
        float(np.mean([r.seed_mi[r.seeds.index(s)] for r in results])) for s in common
    ]
    avg_test = sign_flip_test(seed_avg, n_perm, make_rng("overall", "average"))
    pvals.append(avg_test.p_value)
    _, adjusted = benjamini_hochberg(pvals, q)
    for row, adj in zip(rows, adjusted):
        row["adjusted_p"] = adj
        row["marker"] = marker(adj)
    average = {
        "H_W": float(np.mean([r["H_W"] for r in rows])),
        "MI": float(np.mean([r["MI"] for r in rows])),
        "U": float(np.mean([r["U"] for r in rows])),
        "p_value": avg_test.p_value,
        "adjusted_p": adjusted[-1],
        "marker": marker(adjusted[-1]),
        "seeds": common,
        "seed_MI": seed_avg,
    }
    return {"folds": rows, "average": average, "n_permutations": n_perm}


def _fmt(x) -> str:
    if isinstance(x, np.generic):
        x = x.item()
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    if isinstance(x, bool):
        return "1" if x else "0"
    return str(x)


def _write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """Write an RFC-4180 CSV to a path or an open text stream."""
    if hasattr(path, "write"):
        _write_rows(path, header, rows)
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_rows(fh, header, rows)


def _write_rows(fh, header, rows) -> None:
    writer = csv.writer(fh, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])


def write_concept_report(path, report: AnalysisReport) -> None:
    _write_csv(
        path,
        ("concept", "MI", "U", "mean_len", "n_words", "p", "adj_p", "significant"),
        [
            (r.key[0], r.statistic, r.uncertainty, r.extra.get("mean_len"), r.extra.get("n_words"),
             r.p_value, r.adjusted_p, r.significant)
            for r in report.rows
        ],
    )


def write_language_report(path, report: AnalysisReport) -> None:
    _write_csv(
        path,
        ("language", "family", "macroarea", "mean_pmi", "U", "n_words", "p", "adj_p", "significant",
         "latitude", "longitude"),
        [
            (r.key[0], r.extra.get("family"), r.extra.get("macroarea"), r.statistic, r.uncertainty,
             r.extra.get("n_words"), r.p_value, r.adjusted_p, r.significant,
             r.extra.get("latitude"), r.extra.get("longitude"))
            for r in report.rows
        ],
    )


def write_pair_report(path, report: AnalysisReport, concepts: Sequence[str], symbol_name, areas=MACROAREAS) -> None:
    header = ["concept", "symbol", "n_joint"]
    header += [f"p_{a}" for a in areas] + [f"adj_p_{a}" for a in areas] + ["all_significant"]
    rows = []
    for r in report.rows:
        cid, sym = r.key
        per = r.extra["areas"]
        rows.append(
            [concepts[cid], symbol_name(sym), r.extra["n_joint"]]
            + [per.get(a, {}).get("p") for a in areas]
            + [per.get(a, {}).get("adjusted_p") for a in areas]
            + [r.significant]
        )
    _write_csv(path, header, rows)


def _language_coordinates(lex: Lexicon) -> dict[str, tuple[float, float]]:
    acc: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for d in lex.doculects:
        acc[d.language].append((d.latitude, d.longitude))
    return {k: (float(np.mean([a for a, _ in v])), float(np.mean([b for _, b in v]))) for k, v in acc.items()}


def run_pipeline(cfg: RunConfig) -> dict:
    """Execute every stage and write the run directory. Returns the manifest."""
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    manifest = {
        "status": "incomplete",
        "stage": "ingest",
        "package_version": __version__,
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
        "fold_scheme": cfg.fold_scheme,
        "seeds": list(range(cfg.seeds)),
        "fold_seed": cfg.fold_seed,
        "n_permutations": cfg.n_permutations,
        "outputs": {},
        "failures": [],
    }

    def record_output(name):
        manifest["outputs"][name] = sha256_file(run_dir / name)

    record_output("config.ini")
    try:
        policy = FilterPolicy(cfg.exclude_flags, cfg.drop_loans)
        lex = load_lexicon(cfg.input, cfg.alphabet, policy)
        manifest["data_hash"] = {"input": sha256_file(cfg.input), "alphabet": sha256_file(cfg.alphabet)}
        manifest["n_doculects"] = len(lex.doculects)
        manifest["n_concepts"] = lex.n_concepts
        manifest["concepts"] = list(lex.concepts)
        manifest["symbols"] = list(lex.alphabet.symbols)

        manifest["stage"] = "folds"
        folds = make_folds(lex, cfg.fold_scheme, cfg.fold_seed)

        manifest["stage"] = "train"
        results = []
        for i, fold in enumerate(folds.folds):
            res = run_fold(lex, fold, i, cfg, want_tokens=cfg.pair_analysis)
            manifest["failures"] += [{"fold": i, "seed": s, "error": e} for s, e in res.failures]
            results.append(res)

        manifest["stage"] = "score"
        records = [r for res in results for r in res.records]
        tokens = [t for res in results for t in res.tokens]
        write_records(run_dir / "pmi_records.csv", records, PmiRecord)
        record_output("pmi_records.csv")
        if cfg.pair_analysis:
            write_records(run_dir / "token_pmi_records.csv", tokens, TokenPmiRecord)
            record_output("token_pmi_records.csv")
        t1 = table1(results, cfg.n_permutations, cfg.q)
        t1["scheme"] = cfg.fold_scheme
        _dump_json(run_dir / "table1.json", t1)
        record_output("table1.json")

        manifest["stage"] = "analyses"
        if cfg.concept_analysis:
            rep = per_concept_analysis(records, cfg.n_permutations, cfg.q, lex.concepts, cfg.fold_seed)
            write_concept_report(run_dir / "concept_report.csv", rep)
            record_output("concept_report.csv")
        if cfg.language_analysis:
            rep = per_language_analysis(
                records, cfg.n_permutations, cfg.q_language, cfg.fold_seed, _language_coordinates(lex)
            )
            write_language_report(run_dir / "language_report.csv", rep)
            record_output("language_report.csv")
        if cfg.pair_analysis:
            rep = concept_token_analysis(tokens, cfg.min_joint, cfg.n_permutations, cfg.q, MACROAREAS, cfg.fold_seed)
            write_pair_report(run_dir / "pair_report.csv", rep, lex.concepts, lex.alphabet.symbol)
            record_output("pair_report.csv")
        manifest["status"] = "complete"
        manifest["stage"] = "done"
    finally:
        _dump_json(run_dir / MANIFEST, manifest)
    return manifest


def load_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise DataError(f"{run_dir}: no {MANIFEST}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def verify_outputs(run_dir, manifest: dict) -> None:
    for name, digest in manifest.get("outputs", {}).items():
        path = Path(run_dir) / name
        if not path.exists():
            raise DataError(f"{name} is listed in the manifest but missing")
        if sha256_file(path) != digest:
            raise DataError(f"{name} does not match its manifest hash")


def _pct(x: float) -> str:
    return f"{100 * x:.3f}%"


def format_report(run_dir) -> str:
    """Per-fold text summary of a completed run, with analysis hit counts."""
    manifest = load_manifest(run_dir)
    verify_outputs(run_dir, manifest)
    run_dir = Path(run_dir)
    lines = [f"run: {run_dir}  status: {manifest.get('status')}  scheme: {manifest.get('fold_scheme')}", ""]
    header = f"{'Train':<22} {'Validation':<12} {'Test':<12} {'H(W)':>7} {'MI(W;V)':>9} {'U(W|V)':>9}"
    lines += [header, "-" * len(header)]
    t1_path = run_dir / "table1.json"
    if t1_path.exists():
        t1 = json.loads(t1_path.read_text(encoding="utf-8"))
        for row in t1["folds"]:
            mi = f"{row['MI']:.3f}{row['marker']}"
            lines.append(
                f"{row['train']:<22} {row['validation']:<12} {row['test']:<12} "
                f"{row['H_W']:>7.3f} {mi:>9} {_pct(row['U']):>9}"
            )
        avg = t1["average"]
        lines.append("-" * len(header))
        mi = f"{avg['MI']:.3f}{avg['marker']}"
        lines.append(f"{'Average':<48} {avg['H_W']:>7.3f} {mi:>9} {_pct(avg['U']):>9}")
    lines.append("‡ p<0.01  * p<0.1")
    for name, label in (
        ("concept_report.csv", "concepts"),
        ("language_report.csv", "languages"),
        ("pair_report.csv", "concept-token pairs"),
    ):
        path = run_dir / name
        if not path.exists():
            continue
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        flag = "all_significant" if name == "pair_report.csv" else "significant"
        hits = [r for r in rows if r[flag] == "1"]
        lines.append("")
        lines.append(f"{label}: {len(hits)} of {len(rows)} significant")
        for r in hits[:20]:
            lines.append("  " + (f"{r['concept']} {r['symbol']}" if name == "pair_report.csv" else next(iter(r.values()))))
    return "\n".join(lines)


def compare_runs(run_a, run_b):
    """Welch's t-test of per-seed average MI: is run A's MI larger than run B's?"""
    from .stats import welch_t_test

    samples = []
    for run in (run_a, run_b):
        manifest = load_manifest(run)
        verify_outputs(run, manifest)
        t1 = json.loads((Path(run) / "table1.json").read_text(encoding="utf-8"))
        samples.append(t1["average"]["seed_MI"])
    return welch_t_test(*samples)


def run_stage_error(exc: Exception) -> int:
    return exc.exit_code if isinstance(exc, FormMeaningError) else 1
