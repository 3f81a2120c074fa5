"""Command-line entry point: ``formmeaning <subcommand> ...``.

Exit codes: 0 success, 1 unexpected failure, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .errors import ConfigError, DataError, FormMeaningError
from .estimators import PmiRecord, TokenPmiRecord, estimate_entropy, mutual_information, read_records
from .hyperopt import TrialHistory, run_search
from .lexicon import FilterPolicy, Lexicon, make_folds, serialize
from .models import train
from .pipeline import (
    RunConfig,
    compare_runs,
    format_report,
    load_lexicon,
    load_run_config,
    run_pipeline,
    write_concept_report,
    write_language_report,
    write_pair_report,
)
from .rng import make_rng
from .stats import (
    concept_token_analysis,
    hierarchical_sign_flip_test,
    per_concept_analysis,
    per_language_analysis,
)
from .synthetic import generate, spec_from_dict

log = logging.getLogger("formmeaning")


def _flags(raw: str | None) -> str | None:
    return None if raw is None else ",".join(f.strip() for f in raw.split(",") if f.strip())


def _abs(path) -> Path | None:
    return None if path is None else Path(path).resolve()


def _run_config(args) -> RunConfig:
    """Config file values with command-line flags taking precedence."""
    overrides = {
        "input": _abs(getattr(args, "input", None)),
        "alphabet": _abs(getattr(args, "alphabet", None)),
        "run_dir": getattr(args, "run_dir", None),
        "drop_loans": getattr(args, "drop_loans", None),
        "exclude_flags": _flags(getattr(args, "exclude_flags", None)),
        "scheme": getattr(args, "fold_scheme", None),
        "seed": getattr(args, "seed", None),
        "seeds": getattr(args, "seeds", None),
        "workers": getattr(args, "workers", None),
        "budget": getattr(args, "budget", None),
        "seeds_per_config": getattr(args, "seeds_per_config", None),
        "n_permutations": getattr(args, "n_perm", None),
        "q": getattr(args, "q", None),
    }
    if getattr(args, "config", None):
        return load_run_config(args.config, overrides)
    if overrides["input"] is None or overrides["alphabet"] is None:
        raise ConfigError("--input and --alphabet are required without --config")
    kwargs = {
        "input": overrides["input"],
        "alphabet": overrides["alphabet"],
        "run_dir": Path(overrides["run_dir"] or "run"),
    }
    mapping = {
        "drop_loans": "drop_loans",
        "scheme": "fold_scheme",
        "seed": "fold_seed",
        "seeds": "seeds",
        "workers": "workers",
        "budget": "hyperopt_budget",
        "seeds_per_config": "seeds_per_config",
        "n_permutations": "n_permutations",
        "q": "q",
    }
    for key, name in mapping.items():
        if overrides[key] is not None:
            kwargs[name] = overrides[key]
    if overrides["exclude_flags"] is not None:
        kwargs["exclude_flags"] = frozenset(f for f in overrides["exclude_flags"].split(",") if f)
    return RunConfig(**kwargs)


def _lexicon(cfg: RunConfig) -> Lexicon:
    return load_lexicon(cfg.input, cfg.alphabet, FilterPolicy(cfg.exclude_flags, cfg.drop_loans))


def _fold(lex: Lexicon, cfg: RunConfig, index: int):
    folds = make_folds(lex, cfg.fold_scheme, cfg.fold_seed).folds
    if not 0 <= index < len(folds):
        raise ConfigError(f"--fold-index must be in [0, {len(folds) - 1}]")
    f = folds[index]
    return lex.subset(f.train), lex.subset(f.validation), lex.subset(f.test), f


def cmd_ingest(args) -> int:
    cfg = _run_config(args)
    lex = _lexicon(cfg)
    folds = make_folds(lex, cfg.fold_scheme, cfg.fold_seed)
    summary = {
        "doculects": len(lex.doculects),
        "concepts": lex.n_concepts,
        "words": lex.n_words,
        "fingerprint": lex.fingerprint(),
        "scheme": folds.scheme,
        "folds": [
            {"label": list(f.label), "train": len(f.train), "validation": len(f.validation), "test": len(f.test)}
            for f in folds.folds
        ],
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "lexicon.tsv").write_text(serialize(lex), encoding="utf-8")
        with open(out / "folds.json", "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "scheme": folds.scheme,
                    "folds": [
                        {
                            "label": list(f.label),
                            "train": sorted(f.train),
                            "validation": sorted(f.validation),
                            "test": sorted(f.test),
                        }
                        for f in folds.folds
                    ],
                },
                fh,
                indent=2,
            )
            fh.write("\n")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    lex = _lexicon(cfg)
    train_lex, val_lex, _, fold = _fold(lex, cfg, args.fold_index)
    model_cfg = replace(cfg.model, conditional=args.conditional)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    kind = "cond" if args.conditional else "uncond"
    entries = []
    for seed in range(cfg.seeds):
        model = train(train_lex, val_lex, model_cfg, args.fold_index, seed)
        name = f"fold{args.fold_index}_seed{seed:03d}_{kind}.json"
        model.save(run_dir / name)
        entries.append({"checkpoint": name, **model.manifest()})
        print(f"seed {seed}: validation xent {model.validation_xent:.4f} bits/phone (epoch {model.best_epoch})")
    manifest = {
        "fold_scheme": cfg.fold_scheme,
        "fold_index": args.fold_index,
        "fold_label": list(fold.label),
        "conditional": args.conditional,
        "config": model_cfg.to_dict(),
        "models": entries,
    }
    with open(run_dir / f"train_fold{args.fold_index}_{kind}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _run_metadata(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {}


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    meta = _run_metadata(run_dir)
    concepts = meta.get("concepts")
    symbols = meta.get("symbols")
    out = Path(args.out) if args.out else None
    if args.granularity == "pair":
        path = run_dir / "token_pmi_records.csv"
        if not path.exists():
            raise DataError(f"{path} not found")
        tokens = read_records(path, TokenPmiRecord)
        report = concept_token_analysis(tokens, args.min_joint, args.n_perm, args.q, seed=args.seed)

        def name(i):
            if symbols is None:
                return str(i)
            return "</s>" if i >= len(symbols) else symbols[i]

        if concepts is None:
            concepts = [str(i) for i in range(max((t.concept_id for t in tokens), default=-1) + 1)]
        write_pair_report(out or sys.stdout, report, concepts, name)
        return 0
    path = run_dir / "pmi_records.csv"
    if not path.exists():
        raise DataError(f"{path} not found")
    records = read_records(path, PmiRecord)
    if args.granularity == "overall":
        h_w, h_wv = estimate_entropy(records), estimate_entropy(records, conditional=True)
        mi = mutual_information(h_w, h_wv)
        res = hierarchical_sign_flip_test(records, args.n_perm, make_rng("overall", "records", args.seed))
        print(f"H(W) = {h_w.value:.4f} bits/phone")
        print(f"MI(W;V) = {mi:.4f} bits/phone")
        print(f"U(W|V) = {100 * mi / h_w.value:.3f}%")
        print(f"p = {res.p_value:.3g} ({res.n_permutations} sign flips over {res.unit_count} words)")
        return 0
    if args.granularity == "concept":
        ids = sorted({r.concept_id for r in records})
        names = concepts or [str(i) for i in range(max(ids) + 1)]
        report = per_concept_analysis(records, args.n_perm, args.q, names, args.seed)
        write_concept_report(out or sys.stdout, report)
    else:
        report = per_language_analysis(records, args.n_perm, args.q, args.seed)
        write_language_report(out or sys.stdout, report)
    return 0


def cmd_hyperopt(args) -> int:
    cfg = _run_config(args)
    if cfg.hyperopt_budget < 1:
        raise ConfigError("--budget must be >= 1")
    lex = _lexicon(cfg)
    train_lex, val_lex, _, _ = _fold(lex, cfg, args.fold_index)
    history_path = Path(args.history) if args.history else None
    history = None
    if history_path and history_path.exists():
        history = TrialHistory.from_jsonl(history_path.read_text(encoding="utf-8"))
        log.info("resuming from %d trials", len(history))
    best, history = run_search(
        train_lex,
        val_lex,
        cfg.hyperopt_budget,
        cfg.seeds_per_config,
        fold_id=args.fold_index,
        seed=cfg.fold_seed,
        base=cfg.model,
        conditional=args.conditional,
        history=history,
    )
    if history_path:
        history_path.write_text(history.to_jsonl(), encoding="utf-8")
    print(json.dumps(best.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    try:
        obj = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read synthetic spec {args.spec}: {exc}") from exc
    spec = spec_from_dict(obj)
    text = serialize(generate(spec, args.seed))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        if args.alphabet_out:
            Path(args.alphabet_out).write_text("\n".join(spec.symbols) + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _run_config(args)
    manifest = run_pipeline(cfg)
    print(format_report(cfg.run_dir))
    return 0 if manifest["status"] == "complete" else 1


def cmd_report(args) -> int:
    print(format_report(args.run_dir))
    return 0


def cmd_compare(args) -> int:
    res = compare_runs(args.run_a, args.run_b)
    print(f"t = {res.t:.4f}  df = {res.df:.2f}  one-sided p = {res.p_value:.4g}")
    return 0


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run config; flags below override it")
    p.add_argument("--input", help="wordlist TSV")
    p.add_argument("--alphabet", help="alphabet file, one symbol per line")
    loans = p.add_mutually_exclusive_group()
    loans.add_argument("--drop-loans", dest="drop_loans", action="store_true", default=None)
    loans.add_argument("--keep-loans", dest="drop_loans", action="store_false")
    p.add_argument("--exclude-flags", help="comma-separated status flags to drop")
    p.add_argument("--fold-scheme", choices=("macroarea", "family"))
    p.add_argument("--seed", type=int, help="fold-assignment seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="formmeaning", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse, filter and fold a wordlist")
    _add_data_flags(p)
    p.add_argument("--out", help="directory for the cleaned TSV and fold listing")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one side of a fold's seed ensemble")
    _add_data_flags(p)
    p.add_argument("--fold-index", type=int, default=0)
    p.add_argument("--conditional", action="store_true")
    p.add_argument("--seeds", type=int)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="significance tests on a run's PMI records")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--granularity", choices=("overall", "concept", "language", "pair"), default="overall")
    p.add_argument("--n-perm", type=int, default=100_000)
    p.add_argument("--q", type=float, default=0.01)
    p.add_argument("--min-joint", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: standard output)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("hyperopt", help="Bayesian search over model hyperparameters")
    _add_data_flags(p)
    p.add_argument("--budget", type=int)
    p.add_argument("--seeds-per-config", type=int)
    p.add_argument("--fold-index", type=int, default=0)
    p.add_argument("--conditional", action="store_true")
    p.add_argument("--history", help="JSON-lines trial history, resumed if present")
    p.set_defaults(func=cmd_hyperopt)

    p = sub.add_parser("synth", help="sample a synthetic lexicon")
    p.add_argument("--spec", required=True, help="JSON synthetic spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="TSV path (default: standard output)")
    p.add_argument("--alphabet-out", help="also write the alphabet file here")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="full run: folds, ensembles, scoring, analyses")
    _add_data_flags(p)
    p.add_argument("--run-dir")
    p.add_argument("--seeds", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--seeds-per-config", type=int)
    p.add_argument("--n-perm", type=int)
    p.add_argument("--q", type=float)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="print a run's summary table")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="Welch's t-test: is run A's MI above run B's?")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except FormMeaningError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
