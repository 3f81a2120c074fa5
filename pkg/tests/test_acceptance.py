"""End-to-end acceptance criteria.

Each test prints one ``PASS``/``FAIL`` line to the terminal (visible without
``-s``). Training-heavy criteria carry the ``slow`` marker; deselect them
with ``-m "not slow"``. Tolerances are fixed below.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from oracles import benjamini_hochberg_reference, central_difference_check
from scipy import stats as sps

from formmeaning import estimators as est
from formmeaning import neural, stats
from formmeaning import synthetic as syn
from formmeaning.estimators import PmiRecord
from formmeaning.lexicon import MACROAREAS, family_weights, make_folds, serialize
from formmeaning.models import ModelConfig, TrainedModel
from formmeaning.pipeline import RunConfig, run_pipeline
from formmeaning.rng import make_rng

LOG2_42 = math.log2(42)

# C1
GRAD_CONFIGS = 20
GRAD_TOL = 1e-4
GRAD_SECONDS = 60.0
# C3
PLANT_STRENGTH = 1.4
PLANTED = (0, 1, 2, 3, 4)
N_CONCEPTS = 20
C3_REPS = 5
C3_SEEDS = 2
MI_REL_TOL, MI_ABS_TOL = 0.15, 0.02
C3_SECONDS = 30 * 60.0
SYNTH_MODEL = ModelConfig(embedding_dim=16, hidden_dim=32, lr=0.005, patience=4, max_epochs=60, batch_size=64)
# C4
NULL_REPS = 20
NULL_P_SHARE = 0.9
NULL_NEG_RANGE = (5, 15)
# C5
SIZE_SIMS, SIZE_ALPHA, SIZE_RANGE = 1000, 0.01, (0.005, 0.02)
FDR_Q, FDR_SLACK, FDR_SIMS = 0.05, 0.02, 2000
WELCH_A = [27.5, 21, 19, 23.6, 17, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19, 21.7, 21.4]
WELCH_B = [27.1, 22, 20.8, 23.4, 23.4, 23.5, 25.8, 22, 24.8, 20.2, 21.9, 22.1, 22.9, 30.6, 20.5, 24.1, 24.3,
           23.7, 19.7, 24.3]
WELCH_T, WELCH_DF = -2.7541262837266904, 28.56080933064594
# C7 reference values and windows
REFERENCE_H, REFERENCE_MI = 3.857, 0.012
H_WINDOW, MI_WINDOW = (3.6, 4.1), (0.005, 0.025)


@pytest.fixture
def verdict(capsys):
    """Print one criterion line straight to the terminal, then assert."""

    def emit(criterion: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {criterion}: {detail}")
        assert ok, f"{criterion}: {detail}"

    return emit


def synthetic_run(root: Path, spec: syn.SyntheticSpec, data_seed: int, **overrides) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "lexicon.tsv").write_text(serialize(syn.generate(spec, seed=data_seed)), encoding="utf-8")
    (root / "alphabet.txt").write_text("\n".join(spec.symbols) + "\n", encoding="utf-8")
    settings = dict(seeds=1, workers=1, model=SYNTH_MODEL, n_permutations=10_000, language_analysis=False,
                    pair_analysis=False)
    settings.update(overrides)
    cfg = RunConfig(root / "lexicon.tsv", root / "alphabet.txt", root / "run", **settings)
    manifest = run_pipeline(cfg)
    assert manifest["status"] == "complete"
    return root / "run"


def read_table(run_dir: Path) -> dict:
    return json.loads((run_dir / "table1.json").read_text(encoding="utf-8"))


def test_c1_gradient_correctness(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for i in range(GRAD_CONFIGS):
        conditional = bool(i % 2)
        n_classes = int(rng.integers(3, 8))
        k = int(rng.integers(2, 5)) if conditional else 0
        params = neural.init_params(n_classes, int(rng.integers(1, 9)), int(rng.integers(1, 9)),
                                    int(rng.integers(1, 4)), k, rng=rng)
        batch, steps = int(rng.integers(1, 4)), int(rng.integers(1, 7))
        targets = rng.integers(0, n_classes - 1, (batch, steps))
        lengths = rng.integers(1, steps + 1, batch)
        targets[np.arange(batch), lengths - 1] = n_classes - 1
        inputs = np.full_like(targets, n_classes - 1)
        inputs[:, 1:] = targets[:, :-1]
        weights = (np.arange(steps)[None, :] < lengths[:, None]) * rng.uniform(0.2, 1.0, (batch, 1))
        concepts = rng.integers(0, k, batch) if conditional else None
        rate = 0.25 if i % 4 == 3 else 0.0

        def loss(p=params, i=inputs, t=targets, w=weights, c=concepts, r=rate):
            return neural.loss_and_grads(p, i, t, w, c, dropout_rate=r, rng=np.random.default_rng(i.size),
                                         training=r > 0)

        worst = max(worst, central_difference_check(params, lambda: loss()[0], loss()[1], rng))
    elapsed = time.perf_counter() - start
    verdict("C1 gradient correctness", worst < GRAD_TOL and elapsed < GRAD_SECONDS,
            f"max relative error {worst:.2e} over {GRAD_CONFIGS} configs (< {GRAD_TOL:g}) in {elapsed:.1f}s")


def test_c2_uniform_model_entropy(verdict):
    errors = []
    for k, seed in ((3, 0), (7, 1), (20, 2)):
        spec = syn.layered_spec(k, {0: 1.0}, seed=seed, n_families=5, languages_per_family=3)
        lex = syn.generate(spec, seed=seed)
        models = []
        for conditional in (False, True):
            params = neural.init_params(42, 4, 8, 1, k if conditional else 0, rng=np.random.default_rng(seed))
            params["out.weight"][:] = 0.0
            params["out.bias"][:] = 0.0
            models.append(TrainedModel(params, ModelConfig(embedding_dim=4, hidden_dim=32, conditional=conditional),
                                       lex.alphabet.fingerprint(), k))
        recs = est.score_heldout(models[0], models[1], lex)
        errors.append(abs(est.estimate_entropy(recs).value - LOG2_42))
        errors.append(abs(est.estimate_entropy(recs, conditional=True).value - LOG2_42))
    verdict("C2 uniform-model entropy", max(errors) <= 1e-9,
            f"max |H - log2 42| = {max(errors):.1e} over 3 held-out sets (<= 1e-9)")


@pytest.mark.slow
def test_c3_oracle_equivalence(verdict, tmp_path):
    spec = syn.layered_spec(N_CONCEPTS, {c: PLANT_STRENGTH for c in PLANTED}, seed=0)
    oracle = syn.true_mi_bruteforce(spec, max_len=6)
    planted_mi = [oracle.per_concept[c] for c in PLANTED]
    tol = max(MI_REL_TOL * oracle.mi_per_phone, MI_ABS_TOL)
    start = time.perf_counter()
    estimates, flagged = [], []
    for rep in range(C3_REPS):
        run = synthetic_run(tmp_path / f"rep{rep}", spec, rep, seeds=C3_SEEDS)
        estimates.append(read_table(run)["average"]["MI"])
        with open(run / "concept_report.csv", newline="", encoding="utf-8") as fh:
            flagged.append(sorted(int(r["concept"][1:]) for r in csv.DictReader(fh) if r["significant"] == "1"))
    elapsed = time.perf_counter() - start
    mi_ok = all(abs(e - oracle.mi_per_phone) <= tol for e in estimates)
    flags_ok = all(f == list(PLANTED) for f in flagged)
    band_ok = all(0.05 <= m <= 0.15 for m in planted_mi)
    detail = (f"oracle MI {oracle.mi_per_phone:.4f} bits/phone (planted concepts "
              f"{min(planted_mi):.3f}-{max(planted_mi):.3f}), estimates "
              f"{', '.join(f'{e:.4f}' for e in estimates)} (tolerance {tol:.4f}); flagged sets {flagged}; "
              f"{elapsed / 60:.1f} min")
    verdict("C3 oracle equivalence", mi_ok and flags_ok and band_ok and elapsed < C3_SECONDS, detail)


@pytest.fixture(scope="module")
def null_runs(tmp_path_factory):
    spec = syn.layered_spec(10, {}, seed=1, n_families=20, languages_per_family=10)
    root = tmp_path_factory.mktemp("null")
    out = []
    for rep in range(NULL_REPS):
        avg = read_table(synthetic_run(root / f"rep{rep}", spec, rep, concept_analysis=False))["average"]
        out.append((avg["MI"], avg["p_value"]))
    return out


@pytest.mark.slow
def test_c4_null_p_values(verdict, null_runs):
    share = sum(p > 0.05 for _, p in null_runs) / len(null_runs)
    verdict("C4a null calibration (p-values)", share >= NULL_P_SHARE,
            f"p > 0.05 in {share:.0%} of {len(null_runs)} null repetitions (>= {NULL_P_SHARE:.0%})")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="finite-sample overfitting of the concept-conditioned initial state biases "
                                       "null MI estimates below zero at desk scale; see the decisions ledger")
def test_c4_null_sign_balance(verdict, null_runs):
    neg = sum(m < 0 for m, _ in null_runs)
    mean = float(np.mean([m for m, _ in null_runs]))
    verdict("C4b null calibration (sign balance)", NULL_NEG_RANGE[0] <= neg <= NULL_NEG_RANGE[1],
            f"{neg} of {len(null_runs)} null MI estimates negative (expected {NULL_NEG_RANGE[0]}-"
            f"{NULL_NEG_RANGE[1]}); mean {mean:+.4f} bits/phone")


@pytest.mark.slow
def test_c5_statistical_machinery(verdict):
    rng = np.random.default_rng(55)
    rejections = sum(
        stats.sign_flip_test(rng.normal(size=30), 1999, make_rng("size", i)).p_value <= SIZE_ALPHA
        for i in range(SIZE_SIMS)
    )
    size = rejections / SIZE_SIMS

    fdp = []
    for _ in range(FDR_SIMS):
        m0, m1 = 40, 10
        z = np.concatenate([rng.normal(size=m0), rng.normal(3.0, 1.0, m1)])
        p = list(sps.norm.sf(z))
        rejected, _ = stats.benjamini_hochberg(p, FDR_Q)
        assert rejected == benjamini_hochberg_reference(p, FDR_Q)
        n_rej = sum(rejected)
        fdp.append(sum(rejected[:m0]) / max(n_rej, 1))
    fdr = float(np.mean(fdp))

    w = stats.welch_t_test(WELCH_A, WELCH_B)
    welch_ok = round(w.t, 3) == round(WELCH_T, 3) and round(w.df, 3) == round(WELCH_DF, 3)
    ok = SIZE_RANGE[0] <= size <= SIZE_RANGE[1] and fdr <= FDR_Q + FDR_SLACK and welch_ok
    verdict("C5 statistical machinery", ok,
            f"sign-flip size {size:.3f} at alpha={SIZE_ALPHA} (in {SIZE_RANGE}); BH FDR {fdr:.4f} at q={FDR_Q} "
            f"(<= {FDR_Q + FDR_SLACK}); Welch t={w.t:.3f} df={w.df:.3f}")


def test_c6_hierarchy_invariance(verdict):
    rng = np.random.default_rng(6)
    recs = []
    for i in range(400):
        area = MACROAREAS[i % 4]
        fam = f"{area}-f{i % 11}"
        lang = f"{fam}-l{i % 5}"
        recs.append(PmiRecord(f"{lang}-d{i % 3}", lang, fam, area, i % 7, 3.0, 3.0, float(rng.normal()), 4))
    base = est.hierarchical_mean(recs).value
    worst = 0.0
    for fam in sorted({r.family for r in recs}):
        dup = recs + [r for r in recs if r.family == fam]
        worst = max(worst, abs(est.hierarchical_mean(dup).value - base))

    lex = syn.generate(syn.layered_spec(3, seed=0, n_families=12, languages_per_family=2), seed=0)
    # regroup into uneven families that stay inside one macroarea
    lex = replace(lex, doculects=tuple(replace(d, family=f"{d.macroarea}-{(i * i) % 3}")
                                       for i, d in enumerate(lex.doculects)))
    exact = True
    for scheme in ("macroarea", "family"):
        for fold in make_folds(lex, scheme, seed=1).folds:
            for part in (fold.train, fold.validation, fold.test):
                docs = [d for d in lex.doculects if d.doculect_id in part]
                weights = family_weights(docs)
                totals: dict[str, object] = {}
                for d in docs:
                    totals[d.family] = totals.get(d.family, 0) + weights[d.doculect_id]
                exact &= all(t == 1 for t in totals.values())
    verdict("C6 hierarchy invariance", worst < 1e-12 and exact,
            f"max change after duplicating a family {worst:.1e} (< 1e-12); family weight totals exactly 1: {exact}")


def test_c7_full_scale_drift(verdict):
    path = os.environ.get("FORMMEANING_ASJP")
    if not path:
        pytest.skip("set FORMMEANING_ASJP to a wordlist TSV and FORMMEANING_ASJP_ALPHABET to run the drift report")
    run_dir = Path(os.environ.get("FORMMEANING_ASJP_RUN", "asjp-run"))
    cfg = RunConfig(Path(path), Path(os.environ["FORMMEANING_ASJP_ALPHABET"]), run_dir,
                    seeds=int(os.environ.get("FORMMEANING_ASJP_SEEDS", "25")))
    run_pipeline(cfg)
    t1 = read_table(run_dir)
    hs = [r["H_W"] for r in t1["folds"]]
    mi = t1["average"]["MI"]
    ok = all(H_WINDOW[0] <= h <= H_WINDOW[1] for h in hs) and MI_WINDOW[0] <= mi <= MI_WINDOW[1]
    verdict("C7 full-scale drift report", ok,
            f"H(W) per fold {[round(h, 3) for h in hs]} vs {REFERENCE_H}; mean MI {mi:.4f} vs {REFERENCE_MI}")


def test_c8_determinism(verdict, tmp_path):
    spec = syn.layered_spec(5, {0: 2.0}, seed=2, n_families=8, languages_per_family=3)
    fast = replace(SYNTH_MODEL, max_epochs=4)
    outputs = ("config.ini", "pmi_records.csv", "token_pmi_records.csv", "table1.json", "concept_report.csv",
               "language_report.csv", "pair_report.csv", "manifest.json")
    snapshots = []
    for i, workers in enumerate((1, 1, 3)):
        # same directory every time so recorded paths cannot differ
        run = synthetic_run(tmp_path / "work", spec, 0, seeds=3, workers=workers, model=fast, n_permutations=500,
                            language_analysis=True, pair_analysis=True, min_joint=10)
        snapshots.append({n: (run / n).read_bytes() for n in outputs})
        shutil.rmtree(tmp_path / "work")
    same = all(s == snapshots[0] for s in snapshots[1:])
    verdict("C8 determinism", same, f"{len(outputs)} outputs byte-identical across reruns with 1 and 3 workers")
