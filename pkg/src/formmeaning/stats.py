"""Permutation tests, Benjamini-Hochberg correction and Welch's t-test.

All permutation tests are one-sided (alternative: mean > 0) sign-flip tests
with the add-one p-value ``(1 + #{perm >= observed}) / (n_perm + 1)``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import DataError
from .estimators import PmiRecord, TokenPmiRecord, hierarchical_mean, hierarchy_weights
from .rng import make_rng

# Sign matrices are generated in chunks of at most this many entries.
_CHUNK_ENTRIES = 1 << 21


@dataclass(frozen=True)
class PermutationResult:
    observed_mean: float
    n_permutations: int
    p_value: float
    unit_count: int


def _weighted_sign_flip(
    values: np.ndarray, weights: np.ndarray, n_perm: int, rng: np.random.Generator
) -> PermutationResult:
    """Null distribution of ``sum(w * s * v)`` over independent random signs ``s``."""
    wv = np.asarray(weights, dtype=float) * np.asarray(values, dtype=float)
    n = wv.size
    if n == 0:
        raise DataError("permutation test needs at least one value")
    observed = math.fsum(wv)
    # permuted sums reach the observed one through a different summation order
    threshold = observed - 1e-12 * math.fsum(np.abs(wv))
    exceed = 0
    chunk = max(1, _CHUNK_ENTRIES // n)
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        signs = rng.integers(0, 2, size=(m, n), dtype=np.int8).astype(float) * 2.0 - 1.0
        exceed += int(np.count_nonzero(signs @ wv >= threshold))
        done += m
    return PermutationResult(observed, n_perm, (1 + exceed) / (n_perm + 1), n)


def sign_flip_test(
    values: Sequence[float], n_perm: int = 100_000, rng: np.random.Generator | None = None
) -> PermutationResult:
    """Paired sign-flip test on the plain mean of ``values``."""
    values = np.asarray(values, dtype=float)
    rng = rng if rng is not None else make_rng("sign-flip")
    return _weighted_sign_flip(values, np.full(values.size, 1.0 / max(values.size, 1)), n_perm, rng)


def hierarchical_sign_flip_test(
    records: Sequence, n_perm: int = 100_000, rng: np.random.Generator | None = None, value: str = "pmi"
) -> PermutationResult:
    """Sign-flip each record's value, then re-average through the full hierarchy.

    The hierarchical mean is linear in the record values, so each permuted
    statistic is a dot product of the signs with fixed per-record weights.
    """
    records = list(records)
    rng = rng if rng is not None else make_rng("hierarchical-sign-flip")
    values = np.array([getattr(r, value) for r in records], dtype=float)
    return _weighted_sign_flip(values, hierarchy_weights(records), n_perm, rng)


def benjamini_hochberg(pvalues: Sequence[float | None], q: float) -> tuple[list[bool], list[float | None]]:
    """Step-up FDR procedure. ``None`` entries are skipped and stay ``None``.

    Returns per-hypothesis rejection decisions and monotone adjusted p-values.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must be in (0, 1), got {q}")
    idx = [i for i, p in enumerate(pvalues) if p is not None]
    m = len(idx)
    rejected = [False] * len(pvalues)
    adjusted: list[float | None] = [None] * len(pvalues)
    if m == 0:
        return rejected, adjusted
    p = np.array([pvalues[i] for i in idx], dtype=float)
    order = np.argsort(p, kind="mergesort")
    ranked = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum(np.minimum.accumulate(ranked[::-1])[::-1], 1.0)
    passing = np.flatnonzero(p[order] <= q * np.arange(1, m + 1) / m)
    cutoff = int(passing.max()) + 1 if passing.size else 0
    for rank, j in enumerate(order):
        adjusted[idx[j]] = float(adj_sorted[rank])
        rejected[idx[j]] = rank < cutoff
    return rejected, adjusted


@dataclass
class ReportRow:
    key: tuple
    statistic: float | None
    uncertainty: float | None
    p_value: float | None
    adjusted_p: float | None = None
    significant: bool = False
    extra: dict = field(default_factory=dict)


@dataclass
class AnalysisReport:
    granularity: str
    q: float
    n_permutations: int
    rows: list[ReportRow]

    def significant_keys(self) -> list[tuple]:
        return [r.key for r in self.rows if r.significant]


def _apply_bh(rows: list[ReportRow], q: float) -> None:
    rejected, adjusted = benjamini_hochberg([r.p_value for r in rows], q)
    for r, rej, adj in zip(rows, rejected, adjusted):
        r.significant = rej
        r.adjusted_p = adj


def per_concept_analysis(
    records: Sequence[PmiRecord],
    n_perm: int = 100_000,
    q: float = 0.01,
    concepts: Sequence[str] | None = None,
    seed: int = 0,
) -> AnalysisReport:
    """Hierarchical sign-flip test per concept, BH-corrected across concepts.

    With ``concepts`` given, every concept gets a row; those without records
    carry a null p-value.
    """
    groups: dict[int, list[PmiRecord]] = defaultdict(list)
    for r in records:
        groups[r.concept_id].append(r)
    ids = range(len(concepts)) if concepts is not None else sorted(groups)
    rows = []
    for cid in ids:
        key = (concepts[cid] if concepts is not None else cid,)
        recs = groups.get(cid, [])
        if not recs:
            rows.append(ReportRow(key, None, None, None, extra={"n_words": 0, "mean_len": None}))
            continue
        res = hierarchical_sign_flip_test(recs, n_perm, make_rng("concept", seed, cid))
        h_w = hierarchical_mean(recs, "word_xent_uncond").value
        mean_len = float(np.mean([r.phone_count - 1 for r in recs]))
        rows.append(
            ReportRow(
                key,
                res.observed_mean,
                res.observed_mean / h_w if h_w > 0 else None,
                res.p_value,
                extra={"n_words": len(recs), "mean_len": mean_len},
            )
        )
    _apply_bh(rows, q)
    return AnalysisReport("concept", q, n_perm, sorted(rows, key=lambda r: r.key))


def _language_statistic_weights(recs: Sequence[PmiRecord]) -> np.ndarray:
    # Doculect means first, then the mean over the language's doculects.
    per_doc: dict[str, int] = defaultdict(int)
    for r in recs:
        per_doc[r.doculect_id] += 1
    return np.array([1.0 / (len(per_doc) * per_doc[r.doculect_id]) for r in recs])


def per_language_analysis(
    records: Sequence[PmiRecord],
    n_perm: int = 100_000,
    q: float = 0.01,
    seed: int = 0,
    coordinates: dict[str, tuple[float, float]] | None = None,
) -> AnalysisReport:
    """Sign-flip test on each language's mean word PMI, BH across languages."""
    groups: dict[str, list[PmiRecord]] = defaultdict(list)
    for r in records:
        groups[r.language].append(r)
    rows = []
    for lang in sorted(groups):
        recs = groups[lang]
        vals = np.array([r.pmi for r in recs])
        w = _language_statistic_weights(recs)
        res = _weighted_sign_flip(vals, w, n_perm, make_rng("language", seed, lang))
        h_w = float(w @ np.array([r.word_xent_uncond for r in recs]))
        extra = {"n_words": len(recs), "family": recs[0].family, "macroarea": recs[0].macroarea}
        if coordinates:
            lat, lon = coordinates.get(lang, (math.nan, math.nan))
            extra.update(latitude=lat, longitude=lon)
        rows.append(ReportRow((lang,), res.observed_mean, res.observed_mean / h_w, res.p_value, extra=extra))
    _apply_bh(rows, q)
    return AnalysisReport("language", q, n_perm, rows)


def concept_token_analysis(
    token_records: Sequence[TokenPmiRecord],
    min_joint: int = 1000,
    n_perm: int = 100_000,
    q: float = 0.01,
    macroareas: Sequence[str] | None = None,
    seed: int = 0,
) -> AnalysisReport:
    """Per (concept, symbol, macroarea) hierarchical sign-flip tests on token PMI.

    Pairs seen together fewer than ``min_joint`` times are dropped. BH runs
    over every remaining (concept, symbol, macroarea) test; a pair is reported
    significant only if it is significant in every macroarea.
    """
    groups: dict[tuple[int, int], list[TokenPmiRecord]] = defaultdict(list)
    for r in token_records:
        groups[(r.concept_id, r.symbol)].append(r)
    areas = sorted(macroareas) if macroareas is not None else sorted({r.macroarea for r in token_records})
    tests: list[tuple[tuple[int, int], str, float | None, float | None]] = []
    for key in sorted(groups):
        recs = groups[key]
        if len(recs) < min_joint:
            continue
        by_area: dict[str, list[TokenPmiRecord]] = defaultdict(list)
        for r in recs:
            by_area[r.macroarea].append(r)
        for area in areas:
            sub = by_area.get(area, [])
            if not sub:
                tests.append((key, area, None, None))
                continue
            res = hierarchical_sign_flip_test(
                sub, n_perm, make_rng("pair", seed, key[0], key[1], area), value="pmi_token"
            )
            tests.append((key, area, res.observed_mean, res.p_value))
    rejected, adjusted = benjamini_hochberg([t[3] for t in tests], q)
    rows_by_key: dict[tuple[int, int], ReportRow] = {}
    for (key, area, stat, p), rej, adj in zip(tests, rejected, adjusted):
        row = rows_by_key.setdefault(
            key,
            ReportRow(key, None, None, None, extra={"n_joint": len(groups[key]), "areas": {}}),
        )
        row.extra["areas"][area] = {"mean": stat, "p": p, "adjusted_p": adj, "significant": rej}
    rows = []
    for key in sorted(rows_by_key):
        row = rows_by_key[key]
        per_area = row.extra["areas"]
        row.significant = all(per_area.get(a, {}).get("significant", False) for a in areas)
        ps = [per_area[a]["p"] for a in areas if per_area.get(a, {}).get("p") is not None]
        row.p_value = max(ps) if ps else None
        adj = [per_area[a]["adjusted_p"] for a in areas if per_area.get(a, {}).get("adjusted_p") is not None]
        row.adjusted_p = max(adj) if adj else None
        rows.append(row)
    return AnalysisReport("concept_token", q, n_perm, rows)


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p_value: float


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Unequal-variance t-test; one-sided p-value for mean(a) > mean(b)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise DataError("Welch's t-test needs at least two values per sample")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    if va + vb == 0.0:
        raise DataError("Welch's t-test is undefined when both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return WelchResult(float(t), float(df), float(sps.t.sf(t, df)))
