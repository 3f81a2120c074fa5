"""Synthetic lexica with exactly computable form-meaning mutual information.

Every concept owns a first-order Markov chain over ``symbols + [eos]``. Row
``eos`` of a transition table is the start distribution, matching the
language model's use of eos as the begin marker. Planted concepts tilt the
shared background chain toward a few favoured symbols.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .lexicon import ASJP_SYMBOLS, MACROAREAS, Alphabet, Doculect, Lexicon, WordEntry
from .rng import make_rng

MAX_EXPECTED_LENGTH = 50.0
TRUNCATION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SyntheticSpec:
    symbols: tuple[str, ...]
    tables: np.ndarray  # (K, V, V), V = len(symbols) + 1
    bias_strength: tuple[float, ...]
    n_families: int = 40
    languages_per_family: int = 10
    concepts: tuple[str, ...] = ()
    favoured: tuple[tuple[int, ...], ...] = ()
    macroareas: tuple[str, ...] = field(default=MACROAREAS)

    def __post_init__(self):
        tables = np.asarray(self.tables, dtype=float)
        object.__setattr__(self, "tables", tables)
        k, v, v2 = tables.shape
        if v != v2 or v != len(self.symbols) + 1:
            raise DataError("transition tables must be (K, |symbols|+1, |symbols|+1)")
        if not self.concepts:
            object.__setattr__(self, "concepts", tuple(f"c{i:02d}" for i in range(k)))
        if len(self.concepts) != k or len(self.bias_strength) != k:
            raise DataError("concepts and bias_strength must have one entry per table")
        if np.any(tables < 0) or not np.allclose(tables.sum(axis=2), 1.0, atol=1e-12):
            raise DataError("every transition row must be a probability distribution")
        if np.any(tables[:, v - 1, v - 1] > 0):
            raise DataError("the start distribution must not emit eos (empty words)")
        for c in range(k):
            length = expected_length(tables[c])
            if not length <= MAX_EXPECTED_LENGTH:
                raise DataError(
                    f"concept {self.concepts[c]}: expected length {length} exceeds "
                    f"{MAX_EXPECTED_LENGTH}; eos is not reliably reachable"
                )

    @property
    def n_concepts(self) -> int:
        return self.tables.shape[0]

    @property
    def eos(self) -> int:
        return len(self.symbols)


def expected_length(table: np.ndarray) -> float:
    """Expected prediction steps (symbols + eos) via the fundamental matrix."""
    n = table.shape[0] - 1
    q = table[:n, :n]
    start = table[n, :n]
    try:
        visits = np.linalg.solve((np.eye(n) - q).T, start)
    except np.linalg.LinAlgError:
        return math.inf
    if np.any(visits < -1e-9) or not np.all(np.isfinite(visits)):
        return math.inf
    return float(visits.sum() + 1.0)


def expected_symbol_counts(table: np.ndarray) -> np.ndarray:
    n = table.shape[0] - 1
    return np.linalg.solve((np.eye(n) - table[:n, :n]).T, table[n, :n])


def tilt(table: np.ndarray, favoured: tuple[int, ...], strength: float) -> np.ndarray:
    """Multiply favoured next-symbol probabilities by ``exp(strength)`` and renormalise."""
    out = table.copy()
    if strength:
        out[:, list(favoured)] *= math.exp(strength)
        out /= out.sum(axis=1, keepdims=True)
    return out


def layered_spec(
    n_concepts: int = 20,
    planted: dict[int, float] | None = None,
    *,
    seed: int = 0,
    n_families: int = 40,
    languages_per_family: int = 10,
    concentration: float = 30.0,
) -> SyntheticSpec:
    """Build a CV(C(V)) chain over the 41 ASJP symbols.

    Symbols are split into four positional layers (onset consonants,
    nuclear vowels, coda consonants, final vowels). Transitions only go to
    the next layer or to eos, so the string space is finite and small enough
    to enumerate exactly. ``planted`` maps concept index to tilt strength.
    """
    planted = planted or {}
    sym = ASJP_SYMBOLS
    vowels = [i for i, s in enumerate(sym) if s in "ieE3auo"]
    consonants = [i for i in range(len(sym)) if i not in vowels]
    layers = [consonants[:17], vowels[:4], consonants[17:], vowels[4:]]
    v = len(sym) + 1
    eos = v - 1
    stop_after = [0.0, 0.35, 0.6, 1.0]
    rng = make_rng("layered-spec", seed)

    def zipf(k):
        w = 1.0 / np.arange(1, k + 1)
        return w[rng.permutation(k)] / w.sum()

    base = np.zeros((v, v))
    targets = [layers[0]] + layers[1:]
    bases = [zipf(len(layer)) for layer in layers]
    base[eos, layers[0]] = rng.dirichlet(concentration * bases[0])
    for depth, layer in enumerate(layers):
        stop = stop_after[depth]
        for s in layer:
            if depth + 1 < len(layers):
                nxt = targets[depth + 1]
                base[s, nxt] = (1.0 - stop) * rng.dirichlet(concentration * bases[depth + 1])
            base[s, eos] = stop
    # unused rows (never visited) still need to be distributions
    for s in range(v):
        if base[s].sum() == 0.0:
            base[s, eos] = 1.0

    tables = []
    favoured = []
    strengths = []
    for c in range(n_concepts):
        fav = tuple(int(rng.choice(layer)) for layer in layers[:3])
        strength = float(planted.get(c, 0.0))
        tables.append(tilt(base, fav, strength))
        favoured.append(fav if strength else ())
        strengths.append(strength)
    return SyntheticSpec(
        sym,
        np.stack(tables),
        tuple(strengths),
        n_families,
        languages_per_family,
        favoured=tuple(favoured),
    )


def random_spec(
    n_symbols: int,
    n_concepts: int,
    *,
    stop: float = 0.5,
    planted: dict[int, float] | None = None,
    seed: int = 0,
    n_families: int = 8,
    languages_per_family: int = 2,
) -> SyntheticSpec:
    """Small fully connected chain (loops allowed) with constant stop probability."""
    planted = planted or {}
    rng = make_rng("random-spec", seed)
    v = n_symbols + 1
    base = np.zeros((v, v))
    base[:n_symbols, :n_symbols] = (1.0 - stop) * rng.dirichlet(np.ones(n_symbols), n_symbols)
    base[:n_symbols, n_symbols] = stop
    base[n_symbols, :n_symbols] = rng.dirichlet(np.ones(n_symbols))
    symbols = ASJP_SYMBOLS[:n_symbols]
    tables, favoured, strengths = [], [], []
    for c in range(n_concepts):
        fav = (int(rng.integers(n_symbols)),)
        strength = float(planted.get(c, 0.0))
        tables.append(tilt(base, fav, strength))
        favoured.append(fav if strength else ())
        strengths.append(strength)
    return SyntheticSpec(
        symbols, np.stack(tables), tuple(strengths), n_families, languages_per_family,
        favoured=tuple(favoured),
    )


def sample_words(table: np.ndarray, n: int, rng: np.random.Generator, cap: int = 1000) -> list[tuple[int, ...]]:
    """Draw ``n`` eos-terminated words from one chain."""
    eos = table.shape[0] - 1
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    state = np.full(n, eos)
    alive = np.ones(n, dtype=bool)
    out: list[list[int]] = [[] for _ in range(n)]
    for _ in range(cap):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        u = rng.random(idx.size)
        nxt = (cdf[state[idx]] < u[:, None]).sum(axis=1)
        for i, s in zip(idx, nxt):
            out[i].append(int(s))
        state[idx] = nxt
        alive[idx[nxt == eos]] = False
    else:
        raise DataError(f"sampled word exceeded {cap} steps")
    return [tuple(w) for w in out]


def generate(spec: SyntheticSpec, seed: int = 0) -> Lexicon:
    """Sample one word per concept for every synthetic language.

    Families are spread round-robin over the macroareas; each language is
    its own doculect with no ISO code.
    """
    rng = make_rng("synthetic-lexicon", seed)
    n_lang = spec.n_families * spec.languages_per_family
    words = [sample_words(spec.tables[c], n_lang, rng) for c in range(spec.n_concepts)]
    doculects = []
    for f in range(spec.n_families):
        area = spec.macroareas[f % len(spec.macroareas)]
        for j in range(spec.languages_per_family):
            li = f * spec.languages_per_family + j
            entries = tuple(WordEntry(c, words[c][li]) for c in range(spec.n_concepts))
            doculects.append(
                Doculect(
                    f"syn{f:03d}_{j:03d}",
                    f"fam{f:03d}",
                    area,
                    None,
                    round(float(rng.uniform(-60, 60)), 4),
                    round(float(rng.uniform(-180, 180)), 4),
                    frozenset(),
                    entries,
                )
            )
    return Lexicon(Alphabet(spec.symbols), spec.concepts, tuple(doculects))


@dataclass(frozen=True)
class OracleMI:
    """Exact information quantities of a synthetic spec (uniform concept prior).

    ``mi_per_phone`` is the expectation of PMI(w; c) / len(w), the quantity
    the held-out estimator averages; ``mi_per_word`` is the plain MI in bits
    per word and ``mi_rate`` is ``mi_per_word / expected_length``.
    """

    mi_per_phone: float
    mi_per_word: float
    mi_rate: float
    entropy: float
    conditional_entropy: float
    expected_length: float
    per_concept: tuple[float, ...]
    truncated_mass: float


def true_mi_bruteforce(spec: SyntheticSpec, max_len: int = 30) -> OracleMI:
    """Enumerate every string of at most ``max_len`` phones (eos included).

    Raises ``DataError`` if the probability mass of longer strings exceeds
    1e-9 under any concept.
    """
    tables = spec.tables
    k, v, _ = tables.shape
    eos = v - 1
    # Identical chains share one mixture component so the all-equal case is exact.
    groups: list[int] = []
    reps: list[int] = []
    for c in range(k):
        for gi, r in enumerate(reps):
            if np.array_equal(tables[r], tables[c]):
                groups.append(gi)
                break
        else:
            groups.append(len(reps))
            reps.append(c)
    counts = np.bincount(groups, minlength=len(reps)).astype(float)
    group_prior = counts / k
    comp = tables[reps]  # (G, V, V)

    mi_phone = mi_word = h_w = h_wv = exp_len = 0.0
    per_group = np.zeros(len(reps))
    prefix = np.ones((1, len(reps)))
    last = np.array([eos])
    for length in range(1, max_len + 1):
        step = comp[:, last, :].transpose(1, 0, 2)  # (M, G, V)
        ended = prefix * step[:, :, eos]  # (M, G)
        keep = ended.max(axis=1) > 0
        if keep.any():
            pc = ended[keep]
            pw = pc @ group_prior
            with np.errstate(divide="ignore", invalid="ignore"):
                log_ratio = np.where(pc > 0, np.log2(pc / pw[:, None]), 0.0)
                log_pc = np.where(pc > 0, np.log2(pc), 0.0)
            pmi_mass = pc * log_ratio  # (M', G)
            mi_word += float((pmi_mass @ group_prior).sum())
            mi_phone += float((pmi_mass @ group_prior).sum()) / length
            per_group += pmi_mass.sum(axis=0) / length
            h_w -= float((pw * np.log2(pw)).sum())
            h_wv -= float(((pc * log_pc) @ group_prior).sum())
            exp_len += float(pw.sum()) * length
        grow = prefix[:, :, None] * step[:, :, :eos]  # (M, G, V-1)
        grow = grow.transpose(0, 2, 1).reshape(-1, len(reps))
        nxt = np.tile(np.arange(eos), len(last))
        alive = grow.max(axis=1) > 0
        prefix, last = grow[alive], nxt[alive]
        if prefix.size == 0:
            break
    truncated = float(prefix.sum(axis=0).max()) if prefix.size else 0.0
    if truncated > TRUNCATION_TOLERANCE:
        raise DataError(
            f"probability mass {truncated:.3g} lies beyond max_len={max_len}; increase max_len"
        )
    per_concept = tuple(float(per_group[g]) for g in groups)
    return OracleMI(
        mi_per_phone=mi_phone,
        mi_per_word=mi_word,
        mi_rate=mi_word / exp_len,
        entropy=h_w,
        conditional_entropy=h_wv,
        expected_length=exp_len,
        per_concept=per_concept,
        truncated_mass=truncated,
    )


def spec_from_dict(obj: dict) -> SyntheticSpec:
    """Build a spec from a JSON-style description.

    ``{"kind": "layered" | "random", ...}`` forwards the remaining keys to
    :func:`layered_spec` or :func:`random_spec`; ``planted`` maps concept
    index (string or int) to tilt strength. ``{"kind": "explicit",
    "symbols": [...], "tables": [[[...]]]}`` gives the chains directly.
    """
    obj = dict(obj)
    kind = obj.pop("kind", "layered")
    if "planted" in obj:
        obj["planted"] = {int(k): float(v) for k, v in obj["planted"].items()}
    try:
        if kind == "layered":
            return layered_spec(**obj)
        if kind == "random":
            return random_spec(**obj)
        if kind == "explicit":
            tables = np.asarray(obj.pop("tables"), dtype=float)
            strengths = tuple(float(x) for x in obj.pop("bias_strength", [0.0] * len(tables)))
            return SyntheticSpec(
                tuple(obj.pop("symbols")),
                tables,
                strengths,
                concepts=tuple(obj.pop("concepts", ())),
                **obj,
            )
    except TypeError as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from exc
    raise ConfigError(f"unknown synthetic spec kind {kind!r}")
