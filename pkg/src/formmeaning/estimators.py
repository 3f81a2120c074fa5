"""Entropy, mutual information and pointwise MI from held-out log-probabilities.

Per-word cross-entropies are normalised per phone (eos included) and then
averaged up the hierarchy doculect -> language -> family -> macroarea, so that
every macroarea counts equally and, inside it, every family counts equally.
"""

from __future__ import annotations

import csv
import hashlib
import math
from collections import defaultdict
from collections.abc import Callable, Iterable, Sequence
from dataclasses import astuple, dataclass, field, fields

import numpy as np

from .errors import DataError
from .lexicon import Lexicon
from .models import TrainedModel, encode, token_logprobs


@dataclass(frozen=True)
class PmiRecord:
    doculect_id: str
    language: str
    family: str
    macroarea: str
    concept_id: int
    word_xent_uncond: float
    word_xent_cond: float
    pmi: float
    phone_count: int


@dataclass(frozen=True)
class TokenPmiRecord:
    doculect_id: str
    language: str
    family: str
    macroarea: str
    concept_id: int
    position: int
    symbol: int
    pmi_token: float


@dataclass(frozen=True)
class EntropyEstimate:
    value: float
    n_words: int
    heldout_key: str
    by_macroarea: dict[str, float] = field(default_factory=dict)
    by_family: dict[str, float] = field(default_factory=dict)
    by_language: dict[str, float] = field(default_factory=dict)


def _check_pair(uncond: TrainedModel, cond: TrainedModel, heldout: Lexicon) -> None:
    if uncond.alphabet_hash != cond.alphabet_hash:
        raise DataError("models were trained on different alphabets")
    if uncond.alphabet_hash != heldout.alphabet.fingerprint():
        raise DataError("held-out data uses a different alphabet than the models")
    if cond.conditional and heldout.n_concepts > cond.n_concepts:
        raise DataError("held-out data has more concepts than the conditional model")


def _pair_logprobs(uncond: TrainedModel, cond: TrainedModel, heldout: Lexicon):
    _check_pair(uncond, cond, heldout)
    words = encode(heldout)
    lp_u = token_logprobs(uncond, words, use_concept=False)
    lp_c = token_logprobs(cond, words, use_concept=cond.conditional)
    return words, lp_u, lp_c


def score_heldout(uncond: TrainedModel, cond: TrainedModel, heldout: Lexicon) -> list[PmiRecord]:
    """One record per held-out word, cross-entropies in bits per phone."""
    words, lp_u, lp_c = _pair_logprobs(uncond, cond, heldout)
    xu = -lp_u.sum(axis=1) / words.lengths
    xc = -lp_c.sum(axis=1) / words.lengths
    out = []
    for i, (d, e) in enumerate(zip(words.doculects, words.entries)):
        u, c = float(xu[i]), float(xc[i])
        out.append(
            PmiRecord(d.doculect_id, d.language, d.family, d.macroarea, e.concept_id, u, c, u - c, e.n_phones)
        )
    return out


def score_tokens(uncond: TrainedModel, cond: TrainedModel, heldout: Lexicon) -> list[TokenPmiRecord]:
    """One record per (word, position) with un-normalised token PMI in bits."""
    words, lp_u, lp_c = _pair_logprobs(uncond, cond, heldout)
    diff = lp_c - lp_u
    out = []
    for i, (d, e) in enumerate(zip(words.doculects, words.entries)):
        for t, s in enumerate(e.phones):
            out.append(
                TokenPmiRecord(
                    d.doculect_id, d.language, d.family, d.macroarea, e.concept_id, t, s, float(diff[i, t])
                )
            )
    return out


def heldout_key(records: Iterable) -> str:
    """Fingerprint of the (doculect, concept[, position]) units in ``records``."""
    units = sorted(
        (r.doculect_id, r.concept_id, getattr(r, "position", -1)) for r in records
    )
    return hashlib.sha256(repr(units).encode("utf-8")).hexdigest()[:16]


def _tree(records: Sequence):
    tree: dict = defaultdict(lambda: defaultdict(lambda: defaultdict(lambda: defaultdict(list))))
    for i, r in enumerate(records):
        tree[r.macroarea][r.family][r.language][r.doculect_id].append(i)
    return tree


def hierarchical_mean(
    records: Sequence, value: Callable[[object], float] | str = "pmi"
) -> EntropyEstimate:
    """Average word values per doculect, language, family, macroarea, then overall.

    ``value`` is an attribute name or a function of a record. Each level is
    an unweighted mean of the level below, iterated in sorted key order.
    """
    get = (lambda r: getattr(r, value)) if isinstance(value, str) else value
    records = list(records)
    if not records:
        raise DataError("hierarchical_mean needs at least one record")
    vals = np.array([get(r) for r in records], dtype=float)
    tree = _tree(records)
    by_area, by_family, by_language = {}, {}, {}
    for area in sorted(tree):
        fam_means = []
        for fam in sorted(tree[area]):
            lang_means = []
            for lang in sorted(tree[area][fam]):
                doc_means = [
                    math.fsum(vals[i] for i in idx) / len(idx)
                    for _, idx in sorted(tree[area][fam][lang].items())
                ]
                lang_means.append(math.fsum(doc_means) / len(doc_means))
                by_language[lang] = lang_means[-1]
            fam_means.append(math.fsum(lang_means) / len(lang_means))
            by_family[fam] = fam_means[-1]
        by_area[area] = math.fsum(fam_means) / len(fam_means)
    total = math.fsum(by_area.values()) / len(by_area)
    return EntropyEstimate(total, len(records), heldout_key(records), by_area, by_family, by_language)


def hierarchy_weights(records: Sequence) -> np.ndarray:
    """Per-record weights w with ``sum(w * v) == hierarchical_mean(v)`` (up to rounding)."""
    records = list(records)
    w = np.zeros(len(records))
    tree = _tree(records)
    n_area = len(tree)
    for area, fams in tree.items():
        for fam, langs in fams.items():
            for lang, docs in langs.items():
                for doc, idx in docs.items():
                    w[idx] = 1.0 / (n_area * len(fams) * len(langs) * len(docs) * len(idx))
    return w


def mutual_information(h_w: EntropyEstimate, h_wv: EntropyEstimate) -> float:
    """Difference of the two cross-entropy estimates; may be negative."""
    if h_w.heldout_key != h_wv.heldout_key:
        raise DataError("entropy estimates come from different held-out sets")
    return h_w.value - h_wv.value


def uncertainty_coefficient(mi: float, h_w: float) -> float:
    if not h_w > 0:
        raise DataError(f"uncertainty coefficient needs H(W) > 0, got {h_w}")
    return mi / h_w


def estimate_entropy(records: Sequence[PmiRecord], conditional: bool = False) -> EntropyEstimate:
    return hierarchical_mean(records, "word_xent_cond" if conditional else "word_xent_uncond")


def write_records(path, records: Sequence, record_type: type) -> None:
    names = [f.name for f in fields(record_type)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(names)
        for r in records:
            writer.writerow([repr(x) if isinstance(x, float) else x for x in astuple(r)])


def read_records(path, record_type: type) -> list:
    types = {f.name: f.type for f in fields(record_type)}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kwargs = {}
            for name, raw in row.items():
                t = types[name]
                kwargs[name] = float(raw) if t == "float" else int(raw) if t == "int" else raw
            out.append(record_type(**kwargs))
    return out
