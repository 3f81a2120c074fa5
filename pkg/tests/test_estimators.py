from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import make_lexicon
from oracles import naive_hierarchical_mean

from formmeaning import estimators as est
from formmeaning import neural
from formmeaning.errors import DataError
from formmeaning.estimators import PmiRecord, TokenPmiRecord
from formmeaning.lexicon import MACROAREAS, Alphabet
from formmeaning.models import ModelConfig, TrainedModel

LOG2_42 = 5.392317422778761


def model(seed, conditional, n_concepts=3, alphabet_hash=None, zero_out=False):
    k = n_concepts if conditional else 0
    params = neural.init_params(42, 4, 32, 1, k, rng=np.random.default_rng(seed))
    if zero_out:
        params["out.weight"][:] = 0.0
        params["out.bias"][:] = 0.0
    hash_ = alphabet_hash or make_lexicon({}).alphabet.fingerprint()
    return TrainedModel(params, ModelConfig(embedding_dim=4, conditional=conditional), hash_, n_concepts)


@pytest.fixture(scope="module")
def heldout():
    layout = {"a1": ("Africa", 3), "a2": ("Africa", 1), "e1": ("Eurasia", 2), "p1": ("Pacific", 4)}
    return make_lexicon(layout, n_concepts=3, seed=5)


def rec(area, fam, lang, doc, value, concept=0):
    return PmiRecord(doc, lang, fam, area, concept, value, 0.0, value, 3)


class TestScoring:
    def test_uniform_entropy(self, heldout):
        recs = est.score_heldout(model(0, False, zero_out=True), model(1, True, zero_out=True), heldout)
        assert len(recs) == heldout.n_words
        assert all(r.word_xent_uncond == pytest.approx(LOG2_42, abs=1e-12) for r in recs)
        h = est.estimate_entropy(recs)
        assert abs(h.value - LOG2_42) < 1e-9
        assert all(abs(v - LOG2_42) < 1e-9 for v in h.by_family.values())

    def test_identical_models_zero(self, heldout):
        m = model(3, False)
        recs = est.score_heldout(m, m, heldout)
        assert all(r.pmi == 0.0 for r in recs)
        toks = est.score_tokens(m, m, heldout)
        assert all(t.pmi_token == 0.0 for t in toks)
        h_w, h_wv = est.estimate_entropy(recs), est.estimate_entropy(recs, conditional=True)
        assert est.mutual_information(h_w, h_wv) == 0.0
        for level in ("by_macroarea", "by_family", "by_language"):
            assert getattr(h_w, level) == getattr(h_wv, level)

    def test_records_consistent(self, heldout):
        u, c = model(3, False), model(4, True)
        recs = est.score_heldout(u, c, heldout)
        toks = est.score_tokens(u, c, heldout)
        by_word: dict = {}
        for t in toks:
            by_word.setdefault((t.doculect_id, t.concept_id), []).append(t.pmi_token)
        for r in recs:
            assert r.pmi == r.word_xent_uncond - r.word_xent_cond
            assert math.isfinite(r.pmi)
            assert r.phone_count * r.pmi == pytest.approx(math.fsum(by_word[(r.doculect_id, r.concept_id)]),
                                                          abs=1e-9)
        assert all(0 <= t.symbol <= 41 for t in toks)

    def test_alphabet_mismatch(self, heldout):
        other = Alphabet(tuple("abc")).fingerprint()
        with pytest.raises(DataError):
            est.score_heldout(model(0, False, alphabet_hash=other), model(1, True, alphabet_hash=other), heldout)
        with pytest.raises(DataError):
            est.score_heldout(model(0, False), model(1, True, alphabet_hash=other), heldout)

    def test_too_many_concepts(self, heldout):
        with pytest.raises(DataError):
            est.score_heldout(model(0, False), model(1, True, n_concepts=2), heldout)


class TestHierarchicalMean:
    def test_single_word(self):
        h = est.hierarchical_mean([rec("Africa", "F", "L", "D", 0.7)])
        assert h.value == 0.7 and h.by_family == {"F": 0.7} and h.by_macroarea == {"Africa": 0.7}

    def test_family_counts_ignored(self):
        rows = [rec("Africa", "big", f"l{i}", f"d{i}", 1.0) for i in range(99)]
        rows.append(rec("Africa", "small", "x", "x", 3.0))
        assert est.hierarchical_mean(rows).value == 2.0

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        rows = []
        for i in range(300):
            area = MACROAREAS[rng.integers(4)]
            fam = f"{area}-f{rng.integers(5)}"
            lang = f"{fam}-l{rng.integers(3)}"
            doc = f"{lang}-d{rng.integers(2)}"
            rows.append((area, fam, lang, doc, float(rng.normal())))
        recs = [rec(*r) for r in rows]
        assert est.hierarchical_mean(recs).value == pytest.approx(naive_hierarchical_mean(rows), abs=1e-12)
        w = est.hierarchy_weights(recs)
        assert math.fsum(w) == pytest.approx(1.0, abs=1e-12)
        assert float(w @ [r[4] for r in rows]) == pytest.approx(naive_hierarchical_mean(rows), abs=1e-12)

    def test_duplicate_family_records(self):
        rng = np.random.default_rng(1)
        recs = [rec(MACROAREAS[i % 4], f"f{i % 6}", f"l{i % 9}", f"d{i % 13}", float(rng.normal()))
                for i in range(120)]
        base = est.hierarchical_mean(recs).value
        dup = recs + [r for r in recs if r.family == "f2"]
        assert abs(est.hierarchical_mean(dup).value - base) < 1e-12

    def test_duplicate_language_with_same_mean(self):
        recs = [rec("Africa", "F", "L1", "L1", v) for v in (0.1, 0.5)]
        recs += [rec("Africa", "F", "L2", "L2", v) for v in (0.3, 0.3)]
        recs += [rec("Eurasia", "G", "L3", "L3", 1.0)]
        base = est.hierarchical_mean(recs).value
        clone = [replace(r, language="L2b", doculect_id="L2b") for r in recs if r.language == "L2"]
        assert abs(est.hierarchical_mean(recs + clone).value - base) < 1e-12

    def test_doculects_averaged_inside_language(self):
        recs = [rec("Africa", "F", "iso", "d1", 1.0), rec("Africa", "F", "iso", "d1", 1.0),
                rec("Africa", "F", "iso", "d2", 4.0)]
        assert est.hierarchical_mean(recs).by_language == {"iso": 2.5}

    def test_empty(self):
        with pytest.raises(DataError):
            est.hierarchical_mean([])


class TestMiAndU:
    def test_mismatched_heldout(self):
        a = est.hierarchical_mean([rec("Africa", "F", "L", "D", 1.0)], "word_xent_uncond")
        b = est.hierarchical_mean([rec("Africa", "F", "L", "E", 1.0)], "word_xent_cond")
        with pytest.raises(DataError):
            est.mutual_information(a, b)

    def test_uncertainty_coefficient(self):
        assert est.uncertainty_coefficient(0.012, 3.857) == pytest.approx(0.003111, abs=1e-6)
        assert est.uncertainty_coefficient(0.0, 3.857) == 0.0
        with pytest.raises(DataError):
            est.uncertainty_coefficient(0.01, 0.0)

    def test_negative_mi_reported(self):
        recs = [PmiRecord("d", "d", "f", "Africa", 0, 2.0, 2.5, -0.5, 4)]
        h_w, h_wv = est.estimate_entropy(recs), est.estimate_entropy(recs, True)
        assert est.mutual_information(h_w, h_wv) == -0.5


def test_csv_round_trip(tmp_path, heldout):
    u, c = model(3, False), model(4, True)
    recs = est.score_heldout(u, c, heldout)
    toks = est.score_tokens(u, c, heldout)
    est.write_records(tmp_path / "p.csv", recs, PmiRecord)
    est.write_records(tmp_path / "t.csv", toks, TokenPmiRecord)
    assert est.read_records(tmp_path / "p.csv", PmiRecord) == recs
    assert est.read_records(tmp_path / "t.csv", TokenPmiRecord) == toks
    raw = (tmp_path / "p.csv").read_bytes()
    assert raw.startswith(b"doculect_id,language,family,macroarea,concept_id,word_xent_uncond,")
    assert b"\r\n" in raw
