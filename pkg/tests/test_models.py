from __future__ import annotations

import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from conftest import make_lexicon

from formmeaning import models, neural
from formmeaning.errors import ConfigError, DataError, NumericError, TrainingDivergence
from formmeaning.lexicon import ASJP_SYMBOLS, Alphabet, WordEntry, family_weights
from formmeaning.models import ModelConfig, TrainedModel
from formmeaning.synthetic import generate, random_spec

LOG2_42 = math.log2(42)
FAST = ModelConfig(embedding_dim=4, hidden_dim=32, max_epochs=6, patience=2, lr=0.01, batch_size=16)


@pytest.fixture(scope="module")
def tiny():
    spec = random_spec(4, 3, stop=0.4, planted={0: 2.0}, seed=1, n_families=8, languages_per_family=3)
    lex = generate(spec, seed=0)
    ids = [d.doculect_id for d in lex.doculects]
    return lex.subset(ids[:16]), lex.subset(ids[16:])


def uniform_model(n_concepts=0):
    params = neural.init_params(42, 4, 32, 1, n_concepts, rng=np.random.default_rng(0))
    params["out.weight"][:] = 0.0
    params["out.bias"][:] = 0.0
    config = ModelConfig(embedding_dim=4, conditional=n_concepts > 0)
    return TrainedModel(params, config, Alphabet(ASJP_SYMBOLS).fingerprint(), n_concepts)


class TestConfig:
    @pytest.mark.parametrize(
        "field,value",
        [("embedding_dim", 3), ("hidden_dim", 2000), ("layers", 5), ("dropout", 0.6), ("patience", 0), ("lr", 0.0)],
    )
    def test_ranges(self, field, value):
        with pytest.raises(ConfigError):
            ModelConfig(**{field: value})

    def test_round_trip(self):
        cfg = ModelConfig(hidden_dim=64, dropout=0.25, conditional=True)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestWordLogprob:
    def test_uniform(self):
        entry = WordEntry(0, (3, 7, 38, 41))
        lp, n = models.word_logprob(uniform_model(), entry)
        assert n == 4
        assert lp == pytest.approx(-4 * LOG2_42, abs=1e-12)

    def test_chain_rule(self):
        params = neural.init_params(42, 5, 32, 2, 3, rng=np.random.default_rng(8))
        model = TrainedModel(params, ModelConfig(embedding_dim=5, layers=2, conditional=True), "x", 3)
        entry = WordEntry(2, (3, 7, 38, 41))
        total, _ = models.word_logprob(model, entry, use_concept=True)
        # feed growing prefixes and read off the last step's distribution
        history = [41]
        steps = []
        for target in entry.phones:
            hidden, _ = neural.lstm_forward(params, np.array([history]), np.array([2]))
            logp = neural.log_softmax(neural.next_phone_logits(params, hidden[:, -1]))
            steps.append(logp[0, target] * neural.LOG2E)
            history.append(target)
        assert total == pytest.approx(sum(steps), abs=1e-12)

    def test_concept_out_of_range(self):
        with pytest.raises(DataError):
            models.word_logprob(uniform_model(3), WordEntry(3, (1, 41)), use_concept=True)

    def test_use_concept_requires_conditional(self):
        with pytest.raises(DataError):
            models.word_logprob(uniform_model(), WordEntry(0, (1, 41)), use_concept=True)

    def test_logprobs_finite_nonpositive(self, tiny):
        train, val = tiny
        model = models.train(train, val, replace(FAST, max_epochs=1))
        lp = models.token_logprobs(model, models.encode(val))
        assert np.all(np.isfinite(lp)) and np.all(lp <= 0)


class TestWeightedLoss:
    def params(self):
        return neural.init_params(42, 4, 32, 1, 3, rng=np.random.default_rng(1))

    def test_family_replication_invariance(self):
        lex = make_lexicon({"A": ("Africa", 2), "B": ("Eurasia", 3)}, n_concepts=3)
        extra = [
            replace(d, doculect_id=f"{d.doculect_id}_copy{k}")
            for k in range(3)
            for d in lex.doculects
            if d.family == "A"
        ]
        bigger = replace(lex, doculects=lex.doculects + tuple(extra))
        params = self.params()
        base = models.weighted_loss(params, models.encode(lex, family_weights(lex.doculects)), True)
        rep = models.weighted_loss(params, models.encode(bigger, family_weights(bigger.doculects)), True)
        assert rep[0] == pytest.approx(base[0], rel=1e-12)
        for name in base[1]:
            np.testing.assert_allclose(rep[1][name], base[1][name], rtol=1e-9, atol=1e-14)

    def test_singletons_equal_unweighted(self):
        lex = make_lexicon({f"f{i}": ("Africa", 1) for i in range(5)}, n_concepts=2)
        words = models.encode(lex, family_weights(lex.doculects))
        assert np.all(words.weights == 1.0)
        params = self.params()
        loss, _ = models.weighted_loss(params, words, False)
        lp = neural.token_logprobs(params, words.inputs, words.targets) * words.mask
        assert loss == pytest.approx(-lp.sum(axis=1).mean(), rel=1e-13)

    def test_uniform_xent(self):
        lex = make_lexicon({"A": ("Africa", 2), "B": ("Eurasia", 1)})
        words = models.encode(lex, family_weights(lex.doculects))
        assert models.weighted_xent(uniform_model(), words, False) == pytest.approx(LOG2_42, abs=1e-12)


class TestTrain:
    def test_best_checkpoint_and_reload(self, tiny, tmp_path):
        train, val = tiny
        model = models.train(train, val, FAST, fold_id=1, seed=4)
        curve = [c["validation_xent"] for c in model.training_curve]
        assert model.validation_xent == min(curve)
        assert model.best_epoch == int(np.argmin(curve))
        val_words = models.encode(val, family_weights(val.doculects))
        assert models.weighted_xent(model, val_words, False) == pytest.approx(model.validation_xent, abs=1e-12)
        model.save(tmp_path / "m.json")
        loaded = TrainedModel.load(tmp_path / "m.json")
        assert abs(models.weighted_xent(loaded, val_words, False) - model.validation_xent) < 1e-9
        assert loaded.config == model.config and loaded.seed == 4 and loaded.fold_id == 1

    def test_deterministic(self, tiny):
        train, val = tiny
        a = models.train(train, val, replace(FAST, dropout=0.2, conditional=True), seed=2)
        b = models.train(train, val, replace(FAST, dropout=0.2, conditional=True), seed=2)
        assert a.training_curve == b.training_curve
        for name in a.params.names():
            assert np.array_equal(a.params[name], b.params[name])

    def test_patience_stops_early(self, tiny):
        train, val = tiny
        model = models.train(train, val, replace(FAST, lr=0.3, max_epochs=40, patience=1))
        assert len(model.training_curve) < 40

    def test_empty_split(self, tiny):
        train, val = tiny
        with pytest.raises(DataError):
            models.train(train, val.subset([]), FAST)

    def test_divergence(self, tiny, monkeypatch):
        train, val = tiny
        real = neural.loss_and_grads
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            loss, grads = real(*args, **kwargs)
            return (math.nan if calls["n"] == 3 else loss), grads

        monkeypatch.setattr(neural, "loss_and_grads", flaky)
        with pytest.raises(TrainingDivergence) as err:
            models.train(train, val, FAST)
        assert len(err.value.trajectory) == 3 and math.isnan(err.value.trajectory[-1])
        assert isinstance(err.value, NumericError)


class TestShuffle:
    def test_histogram_and_determinism(self, tiny):
        lex, _ = tiny
        a = models.shuffle_concept_ids(lex, 3)
        b = models.shuffle_concept_ids(lex, 3)
        ids = [e.concept_id for d in lex.doculects for e in d.entries]
        got = [e.concept_id for d in a.doculects for e in d.entries]
        assert Counter(ids) == Counter(got)
        assert got == [e.concept_id for d in b.doculects for e in d.entries]
        assert got != ids
        assert [e.phones for d in a.doculects for e in d.entries] == [e.phones for d in lex.doculects for e in d.entries]


class TestEnsemble:
    def test_pairs_and_failures(self, tiny, monkeypatch):
        train, val = tiny
        cfg = replace(FAST, max_epochs=1)
        pairs, failures = models.train_seed_ensemble(train, val, cfg, n_seeds=1)
        assert len(pairs) == 1 and not failures
        assert not pairs[0].unconditional.conditional and pairs[0].conditional.conditional

        real = models.train

        def failing(train_lex, val_lex, config, fold_id=0, seed=0):
            if seed == 1:
                raise TrainingDivergence("boom", [1.0])
            return real(train_lex, val_lex, config, fold_id, seed)

        monkeypatch.setattr(models, "train", failing)
        pairs, failures = models.train_seed_ensemble(train, val, cfg, n_seeds=3)
        assert [p.seed for p in pairs] == [0, 2]
        assert failures[0][0] == 1 and "boom" in failures[0][1]

    def test_rerun_identical(self, tiny):
        train, val = tiny
        cfg = replace(FAST, max_epochs=2)
        a, _ = models.train_seed_ensemble(train, val, cfg, n_seeds=2)
        b, _ = models.train_seed_ensemble(train, val, cfg, n_seeds=2)
        assert [p.conditional.validation_xent for p in a] == [p.conditional.validation_xent for p in b]
        assert models.select_best(a).seed in (0, 1)

    def test_n_seeds_positive(self, tiny):
        with pytest.raises(ConfigError):
            models.train_seed_ensemble(*tiny, FAST, n_seeds=0)
