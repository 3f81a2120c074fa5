"""Phone-level language models p(w) and p(w | concept) and their training."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np
from threadpoolctl import threadpool_limits

from . import neural
from .errors import ConfigError, DataError, TrainingDivergence
from .lexicon import Doculect, Lexicon, WordEntry, family_weights
from .rng import make_rng

log = logging.getLogger(__name__)

RANGES = {
    "embedding_dim": (4, 1024),
    "hidden_dim": (32, 1024),
    "layers": (1, 4),
    "dropout": (0.0, 0.5),
}


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 16
    hidden_dim: int = 32
    layers: int = 1
    dropout: float = 0.0
    conditional: bool = False
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name, (lo, hi) in RANGES.items():
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ConfigError(f"{name}={value} outside [{lo}, {hi}]")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("patience, batch_size and max_epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> ModelConfig:
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class EncodedWords:
    """Padded batch view of a word list.

    ``inputs`` starts with eos (used as the begin marker) and ``targets`` is
    the word followed by eos; ``lengths`` counts prediction steps.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    concepts: np.ndarray
    weights: np.ndarray
    doculects: list[Doculect]
    entries: list[WordEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def take(self, index: np.ndarray) -> EncodedWords:
        width = int(self.lengths[index].max())
        return EncodedWords(
            self.inputs[index, :width],
            self.targets[index, :width],
            self.mask[index, :width],
            self.lengths[index],
            self.concepts[index],
            self.weights[index],
            [self.doculects[i] for i in index],
            [self.entries[i] for i in index],
        )


def encode(lex: Lexicon, weights: Mapping[str, float | Fraction] | None = None) -> EncodedWords:
    """Flatten ``lex`` into padded arrays; ``weights`` maps doculect id to word weight."""
    pairs = [(d, e) for d in lex.doculects for e in d.entries]
    eos = lex.alphabet.eos
    width = max((len(e.phones) for _, e in pairs), default=1)
    n = len(pairs)
    inputs = np.full((n, width), eos, dtype=np.int64)
    targets = np.full((n, width), eos, dtype=np.int64)
    mask = np.zeros((n, width))
    lengths = np.zeros(n, dtype=np.int64)
    for i, (_, e) in enumerate(pairs):
        k = len(e.phones)
        targets[i, :k] = e.phones
        inputs[i, 1:k] = e.phones[:-1]
        mask[i, :k] = 1.0
        lengths[i] = k
    return EncodedWords(
        inputs,
        targets,
        mask,
        lengths,
        np.array([e.concept_id for _, e in pairs], dtype=np.int64),
        np.array([float(weights[d.doculect_id]) if weights else 1.0 for d, _ in pairs]),
        [d for d, _ in pairs],
        [e for _, e in pairs],
    )


@dataclass
class TrainedModel:
    params: neural.LstmParams
    config: ModelConfig
    alphabet_hash: str
    n_concepts: int
    fold_id: int = 0
    seed: int = 0
    validation_xent: float = math.inf
    train_xent: float = math.nan
    best_epoch: int = -1
    training_curve: list[dict] = field(default_factory=list)

    @property
    def conditional(self) -> bool:
        return self.config.conditional

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "alphabet_hash": self.alphabet_hash,
            "n_concepts": self.n_concepts,
            "fold_id": self.fold_id,
            "seed": self.seed,
            "validation_xent": self.validation_xent,
            "train_xent": self.train_xent,
            "best_epoch": self.best_epoch,
            "training_curve": self.training_curve,
        }

    def save(self, path) -> None:
        neural.save_checkpoint(
            path, self.params, alphabet_hash=self.alphabet_hash, extra=self.manifest()
        )

    @classmethod
    def load(cls, path) -> TrainedModel:
        params, doc = neural.load_checkpoint(path)
        m = doc["extra"]
        return cls(
            params,
            ModelConfig.from_dict(m["config"]),
            doc["alphabet_hash"],
            m["n_concepts"],
            m["fold_id"],
            m["seed"],
            m["validation_xent"],
            m["train_xent"],
            m["best_epoch"],
            m["training_curve"],
        )


def token_logprobs(model: TrainedModel, words: EncodedWords, use_concept: bool | None = None) -> np.ndarray:
    """log2 probability of each target position, zero on padding."""
    use_concept = model.conditional if use_concept is None else use_concept
    if use_concept and not model.conditional:
        raise DataError("use_concept requires a conditional model")
    if use_concept and len(words) and words.concepts.max() >= model.n_concepts:
        raise DataError(f"concept id >= K={model.n_concepts}")
    if len(words) == 0:
        return np.zeros((0, words.inputs.shape[1]))
    with threadpool_limits(1):
        lp = neural.token_logprobs(
            model.params, words.inputs, words.targets, words.concepts if use_concept else None
        )
    return lp * words.mask


def word_logprob(model: TrainedModel, entry: WordEntry, use_concept: bool | None = None) -> tuple[float, int]:
    """Return (log2 p(word [| concept]), number of prediction steps incl. eos)."""
    if not entry.phones or entry.phones[-1] != model.params.n_classes - 1:
        raise DataError("entry must be eos-terminated and encoded with the model's alphabet")
    k = len(entry.phones)
    inputs = np.array([[model.params.n_classes - 1, *entry.phones[:-1]]])
    targets = np.array([entry.phones])
    words = EncodedWords(
        inputs, targets, np.ones((1, k)), np.array([k]), np.array([entry.concept_id]),
        np.ones(1), [], [entry],
    )
    return float(token_logprobs(model, words, use_concept).sum()), k


def weighted_xent(model_or_params, words: EncodedWords, conditional: bool) -> float:
    """Family-weighted cross-entropy in bits per phone."""
    params = model_or_params.params if isinstance(model_or_params, TrainedModel) else model_or_params
    with threadpool_limits(1):
        lp = neural.token_logprobs(
            params, words.inputs, words.targets, words.concepts if conditional else None
        )
    nll = -(lp * words.mask).sum(axis=1)
    return float((words.weights * nll).sum() / (words.weights * words.lengths).sum())


def weighted_loss(params: neural.LstmParams, words: EncodedWords, conditional: bool) -> tuple[float, dict]:
    """Full-data training objective: weighted mean word negative log2-likelihood.

    Each word counts with its doculect's inverse family size and the sum is
    renormalised by the total weight.
    """
    token_w = words.mask * (words.weights / words.weights.sum())[:, None]
    return neural.loss_and_grads(
        params, words.inputs, words.targets, token_w, words.concepts if conditional else None
    )


def shuffle_concept_ids(lex: Lexicon, seed: int) -> Lexicon:
    """Permute concept labels across every entry of ``lex``.

    The histogram of concept ids is preserved; the pairing with forms is not.
    """
    slots = [(i, j) for i, d in enumerate(lex.doculects) for j in range(len(d.entries))]
    ids = np.array([lex.doculects[i].entries[j].concept_id for i, j in slots], dtype=np.int64)
    shuffled = ids[make_rng("shuffle-concepts", seed).permutation(len(ids))]
    doculects = [list(d.entries) for d in lex.doculects]
    for (i, j), cid in zip(slots, shuffled):
        doculects[i][j] = replace(doculects[i][j], concept_id=int(cid))
    return replace(
        lex,
        doculects=tuple(replace(d, entries=tuple(es)) for d, es in zip(lex.doculects, doculects)),
    )


def train(
    train_lex: Lexicon,
    val_lex: Lexicon,
    config: ModelConfig,
    fold_id: int = 0,
    seed: int = 0,
) -> TrainedModel:
    """Fit one model with AdamW and early stopping on validation cross-entropy.

    Returns the parameters from the epoch with the lowest weighted validation
    cross-entropy. Conditional and unconditioned models trained with the same
    ``(fold_id, seed)`` share initial values, batch order and dropout masks.
    """
    if not train_lex.doculects or not val_lex.doculects:
        raise DataError("train and validation sets must be non-empty")
    with threadpool_limits(1):
        return _train(train_lex, val_lex, config, fold_id, seed)


def _train(train_lex, val_lex, config, fold_id, seed) -> TrainedModel:
    k = train_lex.n_concepts if config.conditional else 0
    n_classes = train_lex.alphabet.n_classes
    params = neural.init_params(
        n_classes,
        config.embedding_dim,
        config.hidden_dim,
        config.layers,
        k,
        rng=make_rng("init", fold_id, seed),
        concept_rng=make_rng("init-concepts", fold_id, seed),
    )
    train_words = encode(train_lex, family_weights(train_lex.doculects))
    val_words = encode(val_lex, family_weights(val_lex.doculects))
    order_rng = make_rng("batches", fold_id, seed)
    drop_rng = make_rng("dropout", fold_id, seed)
    opt = neural.AdamW(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    model = TrainedModel(
        params.copy(), config, train_lex.alphabet.fingerprint(), train_lex.n_concepts, fold_id, seed
    )
    n = len(train_words)
    losses: list[float] = []
    stale = 0
    for epoch in range(config.max_epochs):
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = train_words.take(perm[start : start + config.batch_size])
            token_w = batch.mask * (batch.weights / batch.weights.sum())[:, None]
            loss, grads = neural.loss_and_grads(
                params,
                batch.inputs,
                batch.targets,
                token_w,
                batch.concepts if config.conditional else None,
                dropout_rate=config.dropout,
                rng=drop_rng,
                training=True,
            )
            losses.append(loss)
            if not math.isfinite(loss):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch} (fold {fold_id}, seed {seed}); "
                    f"last losses {losses[-5:]}",
                    losses,
                )
            opt.step(params, grads)
            epoch_loss += loss * len(batch)
        val = weighted_xent(params, val_words, config.conditional)
        if not math.isfinite(val):
            raise TrainingDivergence(f"non-finite validation cross-entropy at epoch {epoch}", losses)
        model.training_curve.append(
            {"epoch": epoch, "train_loss": epoch_loss / n, "validation_xent": val}
        )
        if val < model.validation_xent:
            model.validation_xent = val
            model.best_epoch = epoch
            model.params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.train_xent = weighted_xent(model.params, train_words, config.conditional)
    log.debug(
        "fold %d seed %d conditional=%s: best epoch %d, val %.4f",
        fold_id, seed, config.conditional, model.best_epoch, model.validation_xent,
    )
    return model


@dataclass
class SeedPair:
    seed: int
    unconditional: TrainedModel
    conditional: TrainedModel


def _train_pair(args) -> SeedPair:
    train_lex, val_lex, config, fold_id, seed = args
    uncond = train(train_lex, val_lex, replace(config, conditional=False), fold_id, seed)
    cond = train(train_lex, val_lex, replace(config, conditional=True), fold_id, seed)
    return SeedPair(seed, uncond, cond)


def train_seed_ensemble(
    train_lex: Lexicon,
    val_lex: Lexicon,
    config: ModelConfig,
    fold_id: int = 0,
    n_seeds: int = 25,
    workers: int = 1,
) -> tuple[list[SeedPair], list[tuple[int, str]]]:
    """Train (unconditioned, conditional) pairs for seeds ``0..n_seeds-1``.

    A failing seed is logged and reported in the second return value; the
    remaining seeds still run. Results do not depend on ``workers``.
    """
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    jobs = [(train_lex, val_lex, config, fold_id, s) for s in range(n_seeds)]
    pairs: list[SeedPair] = []
    failures: list[tuple[int, str]] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_train_pair, job) for job in jobs]
            outcomes = []
            for seed, fut in enumerate(futures):
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - reported per seed
                    outcomes.append(exc)
    else:
        outcomes = []
        for job in jobs:
            try:
                outcomes.append(_train_pair(job))
            except Exception as exc:  # noqa: BLE001 - reported per seed
                outcomes.append(exc)
    for seed, outcome in enumerate(outcomes):
        if isinstance(outcome, Exception):
            log.error("fold %d seed %d failed: %s", fold_id, seed, outcome)
            failures.append((seed, f"{type(outcome).__name__}: {outcome}"))
        else:
            pairs.append(outcome)
    return pairs, failures


def select_best(pairs: list[SeedPair]) -> SeedPair:
    """Single-model mode: the pair whose unconditioned model validates best.

    Ties go to the lower seed.
    """
    if not pairs:
        raise DataError("no trained pairs to select from")
    return min(pairs, key=lambda p: (p.unconditional.validation_xent, p.seed))
