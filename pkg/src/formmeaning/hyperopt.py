"""Gaussian-process Bayesian optimisation of model hyperparameters.

Points live in the unit cube; :class:`SearchSpace` maps them to configs.
The GP uses a Matern-5/2 kernel with hyperparameters picked by grid search
on the log marginal likelihood, and expected improvement is maximised over
random candidates.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .errors import ConfigError, FormMeaningError
from .lexicon import Lexicon
from .models import ModelConfig, train
from .rng import make_rng

log = logging.getLogger(__name__)

JITTER = 1e-6
N_CANDIDATES = 10_000
LENGTHSCALES = (0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.5)
NOISE_LEVELS = (JITTER, 1e-4, 1e-2)


@dataclass(frozen=True)
class SearchSpace:
    embedding_dim: tuple[int, int] = (4, 1024)
    hidden_dim: tuple[int, int] = (32, 1024)
    layers: tuple[int, int] = (1, 4)
    dropout: tuple[float, float] = (0.0, 0.5)

    dims = 4

    def to_config(self, u: np.ndarray, base: ModelConfig | None = None) -> ModelConfig:
        """Map a point of [0,1]^4 to a config (log-uniform sizes, uniform layers/dropout)."""
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)

        def log_int(lo, hi, x):
            return int(min(hi, max(lo, round(math.exp(math.log(lo) + x * (math.log(hi) - math.log(lo)))))))

        lo, hi = self.layers
        layers = min(hi, lo + int(u[2] * (hi - lo + 1)))
        d_lo, d_hi = self.dropout
        return replace(
            base or ModelConfig(),
            embedding_dim=log_int(*self.embedding_dim, u[0]),
            hidden_dim=log_int(*self.hidden_dim, u[1]),
            layers=layers,
            dropout=d_lo + u[3] * (d_hi - d_lo),
        )


@dataclass
class TrialHistory:
    points: list[list[float]] = field(default_factory=list)
    values: list[float | None] = field(default_factory=list)

    def add(self, point, value: float | None) -> None:
        point = [float(x) for x in point]
        for p in self.points:
            if max(abs(a - b) for a, b in zip(p, point)) <= 1e-9:
                raise ValueError("duplicate trial point")
        if value is not None and not math.isfinite(value):
            value = None
        self.points.append(point)
        self.values.append(value)

    def observed(self) -> tuple[np.ndarray, np.ndarray]:
        keep = [i for i, v in enumerate(self.values) if v is not None]
        dims = len(self.points[0]) if self.points else 0
        x = np.array([self.points[i] for i in keep], dtype=float).reshape(len(keep), dims)
        return x, np.array([self.values[i] for i in keep])

    def __len__(self) -> int:
        return len(self.points)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"point": p, "value": v}) + "\n" for p, v in zip(self.points, self.values)
        )

    @classmethod
    def from_jsonl(cls, text: str) -> TrialHistory:
        h = cls()
        for line in text.splitlines():
            if line.strip():
                obj = json.loads(line)
                h.add(obj["point"], obj["value"])
        return h


def matern52(a: np.ndarray, b: np.ndarray, lengthscale: float) -> np.ndarray:
    d = np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0.0)) / lengthscale
    s5 = math.sqrt(5.0) * d
    return (1.0 + s5 + 5.0 / 3.0 * d * d) * np.exp(-s5)


@dataclass
class GaussianProcess:
    """Zero-mean GP on standardised targets."""

    x: np.ndarray
    y: np.ndarray
    lengthscale: float
    noise: float
    y_mean: float
    y_std: float
    chol: tuple
    alpha: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray) -> GaussianProcess:
        y_mean, y_std = float(y.mean()), float(y.std())
        if not y_std > 1e-12:
            raise np.linalg.LinAlgError("observations have zero variance")
        z = (y - y_mean) / y_std
        best = None
        for ls in LENGTHSCALES:
            k = matern52(x, x, ls)
            for noise in NOISE_LEVELS:
                try:
                    chol = cho_factor(k + noise * np.eye(len(x)), lower=True)
                except np.linalg.LinAlgError:
                    continue
                alpha = cho_solve(chol, z)
                lml = -0.5 * z @ alpha - np.log(np.diag(chol[0])).sum()
                if best is None or lml > best[0]:
                    best = (lml, ls, noise, chol, alpha)
        if best is None:
            raise np.linalg.LinAlgError("no kernel setting gave a positive definite matrix")
        _, ls, noise, chol, alpha = best
        return cls(x, y, ls, noise, y_mean, y_std, chol, alpha)

    def predict(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ks = matern52(xs, self.x, self.lengthscale)
        mean = ks @ self.alpha
        v = cho_solve(self.chol, ks.T)
        var = np.maximum(1.0 - (ks * v.T).sum(axis=1), 1e-12)
        return self.y_mean + self.y_std * mean, self.y_std * np.sqrt(var)


def expected_improvement(mean: np.ndarray, std: np.ndarray, best: float) -> np.ndarray:
    """EI for minimisation."""
    z = (best - mean) / std
    return (best - mean) * norm.cdf(z) + std * norm.pdf(z)


def _space_filling(history: TrialHistory, rng: np.random.Generator, dims: int) -> np.ndarray:
    cands = rng.random((256, dims))
    if not len(history):
        return cands[0]
    pts = np.array(history.points)
    dist = np.sqrt(((cands[:, None, :] - pts[None]) ** 2).sum(-1)).min(axis=1)
    return cands[int(np.argmax(dist))]


def suggest_point(history: TrialHistory, rng: np.random.Generator, dims: int = SearchSpace.dims) -> np.ndarray:
    """Next point in [0,1]^dims: maximin-random for the first ``max(5, dims+1)`` trials, then EI."""
    n_init = max(5, dims + 1)
    if len(history) < n_init:
        return _space_filling(history, rng, dims)
    x, y = history.observed()
    try:
        gp = GaussianProcess.fit(x, y)
        cands = rng.random((N_CANDIDATES, dims))
        mean, std = gp.predict(cands)
        ei = expected_improvement(mean, std, float(y.min()))
        if not np.all(np.isfinite(ei)) or ei.max() <= 0.0:
            raise np.linalg.LinAlgError("expected improvement is degenerate")
        return cands[int(np.argmax(ei))]
    except np.linalg.LinAlgError as exc:
        warnings.warn(f"GP suggestion failed ({exc}); falling back to a random point", RuntimeWarning)
        return _space_filling(history, rng, dims)


def suggest(
    history: TrialHistory,
    rng: np.random.Generator,
    space: SearchSpace | None = None,
    base: ModelConfig | None = None,
) -> tuple[np.ndarray, ModelConfig]:
    space = space or SearchSpace()
    point = suggest_point(history, rng, space.dims)
    return point, space.to_config(point, base)


def minimize(
    objective: Callable[[np.ndarray], float | None],
    budget: int,
    seed: int = 0,
    dims: int = SearchSpace.dims,
    history: TrialHistory | None = None,
) -> TrialHistory:
    """Generic BO loop over [0,1]^dims; ``objective`` may return None for a failed trial."""
    history = history or TrialHistory()
    while len(history) < budget:
        # per-trial streams keep a resumed search identical to an uninterrupted one
        point = suggest_point(history, make_rng("hyperopt", seed, len(history)), dims)
        try:
            value = objective(point)
        except Exception as exc:  # noqa: BLE001 - failed trials are recorded as missing
            log.warning("trial %d failed: %s", len(history), exc)
            value = None
        history.add(point, value)
    return history


def run_search(
    train_lex: Lexicon,
    val_lex: Lexicon,
    budget: int,
    seeds_per_config: int = 25,
    *,
    fold_id: int = 0,
    seed: int = 0,
    space: SearchSpace | None = None,
    base: ModelConfig | None = None,
    conditional: bool = False,
    history: TrialHistory | None = None,
) -> tuple[ModelConfig, TrialHistory]:
    """Search configs; each trial scores the best validation xent over its seeds."""
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    space = space or SearchSpace()
    base = replace(base or ModelConfig(), conditional=conditional)

    def objective(point):
        config = space.to_config(point, base)
        best = None
        for s in range(seeds_per_config):
            try:
                xent = train(train_lex, val_lex, config, fold_id, s).validation_xent
            except FormMeaningError as exc:
                log.warning("seed %d failed: %s", s, exc)
                continue
            best = xent if best is None else min(best, xent)
        return best

    history = minimize(objective, budget, seed, space.dims, history)
    x, y = history.observed()
    if len(y) == 0:
        raise ConfigError("every hyperparameter trial failed")
    return space.to_config(x[int(np.argmin(y))], base), history
