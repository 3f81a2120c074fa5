"""Numerical kernel: a multi-layer LSTM language model with exact gradients.

Everything is float64 numpy. Sequences are processed in padded batches of
shape ``(batch, time)``; padding is handled by zero loss weights, so the
recurrence itself never needs masking.

Gate layout in the stacked weight matrices is ``[input, forget, cell, output]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

LOG2E = 1.0 / math.log(2.0)
CHECKPOINT_FORMAT = "formmeaning-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LstmParams:
    """Named parameter arrays plus the dimensions they were built with.

    Names: ``embedding`` (classes x emb), ``lstm{l}.w_in`` (in x 4H),
    ``lstm{l}.w_rec`` (H x 4H), ``lstm{l}.bias`` (4H), ``out.weight``
    (classes x H), ``out.bias`` (classes) and, for conditional models,
    ``init_proj`` (H x K).
    """

    n_classes: int
    embedding_dim: int
    hidden_dim: int
    layers: int
    n_concepts: int = 0
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def conditional(self) -> bool:
        return self.n_concepts > 0

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> LstmParams:
        return LstmParams(
            self.n_classes,
            self.embedding_dim,
            self.hidden_dim,
            self.layers,
            self.n_concepts,
            {k: v.copy() for k, v in self.arrays.items()},
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = value


def init_params(
    n_classes: int,
    embedding_dim: int,
    hidden_dim: int,
    layers: int,
    n_concepts: int = 0,
    rng: np.random.Generator | None = None,
    concept_rng: np.random.Generator | None = None,
) -> LstmParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) init, standard normal embeddings.

    The concept projection draws from ``concept_rng`` (falling back to
    ``rng``) so that conditional and unconditioned models built from the same
    ``rng`` seed share every other initial value.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    bound = 1.0 / math.sqrt(hidden_dim)
    p = LstmParams(n_classes, embedding_dim, hidden_dim, layers, n_concepts)
    p["embedding"] = rng.standard_normal((n_classes, embedding_dim))
    for layer in range(layers):
        in_dim = embedding_dim if layer == 0 else hidden_dim
        p[f"lstm{layer}.w_in"] = rng.uniform(-bound, bound, (in_dim, 4 * hidden_dim))
        p[f"lstm{layer}.w_rec"] = rng.uniform(-bound, bound, (hidden_dim, 4 * hidden_dim))
        p[f"lstm{layer}.bias"] = rng.uniform(-bound, bound, 4 * hidden_dim)
    p["out.weight"] = rng.uniform(-bound, bound, (n_classes, hidden_dim))
    p["out.bias"] = rng.uniform(-bound, bound, n_classes)
    if n_concepts:
        crng = concept_rng if concept_rng is not None else rng
        p["init_proj"] = crng.uniform(-bound, bound, (hidden_dim, n_concepts))
    return p


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def dropout(
    x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns the output and the scaled mask (or None)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


@dataclass
class ForwardCache:
    inputs: np.ndarray
    concepts: np.ndarray | None
    layer_inputs: list[np.ndarray]
    input_masks: list[np.ndarray | None]
    gates: list[np.ndarray]
    cells: list[np.ndarray]
    tanh_cells: list[np.ndarray]
    hiddens: list[np.ndarray]
    h0: np.ndarray | None


def lstm_forward(
    params: LstmParams,
    inputs: np.ndarray,
    concepts: np.ndarray | None = None,
    *,
    h0: np.ndarray | None = None,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the stack over ``inputs`` (batch x time ids).

    The first layer's initial hidden state is ``h0`` if given, else
    ``init_proj[:, concept]`` for conditional models with ``concepts``, else
    zero. Cell states and deeper layers always start at zero.

    Returns top-layer hidden states (batch x time x H) and the cache.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    if inputs.size and (inputs.min() < 0 or inputs.max() >= params.n_classes):
        raise DataError(f"phone id out of range [0, {params.n_classes})")
    batch, steps = inputs.shape
    H = params.hidden_dim

    if h0 is None and concepts is not None:
        if not params.conditional:
            raise DataError("concepts given to an unconditioned model")
        concepts = np.asarray(concepts)
        if concepts.min() < 0 or concepts.max() >= params.n_concepts:
            raise DataError(f"concept id out of range [0, {params.n_concepts})")
        h0 = params["init_proj"][:, concepts].T
    elif h0 is not None:
        h0 = np.broadcast_to(np.asarray(h0, dtype=float), (batch, H))

    x = params["embedding"][inputs]
    cache = ForwardCache(inputs, concepts, [], [], [], [], [], [], h0)
    for layer in range(params.layers):
        x, mask = dropout(x, dropout_rate, rng, training)
        cache.layer_inputs.append(x)
        cache.input_masks.append(mask)
        w_rec = params[f"lstm{layer}.w_rec"]
        pre_in = x @ params[f"lstm{layer}.w_in"] + params[f"lstm{layer}.bias"]
        gates = np.empty((batch, steps, 4 * H))
        cells = np.empty((batch, steps, H))
        tanh_cells = np.empty((batch, steps, H))
        hidden = np.empty((batch, steps, H))
        h = h0 if (layer == 0 and h0 is not None) else np.zeros((batch, H))
        c = np.zeros((batch, H))
        for t in range(steps):
            a = pre_in[:, t] + h @ w_rec
            g = gates[:, t]
            g[:, : 2 * H] = sigmoid(a[:, : 2 * H])
            g[:, 2 * H : 3 * H] = np.tanh(a[:, 2 * H : 3 * H])
            g[:, 3 * H :] = sigmoid(a[:, 3 * H :])
            c = g[:, H : 2 * H] * c + g[:, :H] * g[:, 2 * H : 3 * H]
            tc = np.tanh(c)
            h = g[:, 3 * H :] * tc
            cells[:, t] = c
            tanh_cells[:, t] = tc
            hidden[:, t] = h
        cache.gates.append(gates)
        cache.cells.append(cells)
        cache.tanh_cells.append(tanh_cells)
        cache.hiddens.append(hidden)
        x = hidden
    return x, cache


def next_phone_logits(params: LstmParams, hidden: np.ndarray) -> np.ndarray:
    return hidden @ params["out.weight"].T + params["out.bias"]


def backward(params: LstmParams, cache: ForwardCache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients given dLoss/dlogits (batch x time x classes)."""
    grads = {name: np.zeros_like(v) for name, v in params.arrays.items()}
    top = cache.hiddens[-1]
    grads["out.weight"] = np.einsum("btc,bth->ch", d_logits, top)
    grads["out.bias"] = d_logits.sum(axis=(0, 1))
    d_hidden = d_logits @ params["out.weight"]

    batch, steps = cache.inputs.shape
    H = params.hidden_dim
    d_h0 = None
    for layer in reversed(range(params.layers)):
        gates = cache.gates[layer]
        cells = cache.cells[layer]
        tanh_cells = cache.tanh_cells[layer]
        hidden = cache.hiddens[layer]
        w_rec = params[f"lstm{layer}.w_rec"]
        if layer == 0 and cache.h0 is not None:
            h_init = cache.h0
        else:
            h_init = np.zeros((batch, H))
        d_pre = np.empty((batch, steps, 4 * H))
        dh_next = np.zeros((batch, H))
        dc_next = np.zeros((batch, H))
        for t in reversed(range(steps)):
            g = gates[:, t]
            i, f, gg, o = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
            tc = tanh_cells[:, t]
            c_prev = cells[:, t - 1] if t > 0 else 0.0
            dh = d_hidden[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dp = d_pre[:, t]
            dp[:, :H] = dc * gg * i * (1.0 - i)
            dp[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dp[:, 2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
            dp[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dp @ w_rec.T
        h_prev = np.concatenate([h_init[:, None, :], hidden[:, :-1]], axis=1)
        flat = d_pre.reshape(-1, 4 * H)
        x = cache.layer_inputs[layer]
        grads[f"lstm{layer}.w_in"] = x.reshape(-1, x.shape[-1]).T @ flat
        grads[f"lstm{layer}.w_rec"] = h_prev.reshape(-1, H).T @ flat
        grads[f"lstm{layer}.bias"] = flat.sum(axis=0)
        d_x = d_pre @ params[f"lstm{layer}.w_in"].T
        mask = cache.input_masks[layer]
        if mask is not None:
            d_x = d_x * mask
        if layer == 0:
            d_h0 = dh_next
            np.add.at(grads["embedding"], cache.inputs, d_x)
        else:
            d_hidden = d_x
    if params.conditional and cache.concepts is not None:
        np.add.at(grads["init_proj"].T, cache.concepts, d_h0)
    return grads


def token_logprobs(
    params: LstmParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    concepts: np.ndarray | None = None,
) -> np.ndarray:
    """log2 p(target_t | history[, concept]) for every position (eval mode)."""
    hidden, _ = lstm_forward(params, inputs, concepts)
    logp = log_softmax(next_phone_logits(params, hidden))
    return np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0] * LOG2E


def loss_and_grads(
    params: LstmParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    token_weights: np.ndarray,
    concepts: np.ndarray | None = None,
    *,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss = sum over positions of ``token_weights * -log2 p(target)``.

    Padding positions carry weight 0. Callers fold any per-word weighting and
    normalisation into ``token_weights``.
    """
    hidden, cache = lstm_forward(
        params, inputs, concepts, dropout_rate=dropout_rate, rng=rng, training=training
    )
    logits = next_phone_logits(params, hidden)
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(token_weights * picked).sum() * LOG2E)
    d_logits = np.exp(logp)
    np.put_along_axis(
        d_logits,
        targets[..., None],
        np.take_along_axis(d_logits, targets[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    d_logits *= (token_weights * LOG2E)[..., None]
    return loss, backward(params, cache, d_logits)


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    One step: ``p -= lr * weight_decay * p``, then the bias-corrected Adam
    update ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: LstmParams | dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        arrays = params.arrays if isinstance(params, LstmParams) else params
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = arrays[name]
            m = self.first_moment.get(name)
            if m is None:
                m = self.first_moment[name] = np.zeros_like(p)
                self.second_moment[name] = np.zeros_like(p)
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def params_to_dict(params: LstmParams) -> dict:
    return {
        "n_classes": params.n_classes,
        "embedding_dim": params.embedding_dim,
        "hidden_dim": params.hidden_dim,
        "layers": params.layers,
        "n_concepts": params.n_concepts,
        "arrays": {
            name: {"shape": list(v.shape), "data": v.ravel().tolist()}
            for name, v in params.arrays.items()
        },
    }


def params_from_dict(obj: dict) -> LstmParams:
    p = LstmParams(
        obj["n_classes"], obj["embedding_dim"], obj["hidden_dim"], obj["layers"], obj["n_concepts"]
    )
    for name, spec in obj["arrays"].items():
        p[name] = np.asarray(spec["data"], dtype=float).reshape(spec["shape"])
    expected = init_params(p.n_classes, p.embedding_dim, p.hidden_dim, p.layers, p.n_concepts)
    for name, v in expected.arrays.items():
        if name not in p.arrays or p[name].shape != v.shape:
            raise DataError(f"checkpoint parameter {name!r} missing or mis-shaped")
    return p


def save_checkpoint(path, params: LstmParams, *, alphabet_hash: str, extra: dict | None = None) -> None:
    """Write a JSON checkpoint. Floats are stored in shortest round-trip form."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "alphabet_hash": alphabet_hash,
        "n_concepts": params.n_concepts,
        "params": params_to_dict(params),
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path) -> tuple[LstmParams, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    return params_from_dict(doc["params"]), doc
