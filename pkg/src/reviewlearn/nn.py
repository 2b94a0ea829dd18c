"""Dense ReLU network with a single logit output, trained with Adam.

Only the fixed MLP topologies used by the trainers are supported: a stack of
fully connected layers, ReLU + inverted dropout after every hidden layer, and
one linear output unit.  The sigmoid is never part of the model; it only
appears inside the losses and metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, SchemaError

CHECKPOINT_FORMAT = "reviewlearn-mlp"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Mlp:
    weights: tuple  # each (out, in)
    biases: tuple  # each (out,)
    dropout: float = 0.5

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise SchemaError("weights and biases must be non-empty and paired")
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigError(f"dropout probability {self.dropout} outside [0, 1]", "dropout")
        prev = None
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise SchemaError(f"layer shapes {w.shape} / {b.shape} do not pair")
            if prev is not None and w.shape[1] != prev:
                raise SchemaError(f"layer input {w.shape[1]} does not chain from {prev}")
            prev = w.shape[0]
        if prev != 1:
            raise SchemaError("output layer must have a single unit")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, dropout: float = 0.5) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases.

        ``sizes`` lists every layer width including the input and the final 1.
        """
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(rng.uniform(-bound, bound, size=n_out))
        return cls(tuple(weights), tuple(biases), dropout)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.n_inputs] + [w.shape[0] for w in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        return replace(self, weights=tuple(params[0::2]), biases=tuple(params[1::2]))

    def equals(self, other: "Mlp") -> bool:
        """Bitwise parameter equality."""
        if self.dropout != other.dropout or self.sizes != other.sizes:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.params, other.params))


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list  # pre-activations per layer
    acts: list  # post-dropout activations per hidden layer
    masks: list  # scaled dropout masks per hidden layer
    mode: str


@dataclass(frozen=True)
class AdamState:
    first_moments: tuple
    second_moments: tuple
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        zeros = tuple(np.zeros_like(p) for p in params)
        return cls(zeros, tuple(np.zeros_like(p) for p in params), **hyper)


def _check_batch(model: Mlp, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.n_inputs:
        raise SchemaError(f"batch shape {batch.shape} does not match model input {model.n_inputs}")
    return batch


def forward(model: Mlp, batch, mode: str = "eval", rng: np.random.Generator | None = None):
    """Return ``(logits, trace)`` for a feature matrix.

    Train mode applies inverted dropout: each hidden unit is zeroed with
    probability ``model.dropout`` and survivors are scaled by ``1/(1-p)``.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}", "mode")
    x = _check_batch(model, batch)
    p = model.dropout
    train = mode == "train" and p > 0.0
    if train and rng is None:
        raise ConfigError("train mode needs an rng for dropout", "rng")
    pre, acts, masks = [], [], []
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre.append(z)
        if i == last:
            break
        h = np.maximum(z, 0.0)
        if train:
            keep = rng.random(h.shape) >= p
            mask = keep * (1.0 / (1.0 - p)) if p < 1.0 else np.zeros(h.shape)
        else:
            mask = np.ones(h.shape)
        h = h * mask
        masks.append(mask)
        acts.append(h)
    return pre[-1][:, 0], ForwardTrace(x, pre, acts, masks, mode)


def _backprop(model: Mlp, trace: ForwardTrace, dlogits, want_inputs: bool):
    n = trace.inputs.shape[0]
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if (
        dlogits.shape != (n,)
        or len(trace.pre) != len(model.weights)
        or trace.inputs.shape[1] != model.n_inputs
        or any(z.shape != (n, w.shape[0]) for z, w in zip(trace.pre, model.weights))
    ):
        raise SchemaError("trace does not match model or upstream gradient")
    delta = dlogits[:, None]
    grads = [None] * (2 * len(model.weights))
    for i in range(len(model.weights) - 1, -1, -1):
        below = trace.acts[i - 1] if i > 0 else trace.inputs
        grads[2 * i] = delta.T @ below
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0 or want_inputs:
            up = delta @ model.weights[i]
            if i > 0:
                delta = up * trace.masks[i - 1] * (trace.pre[i - 1] > 0.0)
            else:
                return grads, up
    return grads, None


def backward_params(model: Mlp, trace: ForwardTrace, dloss_dlogits) -> list[np.ndarray]:
    """Parameter gradients in the order of ``model.params``."""
    return _backprop(model, trace, dloss_dlogits, want_inputs=False)[0]


def backward_inputs(model: Mlp, batch, dloss_dlogits) -> np.ndarray:
    """dLoss/dInput through an eval-mode (dropout-free) pass."""
    _, trace = forward(model, batch, "eval")
    return _backprop(model, trace, dloss_dlogits, want_inputs=True)[1]


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One bias-corrected Adam step on arrays; ``t`` is the post-increment step."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    if weight_decay:
        p = p - lr * weight_decay * p
    return p - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """Return ``(new_params, new_state)``; weight decay is decoupled from the moments."""
    if len(params) != len(grads) or len(params) != len(state.first_moments):
        raise SchemaError("params, grads and optimizer moments differ in length")
    t = state.step_count + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        if p.shape != g.shape or p.shape != m.shape:
            raise SchemaError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
        p2, m2, v2 = adam_update(
            p, g, m, v, t, state.learning_rate, state.beta1, state.beta2,
            state.epsilon, state.weight_decay,
        )
        new_p.append(p2)
        new_m.append(m2)
        new_v.append(v2)
    return new_p, replace(state, first_moments=tuple(new_m), second_moments=tuple(new_v), step_count=t)


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def class_weights(labels) -> tuple[float, float]:
    """Inverse-frequency weights ``N / (2 N_c)``; unit weights when balanced."""
    labels = np.asarray(labels)
    n = labels.size
    n1 = int(np.count_nonzero(labels == 1))
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise SchemaError("class weights need both classes present")
    return n / (2.0 * n0), n / (2.0 * n1)


def weighted_bce_loss(logits, labels, class_weights=(1.0, 1.0)):
    """Weighted-mean binary cross-entropy on logits.

    Per-sample weights are ``class_weights[y]`` and the loss is normalised by
    their sum.  Returns ``(loss, dloss_dlogits)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.size == 0:
        raise SchemaError("empty batch")
    w0, w1 = class_weights
    if w0 <= 0 or w1 <= 0:
        raise ConfigError("class weights must be positive", "class_weights")
    w = np.where(y == 1.0, w1, w0)
    total = w.sum()
    per = softplus(z) - y * z
    loss = float(np.dot(w, per) / total)
    return loss, w * (sigmoid(z) - y) / total


def distillation_loss(current_logits, target_logits, temperature: float):
    """Temperature-softened distillation for a single-logit binary model.

    The logit ``z`` is read as the two-class softmax over ``[0, z]``, so the
    soft distributions are ``sigmoid(z / T)``.  The per-sample loss is scaled
    by ``T**2`` and averaged.  Returns ``(loss, dloss_dlogits)``.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}", "T")
    z = np.asarray(current_logits, dtype=np.float64)
    zt = np.asarray(target_logits, dtype=np.float64)
    if z.size == 0 or z.shape != zt.shape:
        raise SchemaError("distillation needs matching non-empty logit vectors")
    T = float(temperature)
    p = sigmoid(z / T)
    p_t = sigmoid(zt / T)
    # log p = -softplus(-z/T), log(1-p) = -softplus(z/T)
    per = T * T * (p_t * softplus(-z / T) + (1.0 - p_t) * softplus(z / T))
    n = z.size
    return float(per.mean()), T * (p - p_t) / n


def model_to_dict(model: Mlp) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dropout": model.dropout,
        "layers": [
            {"shape": list(w.shape), "weight": w.tolist(), "bias": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
    }


def model_from_dict(d: dict) -> Mlp:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint {d.get('format')!r} v{d.get('version')}")
    weights, biases = [], []
    for layer in d["layers"]:
        w = np.array(layer["weight"], dtype=np.float64).reshape(layer["shape"])
        weights.append(w)
        biases.append(np.array(layer["bias"], dtype=np.float64))
    return Mlp(tuple(weights), tuple(biases), float(d["dropout"]))


def save_model(model: Mlp, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True))


def load_model(path) -> Mlp:
    return model_from_dict(json.loads(Path(path).read_text()))
