"""Mini-batch training loop with validation-AUROC early stopping.

Every training regime runs through :func:`fit`.  Review learning plugs in via
two hooks: ``on_epoch`` (knowledge extraction) and ``mix`` (adds the review
term to the real-data loss and gradients).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, SchemaError
from .metrics import auroc_scores
from .nn import AdamState, Mlp, adam_step, backward_params, class_weights, forward, sigmoid, weighted_bce_loss

# rng stream tags; keys are [seed, tag, ...]
INIT_STREAM = 1
EPOCH_STREAM = 2
EXTRACT_STREAM = 3


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    weight_decay: float = 0.0
    eval_interval: int = 10
    patience: int = 20
    hidden: tuple = (32,)
    dropout: float = 0.5
    temperature: float = 5.0
    n_generated: int = 512
    fv_learning_rate: float = 1e-2
    extraction: str = "per_epoch"
    extraction_steps: int = 500
    logit_tol: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("batch_size", "max_epochs", "eval_interval", "patience", "n_generated", "extraction_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1", name)
        if self.learning_rate < 0 or self.weight_decay < 0 or self.fv_learning_rate <= 0:
            raise ConfigError("learning rates and weight decay must be non-negative", "learning_rate")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive", "temperature")
        if self.n_generated < 2:
            raise ConfigError("n_generated must cover both classes", "n_generated")
        if self.extraction not in ("once", "per_epoch"):
            raise ConfigError("extraction must be 'once' or 'per_epoch'", "extraction")
        if self.logit_tol < 0 or not 0.0 <= self.dropout <= 1.0:
            raise ConfigError("invalid logit_tol or dropout", "logit_tol")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters {sorted(unknown)}", f"hyper.{sorted(unknown)[0]}")
        return cls(**d)

    def init_model(self, n_inputs: int, seed: int) -> Mlp:
        rng = np.random.default_rng([seed, INIT_STREAM])
        return Mlp.init([n_inputs, *self.hidden, 1], rng, self.dropout)


@dataclass
class EarlyStopper:
    patience: int
    best_val_auroc: float = -math.inf
    best_checkpoint: Optional[Mlp] = None
    best_index: int = -1
    evals_since_best: int = 0
    trail: list = field(default_factory=list)

    def update(self, value: float, model: Mlp) -> bool:
        """Record one validation score; True once patience is exhausted."""
        self.trail.append(value)
        if value > self.best_val_auroc:
            self.best_val_auroc = value
            self.best_checkpoint = model
            self.best_index = len(self.trail) - 1
            self.evals_since_best = 0
        else:
            self.evals_since_best += 1
        return self.evals_since_best >= self.patience


@dataclass
class FitResult:
    model: Mlp
    trail: list
    best_index: int
    n_updates: int
    epochs_run: int
    stopped_early: bool


def predict_logits(model: Mlp, ds: Dataset) -> np.ndarray:
    return forward(model, ds.features, "eval")[0]


def predict_proba(model: Mlp, ds: Dataset) -> np.ndarray:
    return sigmoid(predict_logits(model, ds))


MixHook = Callable[[Mlp, float, list, np.random.Generator], tuple]


def fit(
    model: Mlp,
    train: Dataset,
    val: Dataset,
    hyper: HyperParams,
    key: Sequence[int],
    on_epoch: Optional[Callable[[int], None]] = None,
    mix: Optional[MixHook] = None,
) -> FitResult:
    """Train with shuffled mini-batches; return the best-validation checkpoint.

    ``key`` seeds one generator per epoch (``[*key, epoch]``) that drives both
    the batch order and the dropout masks.
    """
    if not (train.standardized and val.standardized):
        raise SchemaError("train and validation data must be standardized")
    if val.labels.min() == val.labels.max():
        raise SchemaError(f"validation set of {val.institution!r} has a single class")
    cw = class_weights(train.labels)
    X, y = train.features, train.labels
    n = train.n_rows
    adam = AdamState.zeros_like(model.params, learning_rate=hyper.learning_rate, weight_decay=hyper.weight_decay)
    stopper = EarlyStopper(hyper.patience)
    updates = 0
    last_eval = 0
    stopped = False
    epoch = 0

    def evaluate(m):
        return stopper.update(auroc_scores(val.labels, predict_logits(m, val)), m)

    for epoch in range(hyper.max_epochs):
        rng = np.random.default_rng([*key, epoch])
        if on_epoch is not None:
            on_epoch(epoch)
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            logits, trace = forward(model, X[idx], "train", rng)
            loss, dl = weighted_bce_loss(logits, y[idx], cw)
            grads = backward_params(model, trace, dl)
            if mix is not None:
                loss, grads = mix(model, loss, grads, rng)
            params, adam = adam_step(model.params, grads, adam)
            model = model.with_params(params)
            updates += 1
            if updates % hyper.eval_interval == 0:
                last_eval = updates
                if evaluate(model):
                    stopped = True
                    break
        if stopped:
            break
    if not stopped and updates > last_eval:
        evaluate(model)
    return FitResult(stopper.best_checkpoint, stopper.trail, stopper.best_index, updates, epoch + 1, stopped)
