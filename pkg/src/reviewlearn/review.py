"""Review learning: generative replay where the classifier is its own generator.

Before training on a new institution the incoming model is frozen.  Samples
are then synthesised from that frozen copy by optimising Gaussian-noise
inputs until their logits hit the per-class logits remembered from earlier
institutions.  Training mixes the ordinary class-weighted loss on real rows
with a temperature-softened distillation loss on the synthesised rows,
weighted by the share of rows the model has already seen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import ColumnSchema, ColumnStats, Dataset
from .errors import ConfigError, SchemaError
from .loop import EXTRACT_STREAM, FitResult, HyperParams, fit, predict_logits
from .nn import Mlp, adam_update, backward_inputs, backward_params, distillation_loss, forward, model_from_dict, model_to_dict, sigmoid

BUNDLE_FORMAT = "reviewlearn-bundle"
BUNDLE_VERSION = 1


@dataclass(frozen=True)
class ReviewState:
    snapshot: Optional[Mlp] = None
    target_logits: Optional[tuple] = None  # (class 0, class 1)
    n_review: int = 0
    temperature: float = 5.0
    n_generated: int = 512
    fv_learning_rate: float = 1e-2
    schedule: str = "per_epoch"
    max_steps: int = 500
    logit_tol: float = 0.05

    def __post_init__(self):
        if self.n_review < 0:
            raise ConfigError("n_review must be non-negative", "n_review")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive", "temperature")
        if self.n_generated < 2:
            raise ConfigError("need at least one generated sample per class", "n_generated")
        if self.schedule not in ("once", "per_epoch"):
            raise ConfigError("schedule must be 'once' or 'per_epoch'", "schedule")

    @classmethod
    def from_hyper(cls, hyper: HyperParams) -> "ReviewState":
        return cls(
            temperature=hyper.temperature,
            n_generated=hyper.n_generated,
            fv_learning_rate=hyper.fv_learning_rate,
            schedule=hyper.extraction,
            max_steps=hyper.extraction_steps,
            logit_tol=hyper.logit_tol,
        )


@dataclass(frozen=True)
class GeneratedBatch:
    samples: np.ndarray  # (n, F) in model input space
    target_class: np.ndarray  # (n,)
    soft_target_logits: np.ndarray  # snapshot logits on the final samples
    final_error: np.ndarray  # |logit - class target| at stop
    steps: np.ndarray  # optimisation steps used per sample
    converged: np.ndarray  # bool, final_error <= logit_tol

    @property
    def n(self) -> int:
        return self.samples.shape[0]


def measure_class_logits(model: Mlp, current: Dataset, generated: Optional[GeneratedBatch] = None) -> tuple:
    """Mean eval-mode logit per class over current rows plus generated rows.

    Every row counts once; generated rows are grouped by their target class.
    """
    logits = [predict_logits(model, current)]
    classes = [current.labels]
    if generated is not None and generated.n:
        logits.append(forward(model, generated.samples, "eval")[0])
        classes.append(generated.target_class)
    z = np.concatenate(logits)
    c = np.concatenate(classes)
    out = []
    for k in (0, 1):
        sel = c == k
        if not np.any(sel):
            raise SchemaError(f"class {k} absent from both current and generated rows")
        out.append(float(z[sel].mean()))
    return tuple(out)


def _to_inputs(latent: np.ndarray, binary: np.ndarray) -> np.ndarray:
    x = latent.copy()
    x[:, binary] = sigmoid(latent[:, binary])
    return x


def knowledge_extraction(
    state: ReviewState,
    schema: ColumnSchema,
    key: Sequence[int],
    max_steps: Optional[int] = None,
    logit_tol: Optional[float] = None,
) -> GeneratedBatch:
    """Synthesise ``state.n_generated`` rows from the frozen snapshot.

    Classes split evenly, any odd sample going to class 0.  Each row is a
    latent vector drawn from its own stream ``[*key, row]``; binary columns
    read the latent through a sigmoid, continuous columns read it directly.
    Latents follow Adam on ``(logit - target)**2`` with the snapshot in eval
    mode, and each row stops as soon as it is within ``logit_tol``.  Rows that
    never get there are kept and marked unconverged.
    """
    if state.snapshot is None or state.target_logits is None:
        raise ConfigError("extraction needs a snapshot and target logits")
    if state.n_review <= 0:
        raise ConfigError("nothing to review before the first institution", "n_review")
    max_steps = state.max_steps if max_steps is None else max_steps
    tol = state.logit_tol if logit_tol is None else logit_tol
    model = state.snapshot
    if model.n_inputs != len(schema):
        raise SchemaError("schema width does not match the snapshot input")
    n = state.n_generated
    n1 = n // 2
    cls = np.concatenate([np.zeros(n - n1, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    target = np.asarray(state.target_logits, dtype=np.float64)[cls]
    binary = schema.binary_mask
    F = len(schema)
    latent = np.stack([np.random.default_rng([*key, i]).standard_normal(F) for i in range(n)])
    m = np.zeros_like(latent)
    v = np.zeros_like(latent)
    steps = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    lr = state.fv_learning_rate
    t = 0
    while True:
        x = _to_inputs(latent[active], binary)
        err = forward(model, x, "eval")[0] - target[active]
        done = np.abs(err) <= tol
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if t >= max_steps or not np.any(active):
            break
        keep = ~done
        idx, x, err = idx[keep], x[keep], err[keep]
        gx = backward_inputs(model, x, 2.0 * err)
        lat = latent[idx]
        gx[:, binary] *= x[:, binary] * (1.0 - x[:, binary])
        t += 1
        new, m[idx], v[idx] = adam_update(lat, gx, m[idx], v[idx], t, lr, 0.9, 0.999, 1e-8, 0.0)
        latent[idx] = new
        steps[idx] += 1
        if not np.all(np.isfinite(new)):
            raise FloatingPointError("non-finite latent during knowledge extraction")
    samples = _to_inputs(latent, binary)
    soft = forward(model, samples, "eval")[0]
    err = np.abs(soft - target)
    return GeneratedBatch(samples, cls, soft, err, steps, err <= tol)


def review_mix_weight(n_review: int, n_real: int) -> float:
    """Share of previously seen rows, ``n_review / (n_real + n_review)``."""
    if n_real <= 0:
        raise ConfigError("current dataset must be non-empty", "n_real")
    if n_review < 0:
        raise ConfigError("n_review must be non-negative", "n_review")
    return n_review / (n_real + n_review)


def mixed_loss(
    real_loss: float,
    real_grads: list,
    generated: Optional[GeneratedBatch],
    model: Mlp,
    temperature: float,
    lam: float,
    rng: Optional[np.random.Generator] = None,
):
    """``(1 - lam) * L_real + lam * L_review`` with matching gradients.

    The review term is the distillation loss of the current model's logits on
    the whole generated batch against its soft targets.  Passing ``rng`` runs
    that forward pass in train mode (with dropout); otherwise eval mode.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"mixing weight {lam} outside [0, 1]", "lambda")
    if lam == 0.0:
        return real_loss, real_grads
    if generated is None or generated.n == 0:
        raise ConfigError("review weight is positive but there are no generated samples")
    mode = "train" if rng is not None else "eval"
    z, trace = forward(model, generated.samples, mode, rng)
    review, dz = distillation_loss(z, generated.soft_target_logits, temperature)
    review_grads = backward_params(model, trace, dz)
    if lam == 1.0:
        return review, review_grads
    grads = [(1.0 - lam) * g + lam * r for g, r in zip(real_grads, review_grads)]
    return (1.0 - lam) * real_loss + lam * review, grads


@dataclass
class VisitResult:
    model: Mlp
    state: ReviewState
    fit: FitResult
    lam: float
    generated: Optional[GeneratedBatch]


def rl_train_on_institution(
    model: Mlp,
    state: ReviewState,
    train: Dataset,
    val: Dataset,
    hyper: HyperParams,
    key: Sequence[int],
    extract_key: Optional[Sequence[int]] = None,
) -> VisitResult:
    """One review-learning visit.

    ``key`` drives batch order and dropout exactly as in plain fine-tuning, so
    a visit with nothing to review reproduces transfer learning bit for bit.
    """
    if state.n_review > 0 and state.target_logits is None:
        raise ConfigError("prior rows recorded without target logits")
    snapshot = model
    work = replace(state, snapshot=snapshot)
    lam = review_mix_weight(state.n_review, train.n_rows)
    extract_key = list(extract_key) if extract_key is not None else [*key, EXTRACT_STREAM]
    current: dict = {"batch": None}

    def on_epoch(epoch: int) -> None:
        if lam == 0.0:
            return
        if work.schedule == "once" and current["batch"] is not None:
            return
        current["batch"] = knowledge_extraction(work, train.schema, [*extract_key, epoch])

    def mix(m, loss, grads, rng):
        return mixed_loss(loss, grads, current["batch"], m, work.temperature, lam, rng)

    result = fit(model, train, val, hyper, key, on_epoch=on_epoch, mix=mix)
    trained = result.model
    generated = current["batch"]
    targets = measure_class_logits(trained, train, generated)
    new_state = replace(work, snapshot=trained, target_logits=targets, n_review=state.n_review + train.n_rows)
    return VisitResult(trained, new_state, result, lam, generated)


def bundle_to_dict(model: Mlp, state: Optional[ReviewState], hyper: HyperParams, stats: Optional[ColumnStats], extra: Optional[dict] = None) -> dict:
    """Everything that travels to the next institution; never any data rows."""
    d = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "model": model_to_dict(model),
        "hyper": hyper.to_dict(),
        "stats": stats.to_dict() if stats is not None else None,
        "review": None,
    }
    if state is not None:
        d["review"] = {
            "target_logits": list(state.target_logits) if state.target_logits is not None else None,
            "n_review": int(state.n_review),
        }
    if extra:
        d["extra"] = extra
    return d


def save_bundle(path, model, state, hyper, stats, extra=None) -> None:
    Path(path).write_text(json.dumps(bundle_to_dict(model, state, hyper, stats, extra), sort_keys=True))


def load_bundle(path) -> dict:
    """Returns ``{"model", "state", "hyper", "stats", "extra"}``."""
    d = json.loads(Path(path).read_text())
    if d.get("format") != BUNDLE_FORMAT or d.get("version") != BUNDLE_VERSION:
        raise SchemaError(f"{path}: not a transfer bundle")
    hyper = HyperParams.from_dict(d["hyper"])
    model = model_from_dict(d["model"])
    state = None
    if d.get("review") is not None:
        r = d["review"]
        tl = tuple(r["target_logits"]) if r["target_logits"] is not None else None
        state = replace(ReviewState.from_hyper(hyper), snapshot=model, target_logits=tl, n_review=int(r["n_review"]))
    stats = ColumnStats.from_dict(d["stats"]) if d.get("stats") else None
    return {"model": model, "state": state, "hyper": hyper, "stats": stats, "extra": d.get("extra", {})}
