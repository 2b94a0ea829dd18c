"""Carve one dataset into feature-heterogeneous hypothetical institutions.

Each class gets its own n-component diagonal Gaussian mixture on the
continuous columns.  Rows are sampled into components by posterior
responsibility, every bijective (control component, outcome component)
pairing is scored by the mean pairwise angle between per-institution
logistic-regression normals, and the widest pairing wins.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .data import Dataset, local_stats, standardize
from .errors import ConvergenceError, SchemaError

VAR_FLOOR = 1e-6
ASSIGNMENT_FORMAT = "reviewlearn-assignment"


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    log_likelihood: tuple = ()  # mean per-row log-likelihood per EM iteration
    n_iter: int = 0

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def log_joint(self, X: np.ndarray) -> np.ndarray:
        """log pi_k + log N(x | mu_k, diag var_k), shape (N, K)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.means.shape[1]:
            raise SchemaError(f"data of shape {X.shape} does not match GMM dimension {self.means.shape[1]}")
        d = X.shape[1]
        inv = 1.0 / self.variances
        quad = (X**2) @ inv.T - 2.0 * X @ (self.means * inv).T + np.sum(self.means**2 * inv, axis=1)
        logdet = np.sum(np.log(self.variances), axis=1)
        return np.log(self.weights) - 0.5 * (quad + logdet + d * math.log(2.0 * math.pi))

    def responsibilities(self, X) -> np.ndarray:
        lj = self.log_joint(X)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def fit_gmm(X, n_components: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-8, max_restarts: int = 10) -> GmmModel:
    """EM for a diagonal-covariance mixture.

    Means start at distinct random rows, variances at the data variance.
    A component whose responsibility mass collapses is re-seeded from a random
    row; the likelihood trace restarts at that point so it stays monotone.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    K = int(n_components)
    if K < 1 or n < K:
        raise SchemaError(f"cannot fit {K} components to {n} rows")
    rng = np.random.default_rng(seed)
    data_var = np.maximum(X.var(axis=0), VAR_FLOOR)
    means = X[rng.choice(n, size=K, replace=False)].copy()
    variances = np.tile(data_var, (K, 1))
    weights = np.full(K, 1.0 / K)
    trace: list[float] = []
    restarts = 0
    it = 0
    for it in range(1, max_iter + 1):
        model = GmmModel(weights, means, variances)
        lj = model.log_joint(X)
        norm = logsumexp(lj, axis=1, keepdims=True)
        ll = float(norm.mean())
        if trace and ll - trace[-1] < tol:
            trace.append(ll)
            break
        trace.append(ll)
        resp = np.exp(lj - norm)
        nk = resp.sum(axis=0)
        dead = nk < 1e-8 * n
        if np.any(dead):
            restarts += 1
            if restarts > max_restarts:
                raise ConvergenceError(f"GMM component collapse persisted after {max_restarts} restarts")
            for k in np.flatnonzero(dead):
                means[k] = X[rng.integers(n)]
                variances[k] = data_var
                weights[k] = 1.0 / K
            weights = weights / weights.sum()
            trace = []
            continue
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        variances = (resp.T @ (X**2)) / nk[:, None] - means**2
        variances = np.maximum(variances, VAR_FLOOR)
    return GmmModel(weights, means, variances, tuple(trace), it)


def assign_by_density(X, gmm: GmmModel, rng: np.random.Generator) -> np.ndarray:
    """Sample each row's component from its posterior responsibilities."""
    resp = gmm.responsibilities(X)
    cdf = np.cumsum(resp, axis=1)
    u = rng.random(resp.shape[0])[:, None]
    return np.minimum((u > cdf).sum(axis=1), gmm.n_components - 1)


@dataclass(frozen=True)
class LogRegModel:
    weights: np.ndarray
    bias: float
    n_iter: int
    loss: float
    grad_norm: float


def fit_logreg(X, y, lr: float = 0.5, max_iter: int = 5000, tol: float = 1e-6) -> LogRegModel:
    """Full-batch gradient descent on mean logistic loss from a zero start."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0 or y.min() == y.max():
        raise SchemaError("logistic regression needs both classes")
    n = y.size
    w = np.zeros(X.shape[1])
    b = 0.0
    gnorm = math.inf
    it = 0
    for it in range(max_iter + 1):
        z = X @ w + b
        r = 1.0 / (1.0 + np.exp(-z)) - y
        gw = X.T @ r / n
        gb = r.mean()
        gnorm = math.sqrt(float(gw @ gw) + gb * gb)
        if gnorm <= tol or it == max_iter:
            break
        w = w - lr * gw
        b = b - lr * gb
    z = X @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return LogRegModel(w, float(b), it, loss, gnorm)


def pairwise_angles(models) -> np.ndarray:
    """Angles (radians) between weight vectors for every unordered pair."""
    if len(models) < 2:
        raise SchemaError("need at least two models")
    ws = [np.asarray(m.weights if isinstance(m, LogRegModel) else m, dtype=np.float64) for m in models]
    norms = [np.linalg.norm(w) for w in ws]
    if any(nrm == 0 for nrm in norms):
        raise SchemaError("zero-norm weight vector has no direction")
    out = []
    for i, j in itertools.combinations(range(len(ws)), 2):
        c = float(ws[i] @ ws[j]) / (norms[i] * norms[j])
        out.append(math.acos(max(-1.0, min(1.0, c))))
    return np.array(out)


def mean_pairwise_angle(models) -> float:
    return float(pairwise_angles(models).mean())


@dataclass
class InstitutionAssignment:
    institution_of_row: np.ndarray  # index into names
    names: list
    pairing: list  # (control component, outcome component) per named institution
    mean_angle: float
    sizes: list
    candidates: list = field(default_factory=list)  # (pairing tuple, mean angle or None)
    gmms: list = field(default_factory=list)  # per class, control first

    def to_dict(self) -> dict:
        return {
            "format": ASSIGNMENT_FORMAT,
            "version": 1,
            "mean_angle_rad": self.mean_angle,
            "institutions": [
                {"name": n, "size": s, "pairing": list(p) if p is not None else None}
                for n, s, p in zip(self.names, self.sizes, self.pairing)
            ],
            "rows": [self.names[i] for i in self.institution_of_row],
            "candidates": [{"pairing": list(p), "mean_angle_rad": a} for p, a in self.candidates],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def local_names(n: int) -> list[str]:
    return [f"local {i + 1}" for i in range(n)]


def order_by_size(sizes) -> list[int]:
    """Institution indices by descending size; ties keep index order."""
    return sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))


def build_heterogeneous_institutions(ds: Dataset, n_institutions: int, seed: int = 0, gmm_iter: int = 200, logreg_iter: int = 5000) -> InstitutionAssignment:
    n = int(n_institutions)
    if n < 1:
        raise SchemaError("need at least one institution")
    if ds.standardized:
        raise SchemaError("pass the raw dataset; it is standardized internally")
    if len(ds.schema.continuous_index) == 0:
        raise SchemaError("heterogeneous splitting needs continuous columns")
    y = ds.labels
    if y.min() == y.max():
        raise SchemaError("heterogeneous splitting needs both classes")
    if n == 1:
        return InstitutionAssignment(np.zeros(ds.n_rows, dtype=np.int64), local_names(1), [(0, 0)], math.nan, [ds.n_rows])

    std = standardize(ds, local_stats(ds))
    X = std.features
    Xc = X[:, ds.schema.continuous_index]
    comp = np.empty(ds.n_rows, dtype=np.int64)
    gmms = []
    for c in (0, 1):
        rows = np.flatnonzero(y == c)
        if rows.size < n:
            raise SchemaError(f"class {c} has fewer rows than institutions")
        gmm = fit_gmm(Xc[rows], n, seed=seed * 2 + c, max_iter=gmm_iter)
        gmms.append(gmm)
        comp[rows] = assign_by_density(Xc[rows], gmm, np.random.default_rng([seed, c]))

    best = None
    candidates = []
    for perm in itertools.permutations(range(n)):
        # outcome component perm[k] joins control component k
        inv = np.empty(n, dtype=np.int64)
        inv[list(perm)] = np.arange(n)
        inst = np.where(y == 0, comp, inv[comp])
        models = []
        for k in range(n):
            rows = inst == k
            yk = y[rows]
            if yk.size == 0 or yk.min() == yk.max():
                models = None
                break
            models.append(fit_logreg(X[rows], yk, max_iter=logreg_iter))
        if models is None or any(not np.any(m.weights) for m in models):
            candidates.append((perm, None))
            continue
        angle = mean_pairwise_angle(models)
        candidates.append((perm, angle))
        if best is None or angle > best[1]:
            best = (perm, angle, inst)
    if best is None:
        raise SchemaError("every candidate pairing left an institution empty or single-class")
    perm, angle, inst = best
    sizes = [int(np.count_nonzero(inst == k)) for k in range(n)]
    order = order_by_size(sizes)
    rename = np.empty(n, dtype=np.int64)
    rename[order] = np.arange(n)
    return InstitutionAssignment(
        rename[inst],
        local_names(n),
        [(k, perm[k]) for k in order],
        angle,
        [sizes[k] for k in order],
        candidates,
        gmms,
    )
