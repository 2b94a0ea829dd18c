"""Tabular datasets, stratified splits and privacy-preserving standardization.

Institutions never exchange rows.  Each one computes :func:`local_stats` on
its own training split; :func:`merge_stats` turns those summaries into the
global statistics that every collaborating institution standardizes with.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, SchemaError

log = logging.getLogger(__name__)

LABEL_COLUMN = "label"
STATS_FORMAT = "reviewlearn-stats"
STATS_VERSION = 1


class ConstantColumnWarning(UserWarning):
    """A continuous column has zero variance and is only centred."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # "binary" | "continuous"


@dataclass(frozen=True)
class ColumnSchema:
    columns: tuple

    def __post_init__(self):
        if not self.columns:
            raise SchemaError("schema needs at least one column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        if LABEL_COLUMN in names:
            raise SchemaError(f"{LABEL_COLUMN!r} is reserved for the label column")
        for c in self.columns:
            if c.kind not in ("binary", "continuous"):
                raise SchemaError(f"column {c.name!r} has unknown kind {c.kind!r}")

    @classmethod
    def from_counts(cls, n_binary: int, n_continuous: int) -> "ColumnSchema":
        cols = [Column(f"b{i}", "binary") for i in range(n_binary)]
        cols += [Column(f"c{i}", "continuous") for i in range(n_continuous)]
        return cls(tuple(cols))

    @classmethod
    def from_dict(cls, d) -> "ColumnSchema":
        """Accepts ``{"binary": [...], "continuous": [...]}`` or a list of ``{name, kind}``."""
        if isinstance(d, dict):
            cols = [Column(n, "binary") for n in d.get("binary", [])]
            cols += [Column(n, "continuous") for n in d.get("continuous", [])]
        else:
            cols = [Column(c["name"], c["kind"]) for c in d]
        return cls(tuple(cols))

    def to_dict(self) -> list:
        return [{"name": c.name, "kind": c.kind} for c in self.columns]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def binary_mask(self) -> np.ndarray:
        return np.array([c.kind == "binary" for c in self.columns])

    @property
    def continuous_index(self) -> np.ndarray:
        return np.flatnonzero(~self.binary_mask)

    @property
    def continuous_names(self) -> list[str]:
        return [c.name for c in self.columns if c.kind == "continuous"]

    def __len__(self):
        return len(self.columns)


@dataclass(frozen=True)
class Dataset:
    schema: ColumnSchema
    features: np.ndarray
    labels: np.ndarray
    institution: str = ""
    standardized: bool = False

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[1] != len(self.schema):
            raise SchemaError(f"features of shape {x.shape} do not match {len(self.schema)} columns")
        if y.shape != (x.shape[0],):
            raise SchemaError("label count differs from row count")
        if not np.all((y == 0) | (y == 1)):
            raise SchemaError("labels must be 0 or 1")
        if not np.all(np.isfinite(x)):
            raise SchemaError("features contain NaN or Inf")
        if not self.standardized:
            b = x[:, self.schema.binary_mask]
            if not np.all((b == 0.0) | (b == 1.0)):
                raise SchemaError("raw binary columns must contain only 0 and 1")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n_rows(self) -> int:
        return self.labels.shape[0]

    @property
    def case_ratio(self) -> float:
        return float(self.labels.mean()) if self.n_rows else float("nan")

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.schema, self.features[index], self.labels[index], self.institution, self.standardized)

    def renamed(self, institution: str) -> "Dataset":
        return Dataset(self.schema, self.features, self.labels, institution, self.standardized)

    @staticmethod
    def concat(parts: Sequence["Dataset"], institution: str = "pooled") -> "Dataset":
        if not parts:
            raise SchemaError("nothing to concatenate")
        first = parts[0]
        for p in parts[1:]:
            if p.schema != first.schema or p.standardized != first.standardized:
                raise SchemaError("cannot concatenate datasets with different schema or state")
        return Dataset(
            first.schema,
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            institution,
            first.standardized,
        )


@dataclass(frozen=True)
class Institution:
    """One site's raw (unstandardized) splits."""

    name: str
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True)
class ColumnStats:
    names: tuple
    counts: np.ndarray
    means: np.ndarray
    variances: np.ndarray  # population convention
    n_rows: int

    def __post_init__(self):
        k = len(self.names)
        for arr in (self.counts, self.means, self.variances):
            if np.shape(arr) != (k,):
                raise SchemaError("stats arrays must have one entry per column")
        if np.any(np.asarray(self.counts) <= 0):
            raise SchemaError("stats counts must be positive")
        if np.any(np.asarray(self.variances) < 0):
            raise SchemaError("variances must be non-negative")

    def to_dict(self) -> dict:
        return {
            "format": STATS_FORMAT,
            "version": STATS_VERSION,
            "n_rows": int(self.n_rows),
            "columns": [
                {"name": n, "count": int(c), "mean": float(m), "variance": float(v)}
                for n, c, m, v in zip(self.names, self.counts, self.means, self.variances)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnStats":
        if d.get("format") != STATS_FORMAT or d.get("version") != STATS_VERSION:
            raise SchemaError("unsupported stats file")
        cols = d["columns"]
        return cls(
            tuple(c["name"] for c in cols),
            np.array([c["count"] for c in cols], dtype=np.int64),
            np.array([c["mean"] for c in cols], dtype=np.float64),
            np.array([c["variance"] for c in cols], dtype=np.float64),
            int(d["n_rows"]),
        )


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.7
    val: float = 0.15
    test: float = 0.15

    def __post_init__(self):
        parts = (self.train, self.val, self.test)
        if any(not r > 0 for r in parts):
            raise ConfigError(f"split ratios must all be positive, got {parts}", "ratios")
        if abs(sum(parts) - 1.0) > 1e-12:
            raise ConfigError(f"split ratios must sum to 1, got {sum(parts)}", "ratios")


def ingest_csv(path, schema: ColumnSchema, institution: str = "", drop_nan_rows: bool = False) -> Dataset:
    """Read a header-first CSV with one row per patient and a ``label`` column.

    Columns may appear in any order; they are returned in schema order.
    """
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [n for n in schema.names + [LABEL_COLUMN] if n not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        pos = [header.index(n) for n in schema.names]
        lpos = header.index(LABEL_COLUMN)
        binary = schema.binary_mask
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                vals = [float(rec[p]) for p in pos]
                lab = float(rec[lpos])
            except (ValueError, IndexError):
                raise SchemaError(f"{path}:{lineno}: unparseable numeric value") from None
            if any(math.isnan(v) or math.isinf(v) for v in vals):
                if drop_nan_rows:
                    log.warning("%s:%d: dropping row with missing value", path, lineno)
                    continue
                raise SchemaError(f"{path}:{lineno}: NaN or Inf value")
            for j, v in enumerate(vals):
                if binary[j] and v not in (0.0, 1.0):
                    raise SchemaError(f"{path}:{lineno}: binary column {schema.names[j]!r} has value {v}")
            if lab not in (0.0, 1.0):
                raise SchemaError(f"{path}:{lineno}: label must be 0 or 1, got {lab}")
            rows.append(vals)
            labels.append(int(lab))
    x = np.array(rows, dtype=np.float64).reshape(len(rows), len(schema))
    return Dataset(schema, x, np.array(labels, dtype=np.int64), institution)


def write_csv(ds: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    binary = ds.schema.binary_mask
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.schema.names + [LABEL_COLUMN])
        for row, lab in zip(ds.features, ds.labels):
            w.writerow([str(int(v)) if b and not ds.standardized else repr(float(v)) for v, b in zip(row, binary)] + [int(lab)])


def split(ds: Dataset, ratios: SplitRatios = SplitRatios(), seed: int = 0):
    """Label-stratified train/val/test split.

    Per class, val and test each get ``round(ratio * n_c)`` rows (at least one)
    and train gets the rest.  Index order within each split follows the input.
    """
    if ds.n_rows < 3:
        raise SchemaError("need at least 3 rows to split")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in (0, 1):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 3:
            raise SchemaError(f"class {c} has {idx.size} rows, fewer than the 3 splits")
        idx = rng.permutation(idx)
        n_val = max(1, int(math.floor(ratios.val * idx.size + 0.5)))
        n_test = max(1, int(math.floor(ratios.test * idx.size + 0.5)))
        n_train = idx.size - n_val - n_test
        if n_train < 1:
            raise SchemaError(f"class {c} too small for the requested ratios")
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(ds.subset(np.sort(np.concatenate(p))) for p in parts)


def make_institutions(sites: Sequence[Dataset], ratios: SplitRatios = SplitRatios(), seed: int = 0) -> list[Institution]:
    """Split every site on its own; site ``k`` uses split seed ``seed * 1000 + k``."""
    return [Institution(s.institution, *split(s, ratios, seed=seed * 1000 + k)) for k, s in enumerate(sites)]


def local_stats(train: Dataset) -> ColumnStats:
    """Population mean and variance of every continuous column."""
    if train.standardized:
        raise SchemaError("statistics must come from unstandardized data")
    if train.n_rows == 0:
        raise SchemaError("cannot compute statistics of an empty dataset")
    idx = train.schema.continuous_index
    x = train.features[:, idx]
    n = train.n_rows
    return ColumnStats(
        tuple(train.schema.continuous_names),
        np.full(idx.size, n, dtype=np.int64),
        x.mean(axis=0),
        x.var(axis=0),
        n,
    )


def merge_stats(stats_list: Sequence[ColumnStats]) -> ColumnStats:
    """Global statistics from per-institution summaries alone.

    N = sum N_i, mu = sum N_i mu_i / N and
    var = sum N_i (mu_i^2 + var_i) / N - mu^2, i.e. E[X^2] - E[X]^2 over the
    pooled rows.  Exact under the population-variance convention.  It is
    evaluated as sum N_i (var_i + (mu_i - mu)^2) / N, the same quantity
    without the cancellation when |mu| is large against the spread.
    """
    if not stats_list:
        raise SchemaError("nothing to merge")
    names = stats_list[0].names
    for s in stats_list[1:]:
        if s.names != names:
            raise SchemaError("cannot merge statistics over different columns")
    if len(stats_list) == 1:
        return stats_list[0]
    counts = np.array([s.counts for s in stats_list], dtype=np.float64)
    means = np.array([s.means for s in stats_list])
    variances = np.array([s.variances for s in stats_list])
    n = counts.sum(axis=0)
    mu = (counts * means).sum(axis=0) / n
    var = (counts * (variances + (means - mu) ** 2)).sum(axis=0) / n
    return ColumnStats(
        names,
        n.astype(np.int64),
        mu,
        var,
        int(sum(s.n_rows for s in stats_list)),
    )


def _stats_columns(ds: Dataset, stats: ColumnStats) -> np.ndarray:
    if tuple(ds.schema.continuous_names) != tuple(stats.names):
        raise SchemaError("statistics columns do not match dataset continuous columns")
    return ds.schema.continuous_index


def standardize(ds: Dataset, stats: ColumnStats) -> Dataset:
    """Z-score continuous columns; binary columns are left untouched.

    Zero-variance columns are centred only, with a :class:`ConstantColumnWarning`.
    """
    if ds.standardized:
        raise SchemaError("dataset is already standardized")
    idx = _stats_columns(ds, stats)
    sd = np.sqrt(stats.variances)
    flat = sd == 0.0
    if np.any(flat):
        cols = [stats.names[i] for i in np.flatnonzero(flat)]
        warnings.warn(f"zero variance in {cols}; centring only", ConstantColumnWarning, stacklevel=2)
        sd = np.where(flat, 1.0, sd)
    x = np.array(ds.features)
    x[:, idx] = (x[:, idx] - stats.means) / sd
    return Dataset(ds.schema, x, ds.labels, ds.institution, standardized=True)


def destandardize(ds: Dataset, stats: ColumnStats) -> Dataset:
    if not ds.standardized:
        raise SchemaError("dataset is not standardized")
    idx = _stats_columns(ds, stats)
    sd = np.sqrt(stats.variances)
    sd = np.where(sd == 0.0, 1.0, sd)
    x = np.array(ds.features)
    x[:, idx] = x[:, idx] * sd + stats.means
    return Dataset(ds.schema, x, ds.labels, ds.institution, standardized=False)


def save_stats(stats: ColumnStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True))


def load_stats(path) -> ColumnStats:
    return ColumnStats.from_dict(json.loads(Path(path).read_text()))


# --- synthetic institutions -------------------------------------------------


@dataclass(frozen=True)
class InstitutionSpec:
    """Class-conditional Gaussians on the continuous columns of one site."""

    name: str
    n: int
    control_mean: tuple
    case_mean: tuple
    scale: tuple  # per-column standard deviation, shared by both classes
    case_ratio: float = 0.08


@dataclass(frozen=True)
class SyntheticSpec:
    institutions: tuple
    n_binary: int = 0
    binary_rate: float = 0.3
    binary_effect: float = 0.5  # log-odds shift of binary columns for cases

    @property
    def n_continuous(self) -> int:
        return len(self.institutions[0].control_mean)

    @property
    def schema(self) -> ColumnSchema:
        return ColumnSchema.from_counts(self.n_binary, self.n_continuous)


def separator_directions(angles_deg: Sequence[float], n_continuous: int) -> np.ndarray:
    """Unit separator normals, one per angle.

    Direction ``i`` is ``cos(a_i) e_0 + sin(a_i) e_{i+1}``, so every direction
    makes angle ``a_i`` with the reference axis and angles of 90 degrees give
    mutually orthogonal separators.
    """
    angles = np.radians(np.asarray(angles_deg, dtype=np.float64))
    if np.any(angles < 0) or np.any(angles > np.pi + 1e-12):
        raise ConfigError("angles must lie in [0, 180] degrees", "angles")
    if n_continuous < len(angles) + 1:
        raise ConfigError(f"need at least {len(angles) + 1} continuous columns for {len(angles)} angles", "n_continuous")
    out = np.zeros((len(angles), n_continuous))
    for i, a in enumerate(angles):
        out[i, 0] = np.cos(a)
        out[i, i + 1] = np.sin(a)
    return out


def angle_task(
    angles_deg: Sequence[float],
    sizes: Sequence[int],
    n_continuous: int = 6,
    n_binary: int = 2,
    separation: float = 2.5,
    case_ratio: float = 0.08,
    site_shift: float = 0.0,
    seed: int = 0,
) -> SyntheticSpec:
    """Institutions whose optimal separators point along the requested angles.

    Unit-variance isotropic classes make the optimal normal equal to the
    mean difference.  ``site_shift`` moves each institution's cloud by that
    distance along a seeded random direction.
    """
    if len(sizes) != len(angles_deg):
        raise ConfigError("one size per angle", "sizes")
    dirs = separator_directions(angles_deg, n_continuous)
    rng = np.random.default_rng(seed)
    insts = []
    for i, (d, n) in enumerate(zip(dirs, sizes)):
        offset = np.zeros(n_continuous)
        if site_shift:
            v = rng.standard_normal(n_continuous)
            offset = site_shift * v / np.linalg.norm(v)
        control = offset - 0.5 * separation * d
        case = offset + 0.5 * separation * d
        insts.append(InstitutionSpec(
            f"site {i + 1}", int(n), tuple(control), tuple(case), (1.0,) * n_continuous, case_ratio,
        ))
    return SyntheticSpec(tuple(insts), n_binary=n_binary)


def gen_synthetic(spec: SyntheticSpec, seed: int = 0) -> list[Dataset]:
    """Draw one raw dataset per institution; each site uses its own stream."""
    schema = spec.schema
    nb = spec.n_binary
    base = math.log(spec.binary_rate / (1.0 - spec.binary_rate))
    out = []
    for k, inst in enumerate(spec.institutions):
        scale = np.asarray(inst.scale, dtype=np.float64)
        c0 = np.asarray(inst.control_mean, dtype=np.float64)
        c1 = np.asarray(inst.case_mean, dtype=np.float64)
        if scale.shape != c0.shape or c1.shape != c0.shape:
            raise ConfigError(f"{inst.name}: mean and scale dimensions differ", "institutions")
        if np.any(~np.isfinite(scale)) or np.any(scale <= 0):
            raise ConfigError(f"{inst.name}: degenerate covariance", "scale")
        if not 0.0 < inst.case_ratio < 1.0:
            raise ConfigError(f"{inst.name}: case ratio must be in (0, 1)", "case_ratio")
        rng = np.random.default_rng([seed, k])
        y = (rng.random(inst.n) < inst.case_ratio).astype(np.int64)
        cont = rng.standard_normal((inst.n, c0.size)) * scale + np.where(y[:, None] == 1, c1, c0)
        logit = base + spec.binary_effect * y[:, None]
        prob = 1.0 / (1.0 + np.exp(-logit))
        binary = (rng.random((inst.n, nb)) < prob).astype(np.float64)
        out.append(Dataset(schema, np.hstack([binary, cont]), y, inst.name))
    return out
