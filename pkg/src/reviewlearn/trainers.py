"""Local, transfer, pooled and review-learning training regimes.

Institutions are passed in "local 1" ... "local n" order (descending size).
``order="desc"`` visits them in that order, ``"asc"`` in reverse.  Sequential
regimes standardize with global statistics merged from per-site summaries;
local learning uses each site's own statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .data import ColumnStats, Dataset, Institution, local_stats, merge_stats, standardize
from .errors import ConfigError, PrivacyError
from .loop import EPOCH_STREAM, EXTRACT_STREAM, FitResult, HyperParams, fit
from .nn import Mlp
from .review import ReviewState, load_bundle, rl_train_on_institution, save_bundle

ALGORITHMS = ("ll", "tl", "cds", "rl")
ORDERS = ("asc", "desc")
MANIFEST = "manifest.json"


@dataclass
class Visit:
    institution: str
    model: Mlp
    stats: ColumnStats
    trail: list
    state: Optional[ReviewState] = None
    lam: Optional[float] = None
    n_train: int = 0


@dataclass
class RunRecord:
    algorithm: str
    order: str
    seed: int
    hyper: HyperParams
    visits: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return run_name(self.algorithm, self.order, self.seed)

    def manifest(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "order": self.order,
            "seed": self.seed,
            "hyper": self.hyper.to_dict(),
            "visits": [
                {"index": i, "institution": v.institution, "checkpoint": visit_file(i, v.institution),
                 "n_train": v.n_train, "lambda": v.lam, "val_auroc_trail": v.trail}
                for i, v in enumerate(self.visits)
            ],
        }

    def save_visit(self, directory, i: int) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        v = self.visits[i]
        path = directory / visit_file(i, v.institution)
        extra = {"institution": v.institution, "trail": v.trail, "lambda": v.lam, "n_train": v.n_train}
        save_bundle(path, v.model, v.state, self.hyper, v.stats, extra)
        (directory / MANIFEST).write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "RunRecord":
        directory = Path(directory)
        m = json.loads((directory / MANIFEST).read_text())
        rec = cls(m["algorithm"], m["order"], int(m["seed"]), HyperParams.from_dict(m["hyper"]))
        for entry in m["visits"]:
            b = load_bundle(directory / entry["checkpoint"])
            ex = b["extra"]
            rec.visits.append(Visit(ex["institution"], b["model"], b["stats"], ex["trail"], b["state"], ex["lambda"], ex["n_train"]))
        return rec


def run_name(algorithm: str, order: str, seed: int) -> str:
    return f"{algorithm}_{order}_seed{seed}"


def visit_file(i: int, institution: str) -> str:
    return f"visit{i + 1:02d}_{institution.replace(' ', '_')}.json"


def visit_order(institutions: Sequence[Institution], order: str) -> list:
    if order not in ORDERS:
        raise ConfigError(f"unknown order {order!r}", "orders")
    return list(institutions) if order == "desc" else list(reversed(institutions))


def global_stats(institutions: Sequence[Institution]) -> ColumnStats:
    """Merge per-site training statistics; no rows are pooled."""
    return merge_stats([local_stats(i.train) for i in institutions])


def _prepared(inst: Institution, stats: ColumnStats):
    return standardize(inst.train, stats), standardize(inst.val, stats)


def _visit_key(seed: int, i: int) -> list:
    return [seed, EPOCH_STREAM, i]


def train_single(model: Mlp, train: Dataset, val: Dataset, hyper: HyperParams, key: Sequence[int]) -> FitResult:
    return fit(model, train, val, hyper, key)


def train_ll(institutions: Sequence[Institution], hyper: HyperParams, seed: int, on_visit: Optional[Callable] = None, done: Sequence[Visit] = ()) -> RunRecord:
    """An isolated model per site, standardized with that site's own statistics."""
    rec = RunRecord("ll", "none", seed, hyper, list(done))
    for i, inst in enumerate(institutions):
        if i < len(rec.visits):
            continue
        stats = local_stats(inst.train)
        tr, va = _prepared(inst, stats)
        res = train_single(hyper.init_model(tr.features.shape[1], seed), tr, va, hyper, _visit_key(seed, i))
        rec.visits.append(Visit(inst.name, res.model, stats, res.trail, n_train=tr.n_rows))
        if on_visit:
            on_visit(rec, i)
    return rec


def train_tl(institutions: Sequence[Institution], hyper: HyperParams, seed: int, order: str = "desc",
             stats: Optional[ColumnStats] = None, on_visit: Optional[Callable] = None, done: Sequence[Visit] = ()) -> RunRecord:
    """Sequential fine-tuning: each visit starts from the previous checkpoint."""
    stats = stats if stats is not None else global_stats(institutions)
    rec = RunRecord("tl", order, seed, hyper, list(done))
    model = rec.visits[-1].model if rec.visits else None
    for i, inst in enumerate(visit_order(institutions, order)):
        if i < len(rec.visits):
            continue
        tr, va = _prepared(inst, stats)
        if model is None:
            model = hyper.init_model(tr.features.shape[1], seed)
        res = train_single(model, tr, va, hyper, _visit_key(seed, i))
        model = res.model
        rec.visits.append(Visit(inst.name, model, stats, res.trail, n_train=tr.n_rows))
        if on_visit:
            on_visit(rec, i)
    return rec


def train_cds(institutions: Sequence[Institution], hyper: HyperParams, seed: int, privacy: bool = False,
              stats: Optional[ColumnStats] = None, on_visit: Optional[Callable] = None, done: Sequence[Visit] = ()) -> RunRecord:
    """Pooled-data upper baseline; refuses privacy-restricted data."""
    if privacy:
        raise PrivacyError("collaborative data sharing pools raw rows and is disabled for privacy-restricted data")
    stats = stats if stats is not None else global_stats(institutions)
    rec = RunRecord("cds", "none", seed, hyper, list(done))
    if rec.visits:
        return rec
    pooled = [_prepared(inst, stats) for inst in institutions]
    tr = Dataset.concat([p[0] for p in pooled], "pooled")
    va = Dataset.concat([p[1] for p in pooled], "pooled")
    res = train_single(hyper.init_model(tr.features.shape[1], seed), tr, va, hyper, _visit_key(seed, 0))
    rec.visits.append(Visit("pooled", res.model, stats, res.trail, n_train=tr.n_rows))
    if on_visit:
        on_visit(rec, 0)
    return rec


def train_rl(institutions: Sequence[Institution], hyper: HyperParams, seed: int, order: str = "desc",
             stats: Optional[ColumnStats] = None, on_visit: Optional[Callable] = None, done: Sequence[Visit] = ()) -> RunRecord:
    """Sequential visits threading the model and its review state."""
    stats = stats if stats is not None else global_stats(institutions)
    rec = RunRecord("rl", order, seed, hyper, list(done))
    if rec.visits:
        model, state = rec.visits[-1].model, rec.visits[-1].state
    else:
        model, state = None, ReviewState.from_hyper(hyper)
    for i, inst in enumerate(visit_order(institutions, order)):
        if i < len(rec.visits):
            continue
        tr, va = _prepared(inst, stats)
        if model is None:
            model = hyper.init_model(tr.features.shape[1], seed)
        out = rl_train_on_institution(model, state, tr, va, hyper, _visit_key(seed, i), [seed, EXTRACT_STREAM, i])
        model, state = out.model, out.state
        rec.visits.append(Visit(inst.name, model, stats, out.fit.trail, state, out.lam, tr.n_rows))
        if on_visit:
            on_visit(rec, i)
    return rec


def train(algorithm: str, institutions: Sequence[Institution], hyper: HyperParams, seed: int, order: str = "desc",
          privacy: bool = False, stats: Optional[ColumnStats] = None, **kw) -> RunRecord:
    if algorithm == "ll":
        return train_ll(institutions, hyper, seed, **kw)
    if algorithm == "tl":
        return train_tl(institutions, hyper, seed, order, stats, **kw)
    if algorithm == "rl":
        return train_rl(institutions, hyper, seed, order, stats, **kw)
    if algorithm == "cds":
        return train_cds(institutions, hyper, seed, privacy, stats, **kw)
    raise ConfigError(f"unknown algorithm {algorithm!r}", "algorithms")
