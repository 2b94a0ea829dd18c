"""Prepare / train / evaluate / report stages over an on-disk experiment tree.

Layout under ``<output_dir>/<data hash>/``::

    prepare/institutions/<site>/{train,val,test}.csv   raw rows, never leave the site
    prepare/shared/stats.json                          local + merged statistics
    prepare/shared/assignment.json                     synthetic sources only
    runs/<hyper hash>/<algo>_<order>_seed<k>/          transfer bundles + manifest
    eval/<selection hash>/{metrics.csv,summary.json}
    report/<selection hash>/*.csv
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (ColumnSchema, ColumnStats, Dataset, Institution, SplitRatios, angle_task, gen_synthetic,
                   ingest_csv, local_stats, make_institutions, merge_stats, standardize, write_csv)
from .errors import ConfigError, PrivacyError
from .hetero import build_heterogeneous_institutions, fit_logreg, local_names, mean_pairwise_angle, order_by_size
from .loop import HyperParams, predict_proba
from .metrics import PredictionSet, mean_se, score
from .trainers import ALGORITHMS, ORDERS, RunRecord, run_name, train

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "REVIEWLEARN_DATA_ROOT"
METRIC_COLUMNS = ["algorithm", "order", "seed", "visit", "model_institution", "eval_set", "n", "auroc", "mcc", "threshold"]
SEQUENTIAL = ("rl", "tl")


@dataclass
class ExperimentConfig:
    data: dict
    algorithms: list = field(default_factory=lambda: ["rl", "tl", "ll", "cds"])
    orders: list = field(default_factory=lambda: ["asc", "desc"])
    seeds: list = field(default_factory=lambda: [0])
    hyper: HyperParams = field(default_factory=HyperParams)
    privacy: bool = False
    output_dir: str = "runs"
    data_root: Optional[str] = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required", "seeds")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {a!r}", "algorithms")
        for o in self.orders:
            if o not in ORDERS:
                raise ConfigError(f"unknown order {o!r}", "orders")
        if self.privacy and "cds" in self.algorithms:
            raise ConfigError("cds pools raw data and cannot run with the privacy flag", "algorithms")
        src = self.data.get("source")
        if src not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'", "data.source")
        if self.privacy and self._hetero():
            raise ConfigError("heterogeneous splitting pools one dataset and cannot run with the privacy flag", "data.mode")
        if src == "synthetic" and self.data.get("mode", "angles") not in ("angles", "hetero"):
            raise ConfigError("data.mode must be 'angles' or 'hetero'", "data.mode")
        if src == "csv" and "schema" not in self.data:
            raise ConfigError("csv sources need a schema", "data.schema")
        if src == "csv" and not ("institutions" in self.data or "path" in self.data):
            raise ConfigError("csv sources need 'institutions' or 'path'", "data.institutions")
        n = self.n_institutions
        if n < 1:
            raise ConfigError("need at least one institution", "data.n_institutions")

    def _hetero(self) -> bool:
        if self.data.get("source") == "csv":
            return "path" in self.data
        return self.data.get("mode", "angles") == "hetero"

    @property
    def n_institutions(self) -> int:
        d = self.data
        if self._hetero():
            return int(d.get("n_institutions", 0))
        if d.get("source") == "csv":
            return len(d.get("institutions", {}))
        return len(d.get("angles", []))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"data", "algorithms", "orders", "seeds", "hyper", "privacy", "output_dir", "data_root"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}", sorted(unknown)[0])
        if "data" not in d or not isinstance(d["data"], dict):
            raise ConfigError("config needs a 'data' object", "data")
        kw = {k: v for k, v in d.items() if k != "hyper"}
        for name in ("algorithms", "orders", "seeds"):
            if name in kw and not isinstance(kw[name], list):
                raise ConfigError(f"{name} must be a list", name)
        kw["seeds"] = [int(s) for s in kw.get("seeds", [0])]
        hyper = d.get("hyper", {})
        if not isinstance(hyper, dict):
            raise ConfigError("hyper must be an object", "hyper")
        try:
            kw["hyper"] = HyperParams.from_dict(hyper)
        except TypeError as exc:
            raise ConfigError(str(exc), "hyper") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}", "config") from None
        return cls.from_dict(d)

    def data_hash(self) -> str:
        return _digest({"data": self.data, "privacy": self.privacy})

    def hyper_hash(self) -> str:
        return _digest(self.hyper.to_dict())

    def selection_hash(self) -> str:
        return _digest({"hyper": self.hyper.to_dict(), "algorithms": sorted(self.algorithms),
                        "orders": sorted(self.orders), "seeds": sorted(self.seeds)})

    @property
    def root(self) -> Path:
        return Path(self.output_dir) / self.data_hash()

    @property
    def prepare_dir(self) -> Path:
        return self.root / "prepare"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs" / self.hyper_hash()

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval" / self.selection_hash()

    @property
    def report_dir(self) -> Path:
        return self.root / "report" / self.selection_hash()

    def run_specs(self) -> list:
        specs = []
        for algo in self.algorithms:
            orders = self.orders if algo in SEQUENTIAL else ["none"]
            for order in orders:
                for seed in self.seeds:
                    specs.append((algo, order, seed))
        return specs


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def site_dir(name: str) -> str:
    return name.replace(" ", "_")


# --- prepare -----------------------------------------------------------------


def _resolve(path: str, cfg: ExperimentConfig) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    root = cfg.data_root or os.environ.get(DATA_ROOT_ENV)
    return Path(root) / p if root else p


def _synthetic_spec(d: dict):
    try:
        return angle_task(
            d["angles"],
            d.get("sizes", [3000] * len(d["angles"])),
            n_continuous=int(d.get("n_continuous", max(6, len(d["angles"]) + 1))),
            n_binary=int(d.get("n_binary", 2)),
            separation=float(d.get("separation", 2.5)),
            case_ratio=float(d.get("case_ratio", 0.08)),
            site_shift=float(d.get("site_shift", 0.0)),
            seed=int(d.get("seed", 0)),
        )
    except KeyError as exc:
        raise ConfigError(f"synthetic data needs {exc.args[0]!r}", f"data.{exc.args[0]}") from None


def _source_datasets(cfg: ExperimentConfig):
    """Raw per-site datasets named 'local 1'... by descending size, plus assignment info."""
    d = cfg.data
    seed = int(d.get("seed", 0))
    assignment = None
    if d["source"] == "synthetic":
        parts = gen_synthetic(_synthetic_spec(d), seed)
        if cfg._hetero():
            pooled = Dataset.concat(parts, "source")
            asg = build_heterogeneous_institutions(pooled, cfg.n_institutions, seed)
            sites = [pooled.subset(np.flatnonzero(asg.institution_of_row == k)).renamed(n) for k, n in enumerate(asg.names)]
            return sites, asg.to_dict()
    else:
        schema = ColumnSchema.from_dict(d["schema"])
        if cfg._hetero():
            pooled = ingest_csv(_resolve(d["path"], cfg), schema, "source")
            asg = build_heterogeneous_institutions(pooled, cfg.n_institutions, seed)
            sites = [pooled.subset(np.flatnonzero(asg.institution_of_row == k)).renamed(n) for k, n in enumerate(asg.names)]
            return sites, asg.to_dict()
        parts = [ingest_csv(_resolve(p, cfg), schema, name) for name, p in d["institutions"].items()]
    order = order_by_size([p.n_rows for p in parts])
    names = local_names(len(parts))
    sites = [parts[k].renamed(names[i]) for i, k in enumerate(order)]
    if d["source"] == "synthetic":
        assignment = _generator_assignment(sites, [parts[k].institution for k in order])
    else:
        assignment = None
    return sites, assignment


def _generator_assignment(sites, origins) -> dict:
    """Measured heterogeneity of generated sites, logistic fits on each site's own z-scores."""
    angle = math.nan
    if len(sites) > 1:
        models = [fit_logreg(standardize(s, local_stats(s)).features, s.labels) for s in sites]
        angle = mean_pairwise_angle(models)
    return {
        "format": "reviewlearn-assignment",
        "version": 1,
        "mean_angle_rad": angle,
        "institutions": [{"name": s.institution, "size": s.n_rows, "generator": o} for s, o in zip(sites, origins)],
    }


def cmd_prepare(cfg: ExperimentConfig) -> dict:
    sites, assignment = _source_datasets(cfg)
    ratios = SplitRatios(*cfg.data.get("split_ratios", (0.7, 0.15, 0.15)))
    split_seed = int(cfg.data.get("seed", 0))
    inst_dir = cfg.prepare_dir / "institutions"
    shared = cfg.prepare_dir / "shared"
    shared.mkdir(parents=True, exist_ok=True)
    entries = []
    local = []
    for inst in make_institutions(sites, ratios, split_seed):
        out = inst_dir / site_dir(inst.name)
        for part in ("train", "val", "test"):
            write_csv(getattr(inst, part), out / f"{part}.csv")
        st = local_stats(inst.train)
        local.append(st)
        entries.append({"name": inst.name, "n_train": inst.train.n_rows, "n_val": inst.val.n_rows,
                        "n_test": inst.test.n_rows, "local": st.to_dict()})
    merged = merge_stats(local)
    stats_doc = {"schema": sites[0].schema.to_dict(), "institutions": entries, "global": merged.to_dict()}
    _write_json(shared / "stats.json", stats_doc)
    if assignment is not None:
        _write_json(shared / "assignment.json", assignment)
    return stats_doc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=1, sort_keys=True) + "\n")


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def load_prepared(cfg: ExperimentConfig):
    """Institutions in 'local 1'... order plus the merged global statistics."""
    stats_path = cfg.prepare_dir / "shared" / "stats.json"
    if not stats_path.exists():
        raise ConfigError(f"{stats_path} not found; run 'prepare' first", "prepare")
    doc = json.loads(stats_path.read_text())
    schema = ColumnSchema.from_dict(doc["schema"])
    insts = []
    for e in doc["institutions"]:
        d = cfg.prepare_dir / "institutions" / site_dir(e["name"])
        parts = [ingest_csv(d / f"{p}.csv", schema, e["name"]) for p in ("train", "val", "test")]
        insts.append(Institution(e["name"], *parts))
    return insts, ColumnStats.from_dict(doc["global"])


# --- train -------------------------------------------------------------------


def _train_one(args):
    algo, order, seed, insts, stats, hyper, privacy, run_dir = args
    run_dir = Path(run_dir)
    done = []
    if (run_dir / "manifest.json").exists():
        done = RunRecord.load(run_dir).visits
        log.info("%s: resuming after %d completed visits", run_dir.name, len(done))

    def persist(rec, i):
        rec.save_visit(run_dir, i)

    rec = train(algo, insts, hyper, seed, order if order != "none" else "desc", privacy, stats,
                on_visit=persist, done=done)
    return rec.name, len(rec.visits)


def cmd_train(cfg: ExperimentConfig, jobs: int = 1) -> list:
    insts, stats = load_prepared(cfg)
    if cfg.privacy and "cds" in cfg.algorithms:
        raise PrivacyError("cds requested with the privacy flag")
    tasks = [(a, o, s, insts, stats, cfg.hyper, cfg.privacy, str(cfg.runs_dir / run_name(a, o, s)))
             for a, o, s in cfg.run_specs()]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_train_one, tasks))
    return [_train_one(t) for t in tasks]


# --- evaluate ----------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else ("inf" if math.isinf(x) else repr(x))
    return str(x)


def cmd_evaluate(cfg: ExperimentConfig) -> list:
    """Score every checkpoint on every site's test split and on their union."""
    insts, _ = load_prepared(cfg)
    rows = []
    for algo, order, seed in cfg.run_specs():
        run_dir = cfg.runs_dir / run_name(algo, order, seed)
        if not (run_dir / "manifest.json").exists():
            raise ConfigError(f"{run_dir} has no run record; run 'train' first", "train")
        rec = RunRecord.load(run_dir)
        for v_idx, visit in enumerate(rec.visits, start=1):
            # each site predicts locally; only (y, p) leave the site
            sets = []
            for inst in insts:
                te = standardize(inst.test, visit.stats)
                sets.append(PredictionSet(te.labels, predict_proba(visit.model, te), inst.name))
            for p in [*sets, PredictionSet.concat(sets, "global")]:
                s = score(p)
                rows.append({"algorithm": algo, "order": order, "seed": seed, "visit": v_idx,
                             "model_institution": visit.institution, "eval_set": p.institution,
                             "n": s.n, "auroc": s.auroc, "mcc": s.mcc, "threshold": s.threshold})
    out = cfg.eval_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", rows)
    _write_json(out / "summary.json", summarize(rows, [i.name for i in insts]))
    return rows


def _write_csv(path: Path, rows, columns=METRIC_COLUMNS) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def read_metrics(path) -> list:
    rows = []
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            for k in ("seed", "visit", "n"):
                r[k] = int(r[k])
            for k in ("auroc", "mcc", "threshold"):
                r[k] = float(r[k])
            rows.append(r)
    return rows


def summarize(rows, names) -> dict:
    groups: dict = {}
    for r in rows:
        key = (r["algorithm"], r["order"], r["visit"], r["model_institution"], r["eval_set"])
        groups.setdefault(key, []).append(r)
    scores = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], _eval_rank(k[4], names))):
        g = groups[key]
        am, ase = mean_se([r["auroc"] for r in g])
        mm, mse = mean_se([r["mcc"] for r in g])
        scores.append({"algorithm": key[0], "order": key[1], "visit": key[2], "model_institution": key[3],
                       "eval_set": key[4], "n_seeds": len(g), "auroc_mean": am, "auroc_se": ase,
                       "mcc_mean": mm, "mcc_se": mse})
    minmax = []
    by_run: dict = {}
    for s in scores:
        if s["eval_set"] == "global":
            by_run.setdefault((s["algorithm"], s["order"]), []).append(s)
    for (algo, order), g in sorted(by_run.items()):
        valid = [s for s in g if not math.isnan(s["auroc_mean"])]
        if not valid:
            continue
        lo = min(valid, key=lambda s: s["auroc_mean"])
        hi = max(valid, key=lambda s: s["auroc_mean"])
        minmax.append({"algorithm": algo, "order": order,
                       "min_auroc_mean": lo["auroc_mean"], "min_auroc_se": lo["auroc_se"], "min_visit": lo["visit"],
                       "max_auroc_mean": hi["auroc_mean"], "max_auroc_se": hi["auroc_se"], "max_visit": hi["visit"]})
    return {"institutions": list(names), "scores": scores, "global_auroc_min_max": minmax}


def _eval_rank(name, names) -> int:
    return names.index(name) if name in names else len(names)


# --- report ------------------------------------------------------------------


def cmd_report(cfg: ExperimentConfig) -> dict:
    """Plot-ready tables: global AUROC by visit and local MCC grids."""
    summary_path = cfg.eval_dir / "summary.json"
    if not summary_path.exists():
        raise ConfigError(f"{summary_path} not found; run 'evaluate' first", "evaluate")
    summary = json.loads(summary_path.read_text())
    names = summary["institutions"]
    scores = [{k: (math.nan if v is None else v) for k, v in s.items()} for s in summary["scores"]]
    out = cfg.report_dir
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    traj_cols = ["algorithm", "order", "visit", "model_institution", "auroc_mean", "auroc_se"]
    traj = [s for s in scores if s["eval_set"] == "global" and s["algorithm"] in SEQUENTIAL]
    _write_csv(out / "global_auroc_by_visit.csv", traj, traj_cols)
    written["global_auroc_by_visit.csv"] = len({(s["algorithm"], s["order"]) for s in traj})
    base = [s for s in scores if s["eval_set"] == "global" and s["algorithm"] not in SEQUENTIAL]
    _write_csv(out / "baselines_global_auroc.csv", base, traj_cols)

    for algo in sorted({s["algorithm"] for s in scores if s["algorithm"] in SEQUENTIAL}):
        for order in sorted({s["order"] for s in scores if s["algorithm"] == algo}):
            cell = {(s["model_institution"], s["eval_set"]): s["mcc_mean"]
                    for s in scores if s["algorithm"] == algo and s["order"] == order}
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["model", *names])
            for m in names:
                w.writerow([m, *[_fmt(cell.get((m, e), math.nan)) for e in names]])
            fname = f"local_mcc_grid_{algo}_{order}.csv"
            (out / fname).write_text(buf.getvalue())
            written[fname] = len(names)
    return written
