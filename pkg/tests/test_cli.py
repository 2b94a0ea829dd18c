import csv
import hashlib
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from reviewlearn.cli import main
from reviewlearn.data import write_csv
from reviewlearn.errors import ConfigError
from reviewlearn.loop import HyperParams
from reviewlearn.metrics import mean_se
from reviewlearn.nn import Mlp
from reviewlearn.pipeline import ExperimentConfig, cmd_evaluate, cmd_prepare, cmd_train, load_prepared, read_metrics
from reviewlearn.trainers import RunRecord, Visit, global_stats
from scenarios import sites_for

TINY_HYPER = {"max_epochs": 3, "hidden": [16], "n_generated": 64, "extraction_steps": 100, "patience": 5}


def config(tmp_path, **over):
    d = {
        "data": {"source": "synthetic", "mode": "angles", "angles": [0, 90, 90], "sizes": [600, 500, 400],
                 "case_ratio": 0.15, "seed": 0},
        "algorithms": ["rl", "tl", "ll", "cds"],
        "orders": ["asc", "desc"],
        "seeds": [0, 1],
        "hyper": TINY_HYPER,
        "output_dir": str(tmp_path / "out"),
    }
    d.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return path


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digests(root: Path, sub: str = "") -> dict:
    base = root / sub if sub else root
    return {str(p.relative_to(root)): digest(p) for p in sorted(base.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg_path = config(tmp)
    assert main(["all", "--config", str(cfg_path)]) == 0
    return ExperimentConfig.load(cfg_path), cfg_path


class TestPrepare:
    def test_file_counts(self, full_run):
        cfg, _ = full_run
        splits = sorted((cfg.prepare_dir / "institutions").rglob("*.csv"))
        assert len(splits) == 9
        shared = sorted(p.name for p in (cfg.prepare_dir / "shared").iterdir())
        assert shared == ["assignment.json", "stats.json"]

    def test_stats_are_merged_local_stats(self, full_run):
        cfg, _ = full_run
        insts, g = load_prepared(cfg)
        ref = global_stats(insts)
        np.testing.assert_allclose(g.means, ref.means, rtol=1e-12)
        np.testing.assert_allclose(g.variances, ref.variances, rtol=1e-12)

    def test_rerun_byte_identical(self, full_run, tmp_path):
        cfg, _ = full_run
        before = tree_digests(cfg.prepare_dir)
        again = ExperimentConfig.from_dict({**json.loads(Path(full_run[1]).read_text()), "output_dir": str(tmp_path)})
        cmd_prepare(again)
        assert tree_digests(again.prepare_dir) == before

    def test_privacy_with_cds_rejected_before_work(self, tmp_path, capsys):
        path = config(tmp_path, privacy=True)
        assert main(["prepare", "--config", str(path)]) == 2
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith("ERROR ")
        doc = json.loads(err[len("ERROR "):])
        assert doc["error"] == "ConfigError" and doc["field"] == "algorithms"
        assert not (tmp_path / "out").exists()

    def test_csv_source_with_data_root(self, tmp_path, monkeypatch):
        sites = sites_for([0, 90], [300, 200], 3, case_ratio=0.2)
        data = tmp_path / "data"
        for s in sites:
            write_csv(s, data / f"{s.institution.replace(' ', '_')}.csv")
        schema = [{"name": c.name, "kind": c.kind} for c in sites[0].schema.columns]
        d = {"data": {"source": "csv", "schema": schema,
                      "institutions": {"site a": "local_2.csv", "site b": "local_1.csv"}},
             "algorithms": ["ll"], "seeds": [0], "hyper": TINY_HYPER, "output_dir": str(tmp_path / "out")}
        (tmp_path / "c.json").write_text(json.dumps(d))
        monkeypatch.setenv("REVIEWLEARN_DATA_ROOT", str(data))
        assert main(["prepare", "--config", str(tmp_path / "c.json")]) == 0
        cfg = ExperimentConfig.load(tmp_path / "c.json")
        insts, _ = load_prepared(cfg)
        # renamed by descending size: site b (300 rows) becomes local 1
        assert [i.name for i in insts] == ["local 1", "local 2"]
        assert sum(i.train.n_rows + i.val.n_rows + i.test.n_rows for i in insts[:1]) == 300
        monkeypatch.delenv("REVIEWLEARN_DATA_ROOT")
        other = tmp_path / "elsewhere"
        assert main(["prepare", "--config", str(tmp_path / "c.json"), "--data-root", str(other)]) == 1


class TestTrain:
    def test_ll_one_seed_three_checkpoints(self, tmp_path):
        path = config(tmp_path, algorithms=["ll"], seeds=[0])
        assert main(["prepare", "--config", str(path)]) == 0
        assert main(["train", "--config", str(path)]) == 0
        cfg = ExperimentConfig.load(path)
        runs = list(cfg.runs_dir.iterdir())
        assert [r.name for r in runs] == ["ll_none_seed0"]
        assert len(list(runs[0].glob("visit*.json"))) == 3

    def test_twenty_run_records(self, tmp_path):
        hyper = {**TINY_HYPER, "max_epochs": 1}
        path = config(tmp_path, algorithms=["rl", "tl"], seeds=[0, 1, 2, 3, 4], hyper=hyper)
        assert main(["prepare", "--config", str(path)]) == 0
        assert main(["train", "--config", str(path), "--jobs", "2"]) == 0
        cfg = ExperimentConfig.load(path)
        records = [RunRecord.load(d) for d in sorted(cfg.runs_dir.iterdir())]
        assert len(records) == 20
        assert {(r.algorithm, r.order) for r in records} == {("rl", "asc"), ("rl", "desc"), ("tl", "asc"), ("tl", "desc")}
        assert all(len(r.visits) == 3 for r in records)

    def test_resume_after_interruption(self, tmp_path, monkeypatch):
        path = config(tmp_path, algorithms=["rl"], orders=["desc"], seeds=[0])
        cfg = ExperimentConfig.load(path)
        cmd_prepare(cfg)
        real = RunRecord.save_visit

        def crash_on_second(self, directory, i):
            real(self, directory, i)
            if i == 1:
                raise KeyboardInterrupt

        monkeypatch.setattr(RunRecord, "save_visit", crash_on_second)
        with pytest.raises(KeyboardInterrupt):
            cmd_train(cfg)
        monkeypatch.setattr(RunRecord, "save_visit", real)
        run = cfg.runs_dir / "rl_desc_seed0"
        done = {p.name: (digest(p), p.stat().st_mtime_ns) for p in run.glob("visit*.json")}
        assert sorted(done) == ["visit01_local_1.json", "visit02_local_2.json"]
        cmd_train(cfg)
        for name, (sha, mtime) in done.items():
            assert digest(run / name) == sha
            assert (run / name).stat().st_mtime_ns == mtime  # not rewritten
        # identical to an uninterrupted run
        clean = ExperimentConfig.from_dict({**json.loads(path.read_text()), "output_dir": str(tmp_path / "clean")})
        cmd_prepare(clean)
        cmd_train(clean)
        assert tree_digests(run) == tree_digests(clean.runs_dir / "rl_desc_seed0")

    def test_missing_prepare(self, tmp_path, capsys):
        path = config(tmp_path)
        assert main(["train", "--config", str(path)]) == 2
        assert "prepare" in capsys.readouterr().err


class TestEvaluate:
    def test_flat_table(self, full_run):
        cfg, _ = full_run
        rows = read_metrics(cfg.eval_dir / "metrics.csv")
        with (cfg.eval_dir / "metrics.csv").open() as fh:
            header = next(csv.reader(fh))
        assert header == ["algorithm", "order", "seed", "visit", "model_institution", "eval_set", "n", "auroc", "mcc", "threshold"]
        # rl/tl x 2 orders x 3 visits + ll 3 + cds 1 = 16 checkpoints per seed, 4 eval sets each
        assert len(rows) == 2 * 16 * 4
        keys = {(r["algorithm"], r["order"], r["seed"], r["visit"], r["eval_set"]) for r in rows}
        assert len(keys) == len(rows)

    def test_grid_shape(self, full_run):
        cfg, _ = full_run
        rows = [r for r in read_metrics(cfg.eval_dir / "metrics.csv")
                if r["algorithm"] == "tl" and r["order"] == "asc" and r["seed"] == 0 and r["eval_set"] != "global"]
        grid = {(r["visit"], r["eval_set"]) for r in rows}
        assert len(grid) == 3 * 3

    def test_summary_recomputation(self, full_run):
        cfg, _ = full_run
        rows = read_metrics(cfg.eval_dir / "metrics.csv")
        summary = json.loads((cfg.eval_dir / "summary.json").read_text())
        for s in summary["scores"]:
            vals = [r for r in rows if (r["algorithm"], r["order"], r["visit"], r["eval_set"]) ==
                    (s["algorithm"], s["order"], s["visit"], s["eval_set"])]
            assert len(vals) == s["n_seeds"] == 2
            aucs = np.array([r["auroc"] for r in vals])
            m = aucs.mean()
            se = aucs.std(ddof=1) / math.sqrt(2)
            assert s["auroc_mean"] == pytest.approx(m, abs=1e-12)
            assert s["auroc_se"] == pytest.approx(se, abs=1e-12)
            mm, mse = mean_se([r["mcc"] for r in vals])
            assert s["mcc_mean"] == pytest.approx(mm, abs=1e-12)

    def test_constant_model_global_half(self, full_run, tmp_path):
        cfg, cfg_path = full_run
        d = {**json.loads(Path(cfg_path).read_text()), "output_dir": str(tmp_path), "algorithms": ["ll"], "seeds": [0]}
        c = ExperimentConfig.from_dict(d)
        cmd_prepare(c)
        insts, stats = load_prepared(c)
        n_in = len(insts[0].train.schema)
        flat = Mlp((np.zeros((4, n_in)), np.zeros((1, 4))), (np.zeros(4), np.zeros(1)))
        rec = RunRecord("ll", "none", 0, c.hyper, [Visit(i.name, flat, stats, [0.5]) for i in insts])
        for i in range(3):
            rec.save_visit(c.runs_dir / "ll_none_seed0", i)
        rows = cmd_evaluate(c)
        glob = [r for r in rows if r["eval_set"] == "global"]
        assert len(glob) == 3 and all(r["auroc"] == 0.5 for r in glob)


class TestReport:
    def read(self, path):
        with path.open() as fh:
            return list(csv.DictReader(fh))

    def test_four_trajectories_and_join(self, full_run):
        cfg, _ = full_run
        traj = self.read(cfg.report_dir / "global_auroc_by_visit.csv")
        assert len({(r["algorithm"], r["order"]) for r in traj}) == 4
        flat = read_metrics(cfg.eval_dir / "metrics.csv")
        for r in traj:
            vals = [f["auroc"] for f in flat if f["eval_set"] == "global" and f["algorithm"] == r["algorithm"]
                    and f["order"] == r["order"] and f["visit"] == int(r["visit"])]
            assert float(r["auroc_mean"]) == pytest.approx(np.mean(vals), abs=1e-12)

    def test_grid_labels(self, full_run):
        cfg, _ = full_run
        for algo in ("rl", "tl"):
            for order in ("asc", "desc"):
                with (cfg.report_dir / f"local_mcc_grid_{algo}_{order}.csv").open() as fh:
                    rows = list(csv.reader(fh))
                assert rows[0] == ["model", "local 1", "local 2", "local 3"]
                assert [r[0] for r in rows[1:]] == ["local 1", "local 2", "local 3"]

    def test_grid_values_join(self, full_run):
        cfg, _ = full_run
        flat = read_metrics(cfg.eval_dir / "metrics.csv")
        with (cfg.report_dir / "local_mcc_grid_rl_asc.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            for e in ("local 1", "local 2", "local 3"):
                vals = [f["mcc"] for f in flat if f["algorithm"] == "rl" and f["order"] == "asc"
                        and f["model_institution"] == r["model"] and f["eval_set"] == e]
                assert float(r[e]) == pytest.approx(np.mean(vals), abs=1e-12)

    def test_baselines(self, full_run):
        cfg, _ = full_run
        base = self.read(cfg.report_dir / "baselines_global_auroc.csv")
        assert {r["algorithm"] for r in base} == {"ll", "cds"}


class TestDriver:
    def test_seed_override_and_exit_codes(self, tmp_path, capsys):
        path = config(tmp_path, algorithms=["ll"])
        assert main(["prepare", "--config", str(path), "--seed", "3", "--algo", "ll"]) == 0
        out = capsys.readouterr().out.strip()
        assert out.startswith(str(tmp_path / "out"))
        assert main(["prepare", "--config", str(path), "--algo", "bogus"]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text('{"data": {"source": "synthetic", "angles": [0]},\n "seeds": [}')
        assert main(["prepare", "--config", str(bad)]) == 2
        doc = json.loads(capsys.readouterr().err.strip().splitlines()[-1][len("ERROR "):])
        assert "bad.json:2" in doc["message"]

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"data": {"source": "synthetic", "angles": [0]}, "seeds": []})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"data": {"source": "synthetic", "angles": [0]}, "wat": 1})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"data": {"source": "synthetic", "mode": "hetero", "n_institutions": 3,
                                                 "angles": [0]}, "algorithms": ["rl"], "privacy": True})
        h = ExperimentConfig.from_dict({"data": {"source": "synthetic", "angles": [0]}, "hyper": {"batch_size": 128}})
        assert h.hyper == HyperParams(batch_size=128)

    def test_module_entry_point(self, tmp_path):
        path = config(tmp_path, algorithms=["ll"], seeds=[0])
        res = subprocess.run([sys.executable, "-m", "reviewlearn", "prepare", "--config", str(path)],
                             capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
