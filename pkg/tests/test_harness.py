import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy.stats import norm

from constraint_uq.calib import calibration_report
from constraint_uq.errors import DataError
from constraint_uq.harness import cli
from constraint_uq.harness import pipeline as pl
from constraint_uq.harness.config import ExperimentConfig, load_config
from constraint_uq.harness.data import load_csv, split_dataset, split_sizes, write_csv
from constraint_uq.harness.synthetic import GENERATORS, SyntheticTaskSpec, generate, true_constraints

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "data": {"generator": "misspecified-shift", "n": 200, "noise": 0.1, "severity": 0.5},
    "model": {"hidden": [8]},
    "train": {"epochs": 2, "lr": 0.01, "batch": 64, "samples": 5},
    "seeds": [0, 1],
}


def write_cfg(tmp_path, overrides=None, name="cfg.yaml"):
    raw = json.loads(json.dumps(TINY))
    for k, v in (overrides or {}).items():
        if isinstance(v, dict):
            raw.setdefault(k, {}).update(v)
        else:
            raw[k] = v
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.train.epochs == 500 and cfg.train.lr == 1e-3 and cfg.train.batch == 128
        assert cfg.train.samples == 50 and cfg.model.hidden == [256] * 4 and len(cfg.seeds) == 5
        assert (cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma, cfg.loss.lam) == (1.0, 0.1, 10.0, 0.5)
        assert cfg.knowledge.sim_threshold == 0.85 and cfg.train.relinearize_every == 10

    def test_relative_paths(self):
        cfg = load_config(ROOT / "configs" / "conservation" / "conservation.yaml")
        assert Path(cfg.knowledge.graph).is_absolute() and Path(cfg.knowledge.graph).exists()

    @pytest.mark.parametrize("text,msg", [
        ("train: {epochz: 3}\n", "unknown config key"),
        ("constraints: nowhere.dsl\n", "does not exist"),
        ("train: {lr: 0}\n", "lr"),
        ("data: {source: sql}\n", "data.source"),
        ("eval: {severities: [0.5, 2]}\n", "severities"),
        ("seeds: []\n", "seed"),
        ("train: [1, 2]\n", "mapping"),
        ("data: {generator: spiral}\n", "unknown generator"),
        ("a: [\n", "malformed YAML"),
    ])
    def test_errors(self, tmp_path, text, msg):
        (tmp_path / "c.yaml").write_text(text)
        with pytest.raises(DataError, match=msg):
            load_config(tmp_path / "c.yaml")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_config(tmp_path / "nope.yaml")

    def test_toggle_independence(self):
        cfg = ExperimentConfig().with_toggles(use_csl=False)
        assert not cfg.toggles.use_csl and cfg.toggles.use_adjustment and cfg.toggles.use_bayesian


class TestData:
    def make_csv(self, path, n=100, weight=False):
        rng = np.random.default_rng(0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x0", "x1", "y0"] + (["weight"] if weight else []))
            for i in range(n):
                w.writerow([rng.normal(), rng.normal(), rng.normal()] + ([i % 3] if weight else []))

    def test_split_80_10_10(self, tmp_path):
        self.make_csv(tmp_path / "d.csv")
        ds = load_csv(tmp_path / "d.csv")
        sp = split_dataset(ds, 0)
        assert (len(sp.train), len(sp.val), len(sp.test)) == (80, 10, 10)
        assert split_sizes(1000) == (800, 100, 100)
        rows = np.concatenate([sp.train.X, sp.val.X, sp.test.X])
        assert len(np.unique(rows, axis=0)) == 100

    def test_split_is_seeded(self, tmp_path):
        self.make_csv(tmp_path / "d.csv")
        ds = load_csv(tmp_path / "d.csv")
        assert np.array_equal(split_dataset(ds, 3).test.X, split_dataset(ds, 3).test.X)
        assert not np.array_equal(split_dataset(ds, 3).test.X, split_dataset(ds, 4).test.X)

    def test_uniform_weights_by_default(self, tmp_path):
        self.make_csv(tmp_path / "d.csv")
        assert np.array_equal(load_csv(tmp_path / "d.csv").W, np.ones(100))
        self.make_csv(tmp_path / "w.csv", weight=True)
        ds = load_csv(tmp_path / "w.csv")
        assert ds.W[:3].tolist() == [0.0, 1.0, 2.0] and ds.X.shape == (100, 2)

    def test_round_trip(self, tmp_path):
        self.make_csv(tmp_path / "d.csv", weight=True)
        ds = load_csv(tmp_path / "d.csv")
        write_csv(tmp_path / "e.csv", ds)
        again = load_csv(tmp_path / "e.csv")
        assert np.array_equal(ds.X, again.X) and np.array_equal(ds.Y, again.Y) and np.array_equal(ds.W, again.W)

    def test_malformed_cell_location(self, tmp_path):
        (tmp_path / "d.csv").write_text("x0,y0\n1,2\n3,abc\n")
        with pytest.raises(DataError, match=r"row 3, column 'y0'"):
            load_csv(tmp_path / "d.csv")

    def test_missing_column(self, tmp_path):
        (tmp_path / "d.csv").write_text("x0,y0\n1,2\n")
        with pytest.raises(DataError, match="missing column 'y9'"):
            load_csv(tmp_path / "d.csv", targets=["y9"])

    def test_ragged_row(self, tmp_path):
        (tmp_path / "d.csv").write_text("x0,y0\n1,2\n3\n")
        with pytest.raises(DataError, match="row 3"):
            load_csv(tmp_path / "d.csv")


class TestSynthetic:
    @pytest.mark.parametrize("gen", GENERATORS)
    def test_targets_satisfy_true_constraints(self, gen):
        for s in (0.0, 1.0):
            X, Y = generate(SyntheticTaskSpec(gen, n=500, d_x=3, noise=0.1), severity=s)
            cs = true_constraints(gen)
            assert all(c.satisfied(y, atol=1e-9) for c in cs for y in Y)

    def test_zero_severity_is_in_distribution(self):
        spec = SyntheticTaskSpec(n=50)
        a, b = generate(spec, 0.0), generate(spec, 0.0)
        assert np.array_equal(a[0], b[0]) and np.abs(a[0]).max() <= 1.0
        assert np.abs(generate(spec, 1.0)[0]).max() > 1.0

    def test_shift_reuses_base_draws(self):
        spec = SyntheticTaskSpec(n=50, shift_scale=2.0)
        np.testing.assert_array_equal(generate(spec, 0.5)[0], 2.0 * generate(spec, 0.0)[0])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    cfg = load_config(write_cfg(d))
    task = pl.load_task(cfg)
    return cfg, task


class TestPipeline:
    def test_smoke_train(self, tiny):
        cfg, task = tiny
        tm = pl.train(cfg, task, 0)
        assert len(tm.log_rows) == 2 and all(np.isfinite(r["loss"]) for r in tm.log_rows)
        assert tm.log_rows[0]["projection_events"] >= 0

    def test_deterministic_training(self, tiny):
        cfg, task = tiny
        a, b = pl.train(cfg, task, 1), pl.train(cfg, task, 1)
        assert np.array_equal(a.model.mu, b.model.mu) and np.array_equal(a.model.rho, b.model.rho)
        assert a.log_rows == b.log_rows

    def test_no_csl_has_no_projection_events(self, tiny):
        cfg, task = tiny
        tm = pl.train(cfg.with_toggles(use_csl=False), task, 0)
        assert all(r["projection_events"] == 0 for r in tm.log_rows)
        ev = pl.evaluate(cfg.with_toggles(use_csl=False), tm, task.split.test, 0)
        assert ev.batch is None and np.array_equal(ev.pred.final_mean, ev.pred.mean)

    def test_no_bayesian_has_zero_epistemic(self, tiny):
        cfg, task = tiny
        c = cfg.with_toggles(use_bayesian=False)
        ev = pl.evaluate(c, pl.train(c, task, 0), task.split.test, 0)
        assert not ev.pred.epistemic_var.any()

    def test_projected_outputs_satisfy_hard_constraints(self, tiny):
        cfg, task = tiny
        ev = pl.evaluate(cfg, pl.train(cfg, task, 0), task.split.test, 0)
        assert ev.report.csr == 100.0 and ev.report.avm <= 1e-6

    def test_oracle_predictions(self, tiny):
        cfg, task = tiny
        te = task.split.test
        rep = calibration_report(te.Y, np.full(te.Y.shape, 0.01), te.Y, task.constraints, te.X)
        assert rep.rmse == 0.0 and rep.r2 == 1.0 and rep.csr == 100.0 and rep.avm == 0.0

    def test_adjustment_only_changes_variance(self, tiny):
        cfg, task = tiny
        tm = pl.train(cfg, task, 0)
        a = pl.evaluate(cfg, tm, task.split.test, 0)
        b = pl.evaluate(cfg.with_toggles(use_adjustment=False), tm, task.split.test, 0)
        assert np.array_equal(a.pred.final_mean, b.pred.final_mean)
        assert np.all(a.pred.final_var >= b.pred.final_var)
        assert np.array_equal(b.pred.final_var, b.pred.total_var)

    def test_checkpoint_mismatch(self, tiny, tmp_path):
        cfg, task = tiny
        tm = pl.train(cfg, task, 0)
        other = pl.load_task(load_config(write_cfg(tmp_path, {"data": {"generator": "conservation-sum"}})))
        with pytest.raises(DataError, match="mismatch"):
            pl.from_checkpoint(tm.model, other)

    def test_severity_zero_matches_evaluate(self, tiny):
        cfg, task = tiny
        sweep = pl.run_shift_sweep(cfg, [0.0], task)
        tm = pl.train(cfg, task, 0)
        in_dist = pl.test_set_at(cfg, task, 0.0)
        ece0 = pl.evaluate(cfg, tm, in_dist, 0).report.ece
        got = [r["ece"] for r in sweep.runs if r["config"] == "full" and r["seed"] == 0]
        assert got == [ece0]


def recompute(pred_csv, levels, bins=10):
    """Metrics from predictions.csv alone: own interval rule, own binning, own NLL."""
    rows = read_csv(pred_csv)
    d = sum(1 for k in rows[0] if k.startswith("y_true"))
    col = lambda name: np.array([[float(r[f"{name}{k}"]) for k in range(d)] for r in rows])
    y, mu, var = col("y_true"), col("y_proj"), col("var_adj")
    conf, hit = [], []
    for i in range(len(y)):
        for k in range(d):
            for q in levels:
                half = norm.ppf(0.5 + q / 2) * np.sqrt(var[i, k])
                conf.append(q)
                hit.append(1.0 if abs(y[i, k] - mu[i, k]) <= half else 0.0)
    conf, hit = np.array(conf), np.array(hit)
    e = 0.0
    for m in range(bins):
        sel = (conf > m / bins) & (conf <= (m + 1) / bins) if m else (conf <= 1 / bins)
        if sel.any():
            e += sel.sum() / len(conf) * abs(hit[sel].mean() - conf[sel].mean())
    nll = float(np.mean(np.sum(0.5 * np.log(2 * np.pi * var) + (y - mu) ** 2 / (2 * var), axis=1)))
    rmse = float(np.sqrt(np.mean((y - mu) ** 2)))
    mae = float(np.mean(np.abs(y - mu)))
    r2 = 1 - np.sum((y - mu) ** 2) / np.sum((y - y.mean(axis=0)) ** 2)
    inside = np.all((mu >= -1 - 1e-6) & (mu <= 1 + 1e-6), axis=1)  # the task's box
    return {"ece": e, "nll": nll, "rmse": rmse, "mae": mae, "r2": r2, "csr": 100.0 * inside.mean()}


class TestCLI:
    def run(self, *args):
        return cli.main([str(a) for a in args])

    def test_train_evaluate_and_recompute(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert self.run("train", "--config", cfg, "--out", tmp_path / "t") == 0
        assert (tmp_path / "t" / "checkpoint.json").exists()
        log = read_csv(tmp_path / "t" / "train_log.csv")
        assert len(log) == 2 and list(log[0]) == list(pl.LOG_COLUMNS)
        assert self.run("evaluate", "--config", cfg, "--checkpoint", tmp_path / "t" / "checkpoint.json",
                        "--out", tmp_path / "e") == 0
        report = json.loads((tmp_path / "e" / "report.json").read_text())
        mine = recompute(tmp_path / "e" / "predictions.csv", load_config(cfg).eval.levels)
        for k, v in mine.items():
            assert report["metrics"][k] == pytest.approx(v, rel=0, abs=1e-10), k
        rel = read_csv(tmp_path / "e" / "reliability.csv")
        assert len(rel) == 10 and sum(int(r["count"]) for r in rel) == report["n_test"] * 2 * 10

    def test_evaluate_without_checkpoint_trains(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert self.run("evaluate", "--config", cfg, "--out", tmp_path / "e") == 0
        pred = read_csv(tmp_path / "e" / "predictions.csv")
        assert len(pred) == 20 and "active" in pred[0]

    def test_extract_with_and_without_gold(self, tmp_path):
        src = ROOT / "configs" / "conservation" / "conservation.yaml"
        assert self.run("extract", "--config", src, "--out", tmp_path / "a") == 0
        rep = json.loads((tmp_path / "a" / "extraction_report.json").read_text())
        assert rep["metrics"]["f1"] == 1.0 and rep["n_extracted"] == 2
        raw = yaml.safe_load(src.read_text())
        del raw["knowledge"]["gold"]
        for k in ("graph", "templates"):
            raw["knowledge"][k] = str(src.parent / raw["knowledge"][k])
        raw["constraints"] = str(src.parent / raw["constraints"])
        (tmp_path / "ng.yaml").write_text(yaml.safe_dump(raw))
        assert self.run("extract", "--config", tmp_path / "ng.yaml", "--out", tmp_path / "b") == 0
        assert "metrics" not in json.loads((tmp_path / "b" / "extraction_report.json").read_text())
        assert (tmp_path / "b" / "constraints.dsl").read_text() == (tmp_path / "a" / "constraints.dsl").read_text()

    def test_extract_empty_graph(self, tmp_path, caplog):
        src = ROOT / "configs" / "conservation"
        (tmp_path / "g.jsonl").write_text("")
        raw = {"data": {"generator": "conservation-sum", "n": 100, "d_x": 3},
               "knowledge": {"graph": "g.jsonl", "templates": str(src / "templates.json")}}
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(raw))
        assert self.run("extract", "--config", tmp_path / "c.yaml", "--out", tmp_path / "o") == 0
        assert (tmp_path / "o" / "constraints.dsl").read_text().strip() == ""
        assert "empty" in caplog.text

    def test_ablate_and_sweep_outputs(self, tmp_path):
        cfg = write_cfg(tmp_path, {"seeds": [0]})
        assert self.run("ablate", "--config", cfg, "--out", tmp_path / "a") == 0
        table = read_csv(tmp_path / "a" / "ablation.csv")
        assert [r["config"] for r in table] == [n for n, _ in pl.ABLATIONS]
        assert {"ece_mean", "ece_std", "csr_mean", "rmse_mean"} <= set(table[0])
        nb = read_csv(tmp_path / "a" / "samples" / "no-bayesian_seed0.csv")
        assert all(float(r["var_epi0"]) == 0.0 and float(r["var_epi1"]) == 0.0 for r in nb)
        assert self.run("shift-sweep", "--config", cfg, "--severities", "0", "1", "--out", tmp_path / "s") == 0
        sweep = read_csv(tmp_path / "s" / "shift_sweep.csv")
        assert [(r["config"], float(r["severity"])) for r in sweep] == [
            ("full", 0.0), ("full", 1.0), ("no-csl-no-adjustment", 0.0), ("no-csl-no-adjustment", 1.0)]

    def test_explain(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert self.run("explain", "--config", cfg, "--out", tmp_path / "x") == 0
        rep = json.loads((tmp_path / "x" / "explain_report.json").read_text())
        assert rep["coverage"] == 1.0
        for line in (tmp_path / "x" / "explanations.jsonl").read_text().splitlines():
            rec = json.loads(line)
            assert rec["explanations"] and all("adjusted from" in e["text"] for e in rec["explanations"])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_exit_codes(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        assert self.run("extract", "--config", tmp_path / "missing.yaml", "--out", tmp_path / "o") == cli.EXIT_DATA
        assert self.run("extract", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_DATA  # no graph
        assert self.run("shift-sweep", "--config", cfg, "--severities", "1.5", "--out", tmp_path / "o") == cli.EXIT_USAGE
        with pytest.raises(SystemExit) as e:
            self.run("train", "--config", cfg)
        assert e.value.code == cli.EXIT_USAGE
        with pytest.raises(SystemExit) as e:
            self.run("fly")
        assert e.value.code == cli.EXIT_USAGE
        (tmp_path / "d.csv").write_text("x0,y0\n" + "".join(f"{i},1e300\n" for i in range(30)))
        bad = write_cfg(tmp_path, {"data": {"source": "csv", "path": str(tmp_path / "d.csv")}}, "bad.yaml")
        assert self.run("train", "--config", bad, "--out", tmp_path / "o") == cli.EXIT_NUMERICAL
        err = capsys.readouterr().err
        assert "numerical failure" in err and "data error" in err

    def test_bad_checkpoint_is_data_error(self, tmp_path):
        cfg = write_cfg(tmp_path)
        (tmp_path / "ck.json").write_text("{}")
        assert self.run("evaluate", "--config", cfg, "--checkpoint", tmp_path / "ck.json",
                        "--out", tmp_path / "o") == cli.EXIT_DATA

    def test_console_script_runs(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "constraint_uq.harness.cli", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "shift-sweep" in r.stdout
