"""Experiment building blocks shared by the CLI verbs."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .. import bnn, calib, explain
from .. import extract as ext
from ..csl import BatchProjection, Projector, propagate_uncertainty
from ..errors import DataError, NumericalError
from ..expr import Constraint, dump_constraints, load_constraints, parse_constraints
from .config import ExperimentConfig
from .data import Dataset, Split, load_csv, split_dataset, split_indices
from .synthetic import N_OUTPUTS, base_draws, shift_inputs, targets, true_constraints

log = logging.getLogger(__name__)

ABLATIONS: tuple[tuple[str, dict], ...] = (
    ("full", {}),
    ("no-extraction", {"use_extraction": False}),
    ("no-csl", {"use_csl": False}),
    ("no-adjustment", {"use_adjustment": False}),
    ("no-calibration-loss", {"use_calibration_loss": False}),
    ("no-bayesian", {"use_bayesian": False}),
)
SWEEP_CONFIGS: tuple[tuple[str, dict], ...] = (
    ("full", {}),
    ("no-csl-no-adjustment", {"use_csl": False, "use_adjustment": False}),
)
METRICS = ("ece", "mce", "nll", "csr", "avm", "rmse", "mae", "r2")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Task:
    split: Split
    constraints: list[Constraint]
    d_x: int
    d_y: int
    synthetic: bool = False


def _synthetic_dataset(cfg: ExperimentConfig, rows, severity: float) -> Dataset:
    spec = cfg.data.synthetic_spec()
    X, E = base_draws(spec)
    X, E = X[rows], E[rows]
    Xs = shift_inputs(X, severity, spec.shift_scale)
    Y = targets(spec, Xs, E)
    d_y = Y.shape[1]
    return Dataset(Xs, Y, np.ones(len(Y)), tuple(f"x{j}" for j in range(spec.d_x)), tuple(f"y{k}" for k in range(d_y)))


def load_task(cfg: ExperimentConfig) -> Task:
    """Train/val/test data plus the manual constraint set.

    For synthetic data the test split is shifted by ``data.severity``.
    """
    d = cfg.data
    if d.source == "synthetic":
        tr, va, te = split_indices(d.n, d.split_seed)
        split = Split(_synthetic_dataset(cfg, tr, 0.0), _synthetic_dataset(cfg, va, 0.0),
                      _synthetic_dataset(cfg, te, d.severity))
        d_x, d_y = d.d_x, N_OUTPUTS[d.generator]
    else:
        ds = load_csv(d.path, d.features, d.targets, d.weight)
        split = split_dataset(ds, d.split_seed)
        d_x, d_y = ds.X.shape[1], ds.Y.shape[1]
    if cfg.constraints is not None:
        cons = load_constraints(cfg.constraints, d_y, d_x)
    elif d.source == "synthetic":
        cons = true_constraints(d.generator)
    else:
        cons = []
    return Task(split, cons, d_x, d_y, d.source == "synthetic")


def test_set_at(cfg: ExperimentConfig, task: Task, severity: float) -> Dataset:
    if not task.synthetic:
        if severity != 0.0:
            raise DataError("distribution shift sweeps need a synthetic data source")
        return task.split.test
    _, _, te = split_indices(cfg.data.n, cfg.data.split_seed)
    return _synthetic_dataset(cfg, te, severity)


def run_extraction(cfg: ExperimentConfig, ds: Dataset, d_y: int) -> list[Constraint]:
    k = cfg.knowledge
    if k.graph is None or k.templates is None:
        raise DataError("extraction needs knowledge.graph and knowledge.templates")
    g = ext.load_graph(k.graph)
    if not g.vertices:
        log.warning("knowledge graph %s is empty; nothing to extract", k.graph)
    templates = ext.load_templates(k.templates, g.emb_dim)
    X = ds.X if ds.X.shape[1] else None
    return ext.extract(g, templates, ds.Y, X, ds.W, k.tau_score, k.sim_threshold)


def active_constraints(cfg: ExperimentConfig, task: Task) -> tuple[list[Constraint], list[Constraint]]:
    """(all constraints in use, the extracted subset)."""
    cons = list(task.constraints)
    extracted: list[Constraint] = []
    k = cfg.knowledge
    if cfg.toggles.use_extraction and k.graph is not None and k.templates is not None:
        for c in run_extraction(cfg, task.split.train, task.d_y):
            if not any(c.structurally_equal(o, 1e-9) for o in cons):
                cons.append(c)
                extracted.append(c)
    return cons, extracted


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainedModel:
    model: bnn.VariationalMLP
    x_mean: np.ndarray
    x_std: np.ndarray
    constraints: list[Constraint]
    log_rows: list[dict] = field(default_factory=list)
    extracted: list[Constraint] = field(default_factory=list)

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std


LOG_COLUMNS = ("epoch", "loss", "pred", "elbo", "ece", "constraint", "kl", "projection_events")


def train(cfg: ExperimentConfig, task: Task, seed: int) -> TrainedModel:
    """Minimize the composite loss on the training split; deterministic per seed."""
    tg = cfg.toggles
    cons, extracted = active_constraints(cfg, task)
    tr = task.split.train
    X_raw, Y = tr.X, tr.Y
    N = len(Y)
    if N == 0:
        raise DataError("training split is empty")
    x_mean = X_raw.mean(axis=0) if X_raw.shape[1] else np.zeros(0)
    x_std = X_raw.std(axis=0) if X_raw.shape[1] else np.zeros(0)
    x_std = np.where(x_std > 0, x_std, 1.0)
    Xs = (X_raw - x_mean) / x_std

    sizes = (task.d_x, *cfg.model.hidden, 2 * task.d_y)
    model = bnn.init_model(sizes, cfg.model.prior_sigma, seed, cfg.model.init_std, bayesian=tg.use_bayesian)
    w = cfg.loss.weights()
    if not tg.use_calibration_loss:
        w = dataclasses.replace(w, beta=0.0)
    hard = [c for c in cons if c.hard]
    projector = Projector(hard, task.d_y, cfg.train.max_outer) if hard else None  # validates feasibility
    if not tg.use_csl:
        projector = None
    nonlinear = projector is not None and projector.nonlinear
    anchors = np.full((N, task.d_y), np.nan)
    age = np.full(N, -np.inf)

    rng = np.random.default_rng([seed, 7])
    opt = bnn.Adam(cfg.train.lr)
    rows = []
    it = 0
    B = cfg.train.batch
    for epoch in range(1, cfg.train.epochs + 1):
        perm = rng.permutation(N)
        acc = dict.fromkeys(("loss", "pred", "elbo", "ece", "constraint"), 0.0)
        events = 0
        for start in range(0, N, B):
            idx = perm[start : start + B]
            eps = bnn.draw_noise(model, cfg.train.n_mc_train, rng)
            a = None
            stale = None
            if nonlinear:
                stale = (it - age[idx]) >= cfg.train.relinearize_every
                a = anchors[idx].copy()
                a[stale] = np.nan
            res = calib.total_loss(
                model, Xs[idx], Y[idx], w, cons, eps=eps, n_total=N, use_csl=tg.use_csl,
                projector=projector, anchors=a, levels=cfg.eval.levels, n_bins=cfg.eval.bins,
                coverage_smoothing=cfg.loss.coverage_smoothing, X_raw=X_raw[idx],
            )
            if not (np.isfinite(res.value) and np.all(np.isfinite(res.grad_mu)) and np.all(np.isfinite(res.grad_rho))):
                raise NumericalError(f"non-finite loss at epoch {epoch}, iteration {it} (components {res.components})")
            if nonlinear:
                upd = idx[stale]
                anchors[upd] = res.projected[0][stale]
                age[upd] = it
            if model.bayesian:
                opt.step([model.mu, model.rho], [res.grad_mu, res.grad_rho])
            else:
                opt.step([model.mu], [res.grad_mu])
            frac = len(idx) / N
            acc["loss"] += frac * res.value
            for k in ("pred", "elbo", "ece", "constraint"):
                acc[k] += frac * res.components[k]
            events += res.projection_events
            it += 1
        rows.append({"epoch": epoch, **acc, "kl": bnn.kl_divergence(model), "projection_events": events})
    model.meta = {
        "x_mean": x_mean.tolist(),
        "x_std": x_std.tolist(),
        "constraints": dump_constraints(cons),
        "d_x": task.d_x,
        "toggles": dataclasses.asdict(tg),
        "train_seed": seed,
    }
    return TrainedModel(model, x_mean, x_std, cons, rows, extracted)


def from_checkpoint(model: bnn.VariationalMLP, task: Task) -> TrainedModel:
    meta = model.meta
    try:
        d_x = int(meta["d_x"])
        cons = parse_constraints(meta["constraints"], model.d_y, d_x)
        x_mean = np.asarray(meta["x_mean"], dtype=float)
        x_std = np.asarray(meta["x_std"], dtype=float)
    except KeyError as exc:
        raise DataError(f"checkpoint metadata lacks {exc}") from None
    if d_x != task.d_x or model.d_y != task.d_y or model.d_x != task.d_x:
        raise DataError(
            f"checkpoint/config mismatch: model has d_x={model.d_x}, d_y={model.d_y}; "
            f"data has d_x={task.d_x}, d_y={task.d_y}"
        )
    return TrainedModel(model, x_mean, x_std, cons)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    report: calib.CalibrationReport
    pred: bnn.PredictiveDistribution
    batch: BatchProjection | None
    data: Dataset

    @property
    def metrics(self) -> dict[str, float]:
        return self.report.as_dict()


def predict(cfg: ExperimentConfig, tm: TrainedModel, X_raw, seed: int):
    """Predictive distribution with projection, propagated covariance and adjusted variance."""
    tg = cfg.toggles
    pred = bnn.predict(tm.model, tm.standardize(X_raw), cfg.train.samples, seed)
    hard = [c for c in tm.constraints if c.hard]
    batch = None
    if tg.use_csl and hard:
        projector = Projector(hard, tm.model.d_y, cfg.train.max_outer)
        batch = projector.project_many(pred.mean, X_raw)
        pred.projected_mean = batch.points
        pred.projection_distance2 = batch.distance2
        pred.propagated_cov = np.array([propagate_uncertainty(J, C) for J, C in zip(batch.jacobians, pred.covariance)])
        lam = cfg.loss.lam if tg.use_adjustment else 0.0
        pred.adjusted_var = calib.adjust_variance(pred.total_var, batch.distance2, lam)
    return pred, batch


def evaluate(cfg: ExperimentConfig, tm: TrainedModel, ds: Dataset, seed: int) -> Evaluation:
    pred, batch = predict(cfg, tm, ds.X, seed)
    if not (np.all(np.isfinite(pred.final_mean)) and np.all(np.isfinite(pred.final_var))):
        raise NumericalError("non-finite predictions")
    report = calib.calibration_report(pred.final_mean, pred.final_var, ds.Y, tm.constraints, ds.X,
                                      cfg.eval.levels, cfg.eval.bins)
    return Evaluation(report, pred, batch, ds)


def prediction_rows(ev: Evaluation) -> tuple[list[str], list[list[str]]]:
    """Header and rows of the per-sample file; floats written with ``repr``."""
    ds, pred = ev.data, ev.pred
    d_y = ds.Y.shape[1]
    header = ["index"] + [f"x{j}" for j in range(ds.X.shape[1])]
    for name in ("y_true", "y_raw", "y_proj", "var", "var_adj", "var_epi", "var_alea"):
        header += [f"{name}{k}" for k in range(d_y)]
    header += ["dist2", "active"]
    d2 = pred.projection_distance2 if pred.projection_distance2 is not None else np.zeros(len(ds.Y))
    cols = [ds.X, ds.Y, pred.mean, pred.final_mean, pred.total_var, pred.final_var, pred.epistemic_var, pred.aleatoric_var]
    rows = []
    for i in range(len(ds.Y)):
        vals = [repr(float(v)) for c in cols for v in c[i]]
        active = ";".join(ev.batch.active_ids[i]) if ev.batch is not None else ""
        rows.append([str(i)] + vals + [repr(float(d2[i])), active])
    return header, rows


# ---------------------------------------------------------------------------
# Ablation and shift sweep
# ---------------------------------------------------------------------------


TRAINING_TOGGLES = ("use_csl", "use_calibration_loss", "use_bayesian", "use_extraction")


class ModelCache:
    """Trained models keyed by the settings that influence training."""

    def __init__(self):
        self._store: dict[tuple, TrainedModel] = {}

    def get(self, cfg: ExperimentConfig, task: Task, seed: int) -> TrainedModel:
        key = (
            cfg.digest("data", "constraints", "knowledge", "model", "loss", "train", "eval"),
            tuple(getattr(cfg.toggles, t) for t in TRAINING_TOGGLES),
            seed,
        )
        if key not in self._store:
            self._store[key] = train(cfg, task, seed)
        return self._store[key]


@dataclass
class AblationResult:
    runs: list[dict]  # one per (config, seed)
    evaluations: dict[tuple[str, int], Evaluation]
    tests: dict[str, dict]

    def table(self) -> list[dict]:
        out = []
        for name, _ in ABLATIONS:
            rs = [r for r in self.runs if r["config"] == name]
            row = {"config": name, "n_seeds": len(rs)}
            for m in METRICS:
                v = np.array([r[m] for r in rs])
                row[f"{m}_mean"] = float(v.mean())
                row[f"{m}_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            out.append(row)
        return out

    def values(self, config: str, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.runs if r["config"] == config])


def paired_less(a: Sequence[float], b: Sequence[float]) -> dict:
    """One-sided paired t-test of ``mean(a) < mean(b)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    diff = b - a
    if len(diff) < 2 or np.all(diff == diff[0]):
        p = 0.0 if len(diff) and diff[0] > 0 else 1.0
    else:
        p = float(stats.ttest_rel(a, b, alternative="less").pvalue)
    return {"mean_a": float(a.mean()), "mean_b": float(b.mean()), "p_value": p}


def run_ablation(cfg: ExperimentConfig, task: Task | None = None, cache: ModelCache | None = None) -> AblationResult:
    task = task or load_task(cfg)
    cache = cache or ModelCache()
    runs, evals = [], {}
    for name, toggles in ABLATIONS:
        c = cfg.with_toggles(**toggles)
        for seed in cfg.seeds:
            tm = cache.get(c, task, seed)
            ev = evaluate(c, tm, task.split.test, seed)
            evals[(name, seed)] = ev
            runs.append({"config": name, "seed": seed, **ev.metrics})
    res = AblationResult(runs, evals, {})
    res.tests = {
        "ece_full_lt_no_adjustment": paired_less(res.values("full", "ece"), res.values("no-adjustment", "ece")),
        "ece_no_adjustment_lt_no_csl": paired_less(res.values("no-adjustment", "ece"), res.values("no-csl", "ece")),
    }
    return res


@dataclass
class SweepResult:
    runs: list[dict]  # config, severity, seed, ece

    def curve(self, config: str) -> list[tuple[float, float, float]]:
        """(severity, mean ECE, std ECE) over seeds."""
        out = []
        sevs = sorted({r["severity"] for r in self.runs})
        for s in sevs:
            v = np.array([r["ece"] for r in self.runs if r["config"] == config and r["severity"] == s])
            out.append((s, float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0))
        return out


def run_shift_sweep(
    cfg: ExperimentConfig, severities: Sequence[float] | None = None, task: Task | None = None,
    cache: ModelCache | None = None,
) -> SweepResult:
    task = task or load_task(cfg)
    cache = cache or ModelCache()
    sevs = list(cfg.eval.severities if severities is None else severities)
    tests = {s: test_set_at(cfg, task, s) for s in sevs}
    runs = []
    for name, toggles in SWEEP_CONFIGS:
        c = cfg.with_toggles(**toggles)
        for seed in cfg.seeds:
            tm = cache.get(c, task, seed)
            for s in sevs:
                ev = evaluate(c, tm, tests[s], seed)
                runs.append({"config": name, "severity": float(s), "seed": seed, "ece": ev.report.ece})
    return SweepResult(runs)


# ---------------------------------------------------------------------------
# Explanations
# ---------------------------------------------------------------------------


@dataclass
class ExplanationRun:
    per_sample: list[list[explain.Explanation]]
    coverage: float
    template_accuracy: float
    n_significant: int


def explain_predictions(cfg: ExperimentConfig, tm: TrainedModel, ev: Evaluation, templates=None) -> ExplanationRun:
    """Explanations per test prediction plus the two automated quality metrics."""
    if templates is None:
        templates = explain.load_templates(cfg.explain.templates)
    n = len(ev.data.Y)
    raw = ev.pred.mean
    if ev.batch is None:
        proj = raw
        per_sample: list[list[explain.Explanation]] = [[] for _ in range(n)]
    else:
        proj = ev.batch.points
        per_sample = [
            explain.generate(raw[i], proj[i], ev.batch.contributions[i], tm.constraints, templates,
                             cfg.explain.delta, cfg.explain.output_names, cfg.explain.units)
            for i in range(n)
        ]
    flat = [e for row in per_sample for e in row]
    gold = {c.id: c.kind for c in tm.constraints}
    return ExplanationRun(
        per_sample,
        explain.coverage_metric(per_sample, raw, proj, cfg.explain.delta),
        explain.template_accuracy(flat, gold),
        int(explain.significant(raw, proj, cfg.explain.delta).sum()),
    )
