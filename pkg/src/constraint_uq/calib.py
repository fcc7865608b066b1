"""Calibration metrics, variance adjustment and the composite training loss.

Regression outputs are turned into (confidence, correctness) pairs through
central Gaussian intervals: for a nominal level ``q`` the event is whether
the target falls inside ``mean +- z_q * sd`` with ``z_q = Phi^{-1}((1+q)/2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_softmax
from scipy.stats import norm

from . import bnn
from .csl import Projector
from .errors import DataError
from .expr import FEAS_TOL, Constraint

DEFAULT_BINS = 10
DEFAULT_LEVELS = tuple(round(0.05 + 0.1 * k, 2) for k in range(10))
ABS_SMOOTH = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # ELBO
    beta: float = 0.1  # soft calibration error
    gamma: float = 10.0  # soft-constraint penalty
    lam: float = 0.5  # variance inflation per squared projection distance
    tau_bin: float = 0.05

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be >= 0")
        if not self.tau_bin > 0.0:
            raise ValueError("tau_bin must be > 0")


# ---------------------------------------------------------------------------
# Binned calibration error
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationBins:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray  # NaN for empty bins
    accuracy: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def _pairs(p, r) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float).ravel()
    r = np.asarray(r, dtype=float).ravel()
    if p.shape != r.shape:
        raise DataError(f"{len(p)} confidences but {len(r)} outcomes")
    if len(p) == 0:
        raise DataError("calibration error of an empty sample is undefined")
    if np.any((p < 0.0) | (p > 1.0)) or not np.all(np.isfinite(p)):
        raise DataError("confidences must lie in [0, 1]")
    return p, r


def bin_index(p, M: int = DEFAULT_BINS) -> np.ndarray:
    """Bin of each confidence; bins are right-closed except the first, which is closed."""
    edges = np.linspace(0.0, 1.0, M + 1)
    return np.clip(np.searchsorted(edges, p, side="left") - 1, 0, M - 1)


def bin_stats(p, r, M: int = DEFAULT_BINS) -> CalibrationBins:
    p, r = _pairs(p, r)
    idx = bin_index(p, M)
    counts = np.bincount(idx, minlength=M)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = np.bincount(idx, weights=p, minlength=M) / counts
        acc = np.bincount(idx, weights=r, minlength=M) / counts
    return CalibrationBins(np.linspace(0.0, 1.0, M + 1), counts, conf, acc)


def ece(p, r, M: int = DEFAULT_BINS) -> float:
    """Count-weighted mean gap between confidence and observed frequency."""
    b = bin_stats(p, r, M)
    nz = b.counts > 0
    gaps = np.abs(b.accuracy[nz] - b.confidence[nz])
    return float(np.sum(b.counts[nz] * gaps) / np.sum(b.counts))


def mce(p, r, M: int = DEFAULT_BINS) -> float:
    """Largest gap over nonempty bins."""
    b = bin_stats(p, r, M)
    nz = b.counts > 0
    return float(np.max(np.abs(b.accuracy[nz] - b.confidence[nz])))


# ---------------------------------------------------------------------------
# Regression adapters
# ---------------------------------------------------------------------------


def _moments(pred, var=None) -> tuple[np.ndarray, np.ndarray]:
    if var is None:
        if isinstance(pred, bnn.PredictiveDistribution):
            return np.atleast_2d(pred.final_mean), np.atleast_2d(pred.final_var)
        pred, var = pred
    mean = np.asarray(pred, dtype=float)
    var = np.asarray(var, dtype=float)
    if mean.ndim < 2:
        mean, var = mean.reshape(-1, 1), var.reshape(-1, 1)
    return mean, var


def coverage_events(pred, y_true, levels: Sequence[float] = DEFAULT_LEVELS, var=None):
    """(nominal level, inside-interval indicator) pairs.

    ``pred`` is a :class:`PredictiveDistribution` (its final mean and variance
    are used) or a ``(mean, var)`` pair. Events are ordered by sample, output
    dimension, then level.
    """
    mean, var = _moments(pred, var)
    y = np.asarray(y_true, dtype=float).reshape(mean.shape)
    if not np.all(var > 0.0):
        raise DataError("coverage intervals need strictly positive variances")
    q = np.asarray(levels, dtype=float)
    if np.any((q <= 0.0) | (q >= 1.0)):
        raise ValueError("coverage levels must lie strictly between 0 and 1")
    z = norm.ppf(0.5 * (1.0 + q))
    dev = np.abs(y - mean) / np.sqrt(var)
    r = (dev[..., None] <= z).astype(float)
    p = np.broadcast_to(q, r.shape)
    return p.ravel().copy(), r.ravel()


def nll(pred, y_true, var=None) -> float:
    """Gaussian negative log-likelihood summed over outputs, averaged over samples."""
    mean, var = _moments(pred, var)
    y = np.asarray(y_true, dtype=float).reshape(mean.shape)
    if not np.all(var > 0.0):
        raise DataError("NLL needs strictly positive variances")
    per = 0.5 * (np.log(2.0 * np.pi * var) + (y - mean) ** 2 / var)
    return float(np.mean(np.sum(per, axis=1)))


def adjust_variance(var, distance2, lam: float):
    """Inflate every output's variance by ``lam`` times the squared projection distance."""
    var = np.asarray(var, dtype=float)
    d2 = np.asarray(distance2, dtype=float)
    if lam < 0.0 or np.any(var < 0.0) or np.any(d2 < 0.0):
        raise ValueError("variance, distance and lambda must be nonnegative")
    if var.ndim == 2 and d2.ndim == 1:
        d2 = d2[:, None]
    return var + lam * d2


def soft_ece_loss(p, r, centers=None, tau_bin: float = 0.05):
    """Soft-binned calibration error and its gradients w.r.t. ``p`` and ``r``.

    Each confidence is assigned to the bins through softmax weights
    ``w_im ~ exp(-(p_i - b_m)^2 / (2 tau^2))`` and contributes
    ``sum_m w_im |r_i - p_i|`` with a smoothed absolute value.
    """
    if not tau_bin > 0.0:
        raise ValueError("tau_bin must be > 0")
    p = np.asarray(p, dtype=float).ravel()
    r = np.asarray(r, dtype=float).ravel()
    if p.shape != r.shape:
        raise DataError(f"{len(p)} confidences but {len(r)} outcomes")
    b = np.asarray(centers if centers is not None else bin_centers(DEFAULT_BINS), dtype=float)
    diff = p[:, None] - b[None, :]
    logits = -(diff**2) / (2.0 * tau_bin**2)
    w = np.exp(log_softmax(logits, axis=1))
    dlogit = -diff / tau_bin**2
    dw = w * (dlogit - np.sum(w * dlogit, axis=1, keepdims=True))
    res = r - p
    a = np.sqrt(res * res + ABS_SMOOTH)
    wsum = w.sum(axis=1)
    value = float(np.sum(wsum * a))
    grad_p = dw.sum(axis=1) * a - wsum * res / a
    grad_r = wsum * res / a
    return value, grad_p, grad_r


def bin_centers(M: int = DEFAULT_BINS) -> np.ndarray:
    return (np.arange(M) + 0.5) / M


# ---------------------------------------------------------------------------
# Constraint metrics and penalty
# ---------------------------------------------------------------------------


def constraint_penalty(y_hat, x, constraints: Sequence[Constraint]):
    """Weighted squared violation and its gradient w.r.t. ``y_hat``.

    Inequalities contribute ``w * max(0, g)^2``, equalities ``w * res^2``
    (conservation residuals are already scaled by their tolerance). Hard
    constraints passed here count with weight 1.
    """
    y = np.asarray(y_hat, dtype=float)
    value = 0.0
    grad = np.zeros_like(y)
    for c in constraints:
        w = 1.0 if c.weight is None else c.weight
        for g, dg, is_eq in c.functions(y, x):
            if not is_eq:
                g = max(g, 0.0)
            value += w * g * g
            grad += 2.0 * w * g * dg
    return value, grad


def satisfied_all(constraints: Sequence[Constraint], y, x=(), atol: float = FEAS_TOL) -> bool:
    return all(c.satisfied(y, x, atol) for c in constraints if c.hard)


def csr(constraints: Sequence[Constraint], Y, X=None, atol: float = FEAS_TOL) -> float:
    """Percentage of predictions that satisfy every hard constraint within ``atol``."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = np.zeros((len(Y), 0)) if X is None else np.atleast_2d(np.asarray(X, dtype=float))
    if len(Y) == 0:
        raise DataError("CSR of an empty sample is undefined")
    ok = sum(satisfied_all(constraints, y, x, atol) for y, x in zip(Y, X))
    return 100.0 * ok / len(Y)


def avm(constraints: Sequence[Constraint], Y, X=None) -> float:
    """Mean over predictions of the summed hard-constraint violation."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = np.zeros((len(Y), 0)) if X is None else np.atleast_2d(np.asarray(X, dtype=float))
    if len(Y) == 0:
        raise DataError("AVM of an empty sample is undefined")
    tot = [sum(c.violation(y, x) for c in constraints if c.hard) for y, x in zip(Y, X)]
    return float(np.mean(tot))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    ece: float
    mce: float
    nll: float
    csr: float
    avm: float
    rmse: float
    mae: float
    r2: float
    bins: CalibrationBins = field(repr=False)

    def reliability_rows(self) -> list[tuple[float, float, float, int]]:
        """(bin center, mean confidence, observed frequency, count) per bin."""
        return [
            (float(c), float(cf), float(ac), int(n))
            for c, cf, ac, n in zip(self.bins.centers, self.bins.confidence, self.bins.accuracy, self.bins.counts)
        ]

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("ece", "mce", "nll", "csr", "avm", "rmse", "mae", "r2")}


def regression_scores(y_true, y_pred) -> tuple[float, float, float]:
    """(RMSE, MAE, R^2) pooled over all outputs; R^2 uses per-output means."""
    y = np.atleast_2d(np.asarray(y_true, dtype=float))
    f = np.atleast_2d(np.asarray(y_pred, dtype=float))
    err = y - f
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((y - y.mean(axis=0)) ** 2))
    ss_res = float(np.sum(err**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return rmse, mae, r2


def calibration_report(
    mean,
    var,
    y_true,
    constraints: Sequence[Constraint] = (),
    X=None,
    levels: Sequence[float] = DEFAULT_LEVELS,
    M: int = DEFAULT_BINS,
) -> CalibrationReport:
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    p, r = coverage_events((mean, var), y_true, levels)
    rmse, mae, r2 = regression_scores(y_true, mean)
    hard = [c for c in constraints if c.hard]
    return CalibrationReport(
        ece=ece(p, r, M),
        mce=mce(p, r, M),
        nll=nll((mean, var), y_true),
        csr=csr(hard, mean, X) if hard else 100.0,
        avm=avm(hard, mean, X) if hard else 0.0,
        rmse=rmse,
        mae=mae,
        r2=r2,
        bins=bin_stats(p, r, M),
    )


# ---------------------------------------------------------------------------
# Composite training loss
# ---------------------------------------------------------------------------


@dataclass
class LossResult:
    value: float
    components: dict[str, float]
    grad_mu: np.ndarray
    grad_rho: np.ndarray
    projection_events: int = 0
    projected: np.ndarray | None = field(default=None, repr=False)


def _smooth_abs(v):
    a = np.sqrt(v * v + ABS_SMOOTH)
    return a, v / a


def total_loss(
    model: bnn.VariationalMLP,
    X,
    Y,
    weights: LossWeights = LossWeights(),
    constraints: Sequence[Constraint] = (),
    eps: Sequence[np.ndarray] | None = None,
    n_mc: int = 1,
    n_total: int | None = None,
    rng=None,
    use_csl: bool = True,
    projector: Projector | None = None,
    anchors=None,
    levels: Sequence[float] = DEFAULT_LEVELS,
    n_bins: int = DEFAULT_BINS,
    coverage_smoothing: float = 0.1,
    X_raw=None,
) -> LossResult:
    """Prediction NLL on projected means plus weighted ELBO, calibration and penalty terms.

    Hard constraints are enforced by projecting every posterior draw; soft
    constraints are penalized on the raw outputs. The calibration term needs a
    differentiable coverage indicator, so during training ``1{|u| <= z}`` is
    replaced by ``sigmoid((z - |u|) / coverage_smoothing)`` with ``u`` the
    standardized residual of the projected mean. ``X_raw`` holds the inputs
    seen by constraints when the network consumes a transformed ``X``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xc = X if X_raw is None else np.atleast_2d(np.asarray(X_raw, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    B, d = Y.shape
    N = B if n_total is None else n_total
    if eps is None:
        eps = bnn.draw_noise(model, n_mc, rng)
    S = len(eps)
    hard = [c for c in constraints if c.hard]
    soft = [c for c in constraints if not c.hard]
    if use_csl and hard and projector is None:
        projector = Projector(hard, d)

    thetas, caches, F, LS = [], [], [], []
    for e in eps:
        theta, _ = bnn.sample_weights(model, eps=e)
        out, cache = bnn.forward_cache(model.sizes, theta, X)
        thetas.append(theta)
        caches.append(cache)
        F.append(out[:, :d])
        LS.append(out[:, d:])
    F = np.array(F)  # (S, B, d)
    LS = np.array(LS)
    g_F = np.zeros_like(F)
    g_LS = np.zeros_like(LS)
    comp: dict[str, float] = {}

    # ELBO: likelihood on raw outputs (N/B scaling) plus closed-form KL
    val, dm, dlv = bnn.gaussian_nll_terms(Y, F, LS)
    sc = N / (B * S)
    kl = bnn.kl_divergence(model)
    comp["elbo"] = sc * float(val.sum()) + kl
    g_F += weights.alpha * sc * dm
    g_LS += weights.alpha * sc * dlv

    # projection of every draw
    events = 0
    if use_csl and projector is not None and projector.constraints:
        P = np.empty_like(F)
        Jac = np.empty((S, B, d, d))
        for s in range(S):
            bp = projector.project_many(F[s], Xc, anchors=anchors)
            P[s], Jac[s] = bp.points, bp.jacobians
            events += bp.n_events
    else:
        P = F
        Jac = None

    # prediction loss on projected means
    val, dm, dlv = bnn.gaussian_nll_terms(Y, P, LS)
    comp["pred"] = float(val.sum()) / (B * S)
    g_P = dm / (B * S)
    g_LS += dlv / (B * S)

    # soft calibration error on coverage events of the projected mean
    comp["ece"] = 0.0
    if weights.beta > 0.0:
        q = np.asarray(levels, dtype=float)
        z = norm.ppf(0.5 * (1.0 + q))
        Pbar = P.mean(axis=0)
        Fbar = F.mean(axis=0)
        ale = np.exp(LS)
        v = ((F - Fbar) ** 2).mean(axis=0) + ale.mean(axis=0)
        sd = np.sqrt(v)
        u, du = _smooth_abs(Y - Pbar)  # du = d|res|/d(res)
        kappa = coverage_smoothing
        arg = (z[None, None, :] - (u / sd)[..., None]) / kappa
        r = expit(arg)
        p = np.broadcast_to(q, r.shape)
        value, _, g_r = soft_ece_loss(p.ravel(), r.ravel(), bin_centers(n_bins), weights.tau_bin)
        comp["ece"] = value
        g_arg = (weights.beta * g_r.reshape(r.shape)) * r * (1.0 - r)
        g_ratio = -g_arg.sum(axis=-1) / kappa  # dL/d(u/sd)
        g_u = g_ratio / sd
        g_sd = -g_ratio * u / (sd * sd)
        g_v = g_sd / (2.0 * sd)
        g_P += (g_u * du * -1.0)[None] / S
        g_F += g_v[None] * 2.0 * (F - Fbar) / S
        g_LS += g_v[None] * ale / S

    # soft-constraint penalty on raw outputs
    comp["constraint"] = 0.0
    if soft and weights.gamma > 0.0:
        tot = 0.0
        for s in range(S):
            for i in range(B):
                pv, pg = constraint_penalty(F[s, i], Xc[i], soft)
                tot += pv
                g_F[s, i] += weights.gamma * pg / (B * S)
        comp["constraint"] = tot / (B * S)

    # chain through the projection Jacobians (symmetric, so J^T g = J g)
    if Jac is not None:
        g_F += np.einsum("sbij,sbj->sbi", Jac, g_P)
    else:
        g_F += g_P

    g_mu = np.zeros_like(model.mu)
    g_rho = np.zeros_like(model.rho)
    dsig = bnn.sigmoid(model.rho)
    for s, e in enumerate(eps):
        g_theta = bnn.backward(model.sizes, thetas[s], caches[s], np.concatenate([g_F[s], g_LS[s]], axis=1))
        g_mu += g_theta
        if model.bayesian:
            g_rho += g_theta * np.asarray(e) * dsig
    k_mu, k_rho = bnn.kl_gradients(model)
    g_mu += weights.alpha * k_mu
    g_rho += weights.alpha * k_rho

    value = comp["pred"] + weights.alpha * comp["elbo"] + weights.beta * comp["ece"] + weights.gamma * comp["constraint"]
    return LossResult(value, comp, g_mu, g_rho, events, P)
