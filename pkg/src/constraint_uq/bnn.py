"""Mean-field variational MLP with a heteroscedastic Gaussian output head.

Every weight and bias ``theta_j`` has a factorized posterior
``N(mu_j, softplus(rho_j)^2)``; the prior is ``N(0, prior_sigma^2)``. The
network maps ``x`` to ``2 * d_y`` outputs: the predictive mean followed by the
log aleatoric variance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import DataError

CHECKPOINT_FORMAT = "constraint-uq-checkpoint"
CHECKPOINT_VERSION = 1


def softplus(v):
    return np.logaddexp(0.0, v)


def softplus_inv(s: float) -> float:
    return math.log(math.expm1(s))


def sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def n_params(sizes: Sequence[int]) -> int:
    """Weights plus biases of a dense network with the given layer sizes."""
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def _layers(sizes: Sequence[int]):
    """Yield (W slice, W shape, b slice) for each layer of the flat layout."""
    off = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = slice(off, off + n_in * n_out)
        off += n_in * n_out
        b = slice(off, off + n_out)
        off += n_out
        yield w, (n_out, n_in), b


@dataclass
class VariationalMLP:
    sizes: tuple[int, ...]
    mu: np.ndarray
    rho: np.ndarray
    prior_sigma: float = 1.0
    seed: int | None = None
    bayesian: bool = True
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError("layer sizes must be >= 1 with at least input and output layers")
        if self.sizes[-1] % 2:
            raise ValueError("output layer must hold mean and log-variance per target")
        if not self.prior_sigma > 0:
            raise ValueError("prior_sigma must be positive")
        n = n_params(self.sizes)
        if self.mu.shape != (n,) or self.rho.shape != (n,):
            raise ValueError(f"expected {n} variational parameters")

    @property
    def d_x(self) -> int:
        return self.sizes[0]

    @property
    def d_y(self) -> int:
        return self.sizes[-1] // 2

    @property
    def n_params(self) -> int:
        return len(self.mu)

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)


def init_model(
    sizes: Sequence[int],
    prior_sigma: float = 1.0,
    seed: int = 0,
    init_std: float = 0.1,
    bayesian: bool = True,
) -> VariationalMLP:
    """Means drawn from N(0, init_std^2), posterior scales set to ``init_std``."""
    n = n_params(sizes)
    rng = np.random.default_rng(seed)
    mu = rng.normal(0.0, init_std, size=n)
    rho = np.full(n, softplus_inv(init_std))
    return VariationalMLP(tuple(sizes), mu, rho, prior_sigma, seed, bayesian)


def sample_weights(model: VariationalMLP, rng=None, eps=None) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterized draw ``theta = mu + softplus(rho) * eps``; returns (theta, eps).

    A non-Bayesian model always returns its means with zero noise.
    """
    if not model.bayesian:
        return model.mu.copy(), np.zeros_like(model.mu)
    if eps is None:
        rng = np.random.default_rng(rng)
        eps = rng.standard_normal(model.n_params)
    eps = np.asarray(eps, dtype=float)
    return model.mu + model.sigma * eps, eps


def forward_cache(sizes: Sequence[int], theta: np.ndarray, X: np.ndarray):
    """Network output ``(n, 2 d_y)`` plus the activations needed for backprop."""
    h = np.atleast_2d(np.asarray(X, dtype=float))
    if h.shape[1] != sizes[0]:
        raise DataError(f"expected {sizes[0]} input features, got {h.shape[1]}")
    cache = [h]
    layers = list(_layers(sizes))
    for k, (ws, shape, bs) in enumerate(layers):
        a = h @ theta[ws].reshape(shape).T + theta[bs]
        if k < len(layers) - 1:
            h = np.maximum(a, 0.0)
            cache.append(h)
        else:
            h = a
    return h, cache


def forward(sizes: Sequence[int], theta: np.ndarray, X) -> tuple[np.ndarray, np.ndarray]:
    """(mean, log aleatoric variance) for each row of ``X``."""
    out, _ = forward_cache(sizes, theta, X)
    d = sizes[-1] // 2
    return out[:, :d], out[:, d:]


def backward(sizes: Sequence[int], theta: np.ndarray, cache, g_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the flat parameter vector given ``dL/d(output)``."""
    grad = np.zeros_like(theta)
    layers = list(_layers(sizes))
    g = g_out
    for k in range(len(layers) - 1, -1, -1):
        ws, shape, bs = layers[k]
        h_prev = cache[k]
        grad[ws] = (g.T @ h_prev).ravel()
        grad[bs] = g.sum(axis=0)
        if k > 0:
            g = (g @ theta[ws].reshape(shape)) * (cache[k] > 0.0)
    return grad


def kl_divergence(model: VariationalMLP) -> float:
    """Closed-form KL(q || p) summed over all factors."""
    if not model.bayesian:
        return 0.0
    s = model.sigma
    sp = model.prior_sigma
    return float(np.sum(np.log(sp / s) + (s * s + model.mu**2) / (2 * sp * sp) - 0.5))


def kl_gradients(model: VariationalMLP) -> tuple[np.ndarray, np.ndarray]:
    if not model.bayesian:
        return np.zeros_like(model.mu), np.zeros_like(model.rho)
    s = model.sigma
    sp2 = model.prior_sigma**2
    g_mu = model.mu / sp2
    g_sigma = -1.0 / s + s / sp2
    return g_mu, g_sigma * sigmoid(model.rho)


def gaussian_nll_terms(y, mean, logvar):
    """Elementwise ``0.5 * ((y - mean)^2 / var + log var)`` and its partials."""
    inv = np.exp(-logvar)
    r = y - mean
    val = 0.5 * (r * r * inv + logvar)
    d_mean = -r * inv
    d_logvar = 0.5 * (1.0 - r * r * inv)
    return val, d_mean, d_logvar


def draw_noise(model: VariationalMLP, n: int, rng) -> list[np.ndarray]:
    rng = np.random.default_rng(rng)
    if not model.bayesian:
        return [np.zeros(model.n_params) for _ in range(n)]
    return [rng.standard_normal(model.n_params) for _ in range(n)]


def elbo_loss(
    model: VariationalMLP,
    X,
    Y,
    n_mc: int = 1,
    n_total: int | None = None,
    rng=None,
    eps: Sequence[np.ndarray] | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative ELBO on a mini-batch and its gradients w.r.t. (mu, rho).

    The likelihood term is scaled by ``n_total / batch`` so that it estimates
    the full-data term; the KL is charged once.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    B = len(X)
    if B == 0:
        raise DataError("empty batch")
    N = B if n_total is None else n_total
    if eps is None:
        eps = draw_noise(model, n_mc, rng)
    S = len(eps)
    scale = N / (B * S)
    d = model.d_y
    loss = 0.0
    g_mu = np.zeros_like(model.mu)
    g_rho = np.zeros_like(model.rho)
    dsig = sigmoid(model.rho)
    for e in eps:
        theta, e = sample_weights(model, eps=e)
        out, cache = forward_cache(model.sizes, theta, X)
        val, dm, dlv = gaussian_nll_terms(Y, out[:, :d], out[:, d:])
        loss += scale * float(val.sum())
        g_theta = backward(model.sizes, theta, cache, scale * np.hstack([dm, dlv]))
        g_mu += g_theta
        if model.bayesian:
            g_rho += g_theta * e * dsig
    kl = kl_divergence(model)
    k_mu, k_rho = kl_gradients(model)
    return loss + kl, g_mu + k_mu, g_rho + k_rho


@dataclass
class PredictiveDistribution:
    """Monte Carlo predictive moments for a batch of inputs (rows)."""

    mean: np.ndarray
    epistemic_var: np.ndarray
    aleatoric_var: np.ndarray
    total_var: np.ndarray
    n_samples: int
    covariance: np.ndarray | None = None
    projected_mean: np.ndarray | None = None
    propagated_cov: np.ndarray | None = None
    adjusted_var: np.ndarray | None = None
    projection_distance2: np.ndarray | None = None
    projections: list | None = field(default=None, repr=False)

    @property
    def final_mean(self) -> np.ndarray:
        return self.mean if self.projected_mean is None else self.projected_mean

    @property
    def final_var(self) -> np.ndarray:
        return self.total_var if self.adjusted_var is None else self.adjusted_var


def predict(model: VariationalMLP, X, S: int = 50, seed: int = 0) -> PredictiveDistribution:
    """Predictive mean, epistemic and aleatoric variance from ``S`` posterior draws."""
    if S < 1:
        raise ValueError("S must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = model.d_y
    streams = np.random.SeedSequence(seed).spawn(S)
    means = np.empty((S, len(X), d))
    alea = np.empty((S, len(X), d))
    for s, ss in enumerate(streams):
        theta, _ = sample_weights(model, rng=np.random.default_rng(ss))
        m, lv = forward(model.sizes, theta, X)
        means[s] = m
        alea[s] = np.exp(lv)
    mu = means.mean(axis=0)
    dev = means - mu
    epi = (dev**2).mean(axis=0)
    if not model.bayesian:
        epi = np.zeros_like(epi)
        dev = np.zeros_like(dev)
    ale = alea.mean(axis=0)
    cov = np.einsum("sni,snj->nij", dev, dev) / S
    idx = np.arange(d)
    cov[:, idx, idx] += ale
    return PredictiveDistribution(mu, epi, ale, epi + ale, S, covariance=cov)


class Adam:
    """Adam update applied in place to a list of parameter arrays."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def to_checkpoint(model: VariationalMLP) -> dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sizes": list(model.sizes),
        "prior_sigma": model.prior_sigma,
        "bayesian": model.bayesian,
        "seed": model.seed,
        "mu": model.mu.tolist(),
        "rho": model.rho.tolist(),
        "meta": model.meta,
    }


def from_checkpoint(data: dict[str, Any]) -> VariationalMLP:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise DataError("not a constraint-uq checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {data.get('version')!r}")
    try:
        return VariationalMLP(
            tuple(data["sizes"]),
            np.asarray(data["mu"], dtype=float),
            np.asarray(data["rho"], dtype=float),
            float(data["prior_sigma"]),
            data.get("seed"),
            bool(data.get("bayesian", True)),
            dict(data.get("meta", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed checkpoint: {exc}") from None


def save_checkpoint(model: VariationalMLP, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_checkpoint(model), sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> VariationalMLP:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from None
    return from_checkpoint(data)
