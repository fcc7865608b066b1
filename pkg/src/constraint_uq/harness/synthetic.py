"""Synthetic regression tasks with known ground-truth constraints.

Training inputs are drawn from ``U[-1, 1]^d_x``. A shift of severity ``s``
rescales the same base draws by ``1 + shift_scale * s`` so that severity 0
reproduces the in-distribution sample exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..csl import Projector
from ..expr import Constraint, parse_constraints

GENERATORS = ("constrained-linear", "constrained-quadratic", "conservation-sum", "misspecified-shift")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    generator: str = "misspecified-shift"
    n: int = 1000
    d_x: int = 2
    noise: float = 0.03
    severity: float = 0.0
    shift_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {', '.join(GENERATORS)}")
        if self.n < 10 or self.d_x < 1:
            raise ValueError("need n >= 10 and d_x >= 1")
        if self.noise < 0 or not 0.0 <= self.severity <= 1.0 or self.shift_scale < 0:
            raise ValueError("noise and shift_scale must be >= 0, severity in [0, 1]")


TRUE_CONSTRAINTS = {
    "constrained-linear": "[sum_cap] hard: y[0] + y[1] <= 1.2\n[y0_floor] hard: y[0] >= 0\n",
    "constrained-quadratic": "[disk] hard: g: y[0]^2 + y[1]^2 - 1 <= 0\n",
    "conservation-sum": "[balance] hard: sum(1*y[0] + 1*y[1]) == 1 tol 1e-6\n[y2_range] hard: y[2] in [0, 1]\n",
    "misspecified-shift": "[y0_range] hard: y[0] in [-1, 1]\n[y1_range] hard: y[1] in [-1, 1]\n",
}
N_OUTPUTS = {"constrained-linear": 2, "constrained-quadratic": 2, "conservation-sum": 3, "misspecified-shift": 2}


def true_constraints(generator: str) -> list[Constraint]:
    return parse_constraints(TRUE_CONSTRAINTS[generator], d_y=N_OUTPUTS[generator])


def _mix(d_x: int, d_y: int, seed: int = 12345) -> np.ndarray:
    """Fixed input mixing directions shared by every dataset seed."""
    rng = np.random.default_rng(seed + 101 * d_x + d_y)
    A = rng.normal(size=(d_y, d_x))
    return A / np.abs(A).sum(axis=1, keepdims=True)  # |t| <= 1 on the training cube


def _signal(generator: str, X: np.ndarray) -> np.ndarray:
    d_x = X.shape[1]
    A = _mix(d_x, N_OUTPUTS[generator])
    t = X @ A.T
    if generator == "constrained-linear":
        return np.column_stack([0.3 + 0.6 * t[:, 0], 0.5 + 0.4 * t[:, 1]])
    if generator == "constrained-quadratic":
        return np.column_stack([0.2 + 0.8 * t[:, 0] ** 2 - 0.3 * t[:, 1], 0.7 * t[:, 0] * t[:, 1] + 0.4 * t[:, 1]])
    if generator == "conservation-sum":
        share = 1.0 / (1.0 + np.exp(-2.0 * t[:, 0]))
        return np.column_stack([share, 1.0 - share, 0.5 + 0.45 * np.tanh(t[:, 1] + 0.5 * t[:, 2])])
    # rises toward the box edges on the training range, then bends back
    return 0.9 * np.sin(1.3 * t + np.array([0.15, -0.1]))


def _enforce(generator: str, Y: np.ndarray) -> np.ndarray:
    if generator == "conservation-sum":
        Y = Y.copy()
        Y[:, 0] = np.clip(Y[:, 0], 0.0, 1.0)
        Y[:, 1] = 1.0 - Y[:, 0]
        Y[:, 2] = np.clip(Y[:, 2], 0.0, 1.0)
        return Y
    if generator == "constrained-quadratic":
        r = np.linalg.norm(Y, axis=1, keepdims=True)
        return np.where(r > 1.0, Y / np.maximum(r, 1e-300), Y)
    return Projector(true_constraints(generator), Y.shape[1]).project_many(Y).points


def base_draws(spec: SyntheticTaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unshifted inputs and unit noise, fully determined by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    X = rng.uniform(-1.0, 1.0, size=(spec.n, spec.d_x))
    E = rng.standard_normal((spec.n, N_OUTPUTS[spec.generator]))
    return X, E


def targets(spec: SyntheticTaskSpec, X: np.ndarray, E: np.ndarray) -> np.ndarray:
    Y = _signal(spec.generator, X) + spec.noise * E
    if spec.generator == "conservation-sum":
        Y[:, 1] = 1.0 - Y[:, 0]  # noise on the share only, keep the balance exact
    return _enforce(spec.generator, Y)


def shift_inputs(X: np.ndarray, severity: float, scale: float) -> np.ndarray:
    return X * (1.0 + scale * severity)


def generate(spec: SyntheticTaskSpec, severity: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(X, Y) for every row, shifted by ``severity`` (defaults to ``spec.severity``)."""
    s = spec.severity if severity is None else severity
    X, E = base_draws(spec)
    Xs = shift_inputs(X, s, spec.shift_scale)
    return Xs, targets(spec, Xs, E)
