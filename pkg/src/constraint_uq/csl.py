"""Constraint satisfaction layer: Euclidean projection onto the hard-constraint set.

The projection ``argmin ||y - y_hat||^2`` subject to linear equalities and
inequalities is solved by a dense dual active-set method (Goldfarb-Idnani with
identity Hessian). Nonlinear inequalities are handled by linearizing around the
current iterate and re-projecting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import ConstraintError, ConvergenceError, InfeasibleError
from .expr import (
    FEAS_TOL,
    Bounds,
    Conservation,
    Constraint,
    LinearEquality,
    LinearInequality,
    NonlinearInequality,
    linearize,
)

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-10
_NULL_TOL = 1e-10  # ||P a|| below this means a row is dependent on the working set


@dataclass(frozen=True)
class FeasibleSet:
    """``A_eq y = b_eq`` and ``A_in y <= b_in``; rows tagged by source constraint id."""

    d_y: int
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    eq_ids: tuple[str, ...] = ()
    in_ids: tuple[str, ...] = ()
    nonlinear: tuple[Constraint, ...] = ()

    @property
    def n_rows(self) -> int:
        return len(self.b_eq) + len(self.b_in)

    @property
    def rows(self) -> np.ndarray:
        """All rows stacked, equalities first."""
        return np.vstack([self.A_eq, self.A_in])

    @property
    def row_ids(self) -> tuple[str, ...]:
        return self.eq_ids + self.in_ids

    def is_equality(self, row: int) -> bool:
        return row < len(self.b_eq)

    def max_violation(self, y) -> float:
        y = np.asarray(y, dtype=float)
        v = 0.0
        if len(self.b_eq):
            v = max(v, float(np.max(np.abs(self.A_eq @ y - self.b_eq))))
        if len(self.b_in):
            v = max(v, float(np.max(self.A_in @ y - self.b_in)))
        return v


@dataclass(frozen=True)
class ProjectionResult:
    point: np.ndarray
    active: tuple[int, ...]
    multipliers: np.ndarray
    jacobian: np.ndarray
    distance2: float
    iterations: int
    converged: bool
    kkt_residual: float
    active_ids: tuple[str, ...] = ()
    pruned: tuple[int, ...] = ()
    rounds: int = 1
    flags: tuple[str, ...] = ()
    feasible_set: FeasibleSet | None = field(default=None, repr=False, compare=False)

    def contributions(self) -> dict[str, float]:
        """Per-constraint share of the displacement, ``||mu_k a_k||`` summed by id."""
        out: dict[str, float] = {}
        if self.feasible_set is None:
            return out
        rows = self.feasible_set.rows
        for r, mu in zip(self.active, self.multipliers):
            cid = self.feasible_set.row_ids[r]
            out[cid] = out.get(cid, 0.0) + abs(mu) * float(np.linalg.norm(rows[r]))
        return out


def _empty(d: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros((0, d)), np.zeros(0)


def build_feasible_set(
    constraints: Sequence[Constraint],
    anchor=None,
    x=(),
    d_y: int | None = None,
    check: bool = True,
) -> FeasibleSet:
    """Stack hard constraints into rows, linearizing nonlinear ones at ``anchor``.

    Raises :class:`InfeasibleError` when ``check`` is set and the system is empty.
    """
    if d_y is None:
        if not constraints:
            raise ConstraintError("d_y is required for an empty constraint list")
        d_y = constraints[0].d_y
    x = np.asarray(x, dtype=float)
    eq_rows, eq_b, eq_ids = [], [], []
    in_rows, in_b, in_ids = [], [], []
    nonlinear = []
    for c in constraints:
        if not c.hard:
            raise ConstraintError(f"{c.id}: soft constraints are penalized, not projected")
        if c.d_y != d_y:
            raise ConstraintError(f"{c.id}: d_y={c.d_y} does not match {d_y}")
        b = c.body
        if isinstance(b, LinearInequality):
            in_rows.append(np.asarray(b.coef_y, dtype=float))
            in_b.append(b.effective_bound(x))
            in_ids.append(c.id)
        elif isinstance(b, LinearEquality):
            eq_rows.append(np.asarray(b.coef_y, dtype=float))
            eq_b.append(b.effective_value(x))
            eq_ids.append(c.id)
        elif isinstance(b, Bounds):
            e = np.zeros(d_y)
            e[b.index] = 1.0
            if b.upper is not None:
                in_rows.append(e)
                in_b.append(b.upper)
                in_ids.append(c.id)
            if b.lower is not None:
                in_rows.append(-e)
                in_b.append(-b.lower)
                in_ids.append(c.id)
        elif isinstance(b, Conservation):
            eq_rows.append(b.row(d_y))
            eq_b.append(b.value)
            eq_ids.append(c.id)
        elif isinstance(b, NonlinearInequality):
            if anchor is None:
                raise ConstraintError(f"{c.id}: nonlinear constraint needs a linearization anchor")
            lin = linearize(c, anchor, x)
            in_rows.append(lin.row)
            in_b.append(lin.bound)
            in_ids.append(c.id)
            nonlinear.append(c)
    A_eq, b_eq = (np.array(eq_rows), np.array(eq_b)) if eq_rows else _empty(d_y)
    A_in, b_in = (np.array(in_rows), np.array(in_b)) if in_rows else _empty(d_y)
    if not (np.all(np.isfinite(b_eq)) and np.all(np.isfinite(b_in))):
        raise ConstraintError("constraint bounds must be finite")
    fs = FeasibleSet(d_y, A_eq, b_eq, A_in, b_in, tuple(eq_ids), tuple(in_ids), tuple(nonlinear))
    if check:
        start = np.zeros(d_y) if anchor is None else np.asarray(anchor, dtype=float)
        _dual_active_set(fs, start, max_iter=_default_max_iter(fs))
    return fs


def _default_max_iter(fs: FeasibleSet) -> int:
    return 100 * max(fs.n_rows, 1)


def _dual_active_set(fs: FeasibleSet, y_hat: np.ndarray, max_iter: int):
    """Goldfarb-Idnani dual active-set iterations for ``min 0.5||y - y_hat||^2``.

    Returns (y, active rows, multipliers for the original rows, iterations,
    redundant rows).
    """
    rows = fs.rows
    rhs = np.concatenate([fs.b_eq, fs.b_in])
    n_eq = len(fs.b_eq)
    norms = np.linalg.norm(rows, axis=1)
    redundant: list[int] = []
    for r in np.flatnonzero(norms == 0.0):
        ok = rhs[r] == 0.0 if r < n_eq else rhs[r] >= 0.0
        if not ok:
            raise InfeasibleError(f"constraint {fs.row_ids[r]!r} reads 0 {'==' if r < n_eq else '<='} {rhs[r]!r}")
        redundant.append(int(r))
    safe = np.where(norms > 0.0, norms, 1.0)
    A = rows / safe[:, None]
    b = rhs / safe
    tol = 1e-12 * (1.0 + np.abs(b))

    y = y_hat.astype(float).copy()
    active: list[int] = []
    sign: dict[int, float] = {}  # orientation of equality rows in the working set
    lam: dict[int, float] = {}
    pending_eq = [r for r in range(n_eq) if r not in redundant]
    skip = set(redundant)
    it = 0

    while True:
        # choose the next constraint to enforce
        if pending_eq:
            p = pending_eq.pop(0)
            s = float(A[p] @ y - b[p])
            sgn = 1.0 if s >= 0.0 else -1.0
        else:
            if len(b) == n_eq:
                break
            s_all = A[n_eq:] @ y - b[n_eq:]
            cand = s_all - tol[n_eq:]
            for r in skip:
                if r >= n_eq:
                    cand[r - n_eq] = -np.inf
            for r in active:
                if r >= n_eq:
                    cand[r - n_eq] = -np.inf
            k = int(np.argmax(cand))
            if cand[k] <= 0.0:
                break
            p = n_eq + k
            s = float(s_all[k])
            sgn = 1.0
        a_p = sgn * A[p]
        lam_p = 0.0
        added = False
        while not added:
            it += 1
            if it > max_iter:
                raise ConvergenceError(f"projection did not converge in {max_iter} iterations", best=y.copy())
            s_p = float(a_p @ y - sgn * b[p])
            if active:
                N = np.array([sign.get(j, 1.0) * A[j] for j in active])
                Q, R = np.linalg.qr(N.T)
                r_vec = scipy.linalg.solve_triangular(R, Q.T @ a_p)
                z = -(a_p - Q @ (Q.T @ a_p))
            else:
                r_vec = np.zeros(0)
                z = -a_p
            zz = float(z @ z)  # = a_p' P a_p; the norm form avoids cancellation
            # partial step limited by dual feasibility of active inequalities
            t1, drop = np.inf, -1
            for idx, j in enumerate(active):
                if j >= n_eq and r_vec[idx] > 0.0:
                    ratio = lam[j] / r_vec[idx]
                    if ratio < t1:
                        t1, drop = ratio, idx
            if np.sqrt(max(zz, 0.0)) <= _NULL_TOL:
                if p < n_eq and abs(s_p) <= tol[p]:
                    skip.add(p)
                    redundant.append(p)
                    break
                if drop < 0:
                    raise InfeasibleError(
                        f"constraint {fs.row_ids[p]!r} cannot be satisfied together with "
                        f"{[fs.row_ids[j] for j in active]}"
                    )
                t2 = np.inf
            else:
                t2 = s_p / zz
            t = min(t1, t2)
            if t2 < np.inf:
                y = y + t * z
            for idx, j in enumerate(active):
                lam[j] -= t * r_vec[idx]
            lam_p += t
            if t == t2:
                active.append(p)
                sign[p] = sgn
                lam[p] = lam_p
                added = True
            else:
                j = active.pop(drop)
                lam.pop(j)
                sign.pop(j, None)

    mult = np.array([sign.get(j, 1.0) * lam[j] / safe[j] for j in active])
    return y, active, mult, it, redundant


def _kkt_residual(fs: FeasibleSet, y_hat, y, active, mult) -> float:
    rows = fs.rows
    stat = y - y_hat
    if active:
        stat = stat + rows[list(active)].T @ mult
    res = float(np.max(np.abs(stat))) if len(stat) else 0.0
    res = max(res, fs.max_violation(y))
    n_eq = len(fs.b_eq)
    for j, m in zip(active, mult):
        if j >= n_eq:
            res = max(res, -m)
    return res


def project(fs: FeasibleSet, y_hat, max_iter: int | None = None) -> ProjectionResult:
    """Nearest point of the (linear) feasible set to ``y_hat``."""
    y_hat = np.asarray(y_hat, dtype=float)
    if y_hat.shape != (fs.d_y,):
        raise ConstraintError(f"expected a vector of length {fs.d_y}, got shape {y_hat.shape}")
    if max_iter is None:
        max_iter = _default_max_iter(fs)
    if fs.max_violation(y_hat) <= FEAS_TOL:
        # already feasible: leave the point alone; equalities still bind
        active = list(range(len(fs.b_eq)))
        J, pruned = _jacobian(fs, active)
        return ProjectionResult(
            point=y_hat.copy(), active=tuple(active), multipliers=np.zeros(len(active)), jacobian=J,
            distance2=0.0, iterations=0, converged=True, kkt_residual=0.0,
            active_ids=tuple(fs.row_ids[j] for j in active), pruned=tuple(pruned), feasible_set=fs,
        )
    y, active, mult, it, redundant = _dual_active_set(fs, y_hat, max_iter)
    kkt = _kkt_residual(fs, y_hat, y, active, mult)
    res = ProjectionResult(
        point=y,
        active=tuple(active),
        multipliers=mult,
        jacobian=np.eye(fs.d_y),
        distance2=float(np.sum((y - y_hat) ** 2)),
        iterations=it,
        converged=kkt < FEAS_TOL,
        kkt_residual=kkt,
        active_ids=tuple(fs.row_ids[j] for j in active),
        pruned=tuple(sorted(redundant)),
        feasible_set=fs,
    )
    J, pruned = _jacobian(fs, active)
    return replace(res, jacobian=J, pruned=tuple(sorted(set(redundant) | set(pruned))))


def _prune_rows(A: np.ndarray) -> np.ndarray:
    """Indices of a maximal independent subset of rows (pivoted QR)."""
    if len(A) == 0:
        return np.zeros(0, dtype=int)
    An = A / np.linalg.norm(A, axis=1, keepdims=True)
    _, R, piv = scipy.linalg.qr(An.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > PIVOT_TOL))
    return np.sort(piv[:rank])


def _jacobian(fs: FeasibleSet, active) -> tuple[np.ndarray, list[int]]:
    d = fs.d_y
    if not active:
        return np.eye(d), []
    A = fs.rows[list(active)]
    keep = _prune_rows(A)
    pruned = [active[i] for i in range(len(active)) if i not in set(keep.tolist())]
    A = A[keep]
    J = np.eye(d) - A.T @ np.linalg.solve(A @ A.T, A)
    return J, pruned


def projection_jacobian(fs: FeasibleSet, result: ProjectionResult) -> np.ndarray:
    """``I - A^T (A A^T)^{-1} A`` over the active rows of ``result``."""
    if not result.converged:
        raise ConvergenceError("Jacobian requested for an unconverged projection")
    return _jacobian(fs, list(result.active))[0]


def propagate_uncertainty(J, cov, sym_tol: float = 1e-10) -> np.ndarray:
    """Linear propagation ``J cov J^T`` of a covariance through the projection."""
    J = np.asarray(J, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (J.shape[1], J.shape[1]):
        raise ConstraintError(f"covariance shape {cov.shape} does not match Jacobian {J.shape}")
    if np.max(np.abs(cov - cov.T), initial=0.0) > sym_tol * max(1.0, np.max(np.abs(cov), initial=0.0)):
        raise ConstraintError("covariance matrix is not symmetric")
    out = J @ cov @ J.T
    return 0.5 * (out + out.T)


def _nonlinear_violation(constraints: Sequence[Constraint], y, x) -> float:
    v = 0.0
    for c in constraints:
        if isinstance(c.body, NonlinearInequality):
            v = max(v, c.violation(y, x))
    return v


def project_batch_with_relinearization(
    constraints: Sequence[Constraint],
    y_hat,
    x=(),
    max_outer: int = 5,
    step_tol: float = 1e-8,
    feas_tol: float = FEAS_TOL,
    d_y: int | None = None,
) -> ProjectionResult:
    """Alternate linearization at the current iterate with projection of ``y_hat``."""
    y_hat = np.asarray(y_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    d_y = d_y if d_y is not None else len(y_hat)
    has_nonlinear = any(isinstance(c.body, NonlinearInequality) for c in constraints)
    if not has_nonlinear:
        return project(build_feasible_set(constraints, x=x, d_y=d_y, check=False), y_hat)

    anchor = y_hat
    steps: list[float] = []
    best: tuple[float, int, ProjectionResult] | None = None
    result = None
    for k in range(1, max_outer + 1):
        fs = build_feasible_set(constraints, anchor=anchor, x=x, d_y=d_y, check=False)
        result = replace(project(fs, y_hat), rounds=k)
        viol = _nonlinear_violation(constraints, result.point, x)
        step = float(np.linalg.norm(result.point - anchor))
        steps.append(step)
        if best is None or viol < best[0]:
            best = (viol, k, result)
        if viol <= feas_tol or step < step_tol:
            return result
        if len(steps) >= 4 and not steps[-1] < steps[-4]:
            log.debug("relinearization oscillates; returning best iterate")
            return replace(best[2], converged=False, flags=("oscillation",))
        anchor = result.point
    return replace(best[2], converged=False, flags=("max_outer",))


def project_points(
    constraints: Sequence[Constraint],
    Y_hat: np.ndarray,
    X: np.ndarray | None = None,
    max_outer: int = 5,
) -> list[ProjectionResult]:
    """Project each row of ``Y_hat`` (inputs in the matching rows of ``X``)."""
    Y_hat = np.atleast_2d(np.asarray(Y_hat, dtype=float))
    n, d = Y_hat.shape
    if X is None:
        X = np.zeros((n, 0))
    return [
        project_batch_with_relinearization(constraints, Y_hat[i], X[i], max_outer=max_outer, d_y=d)
        for i in range(n)
    ]


@dataclass
class BatchProjection:
    """Row-wise projection of a batch; ``jacobians`` has shape ``(n, d, d)``."""

    points: np.ndarray
    jacobians: np.ndarray
    distance2: np.ndarray
    active_ids: list[tuple[str, ...]]
    contributions: list[dict[str, float]]
    converged: np.ndarray
    flags: list[tuple[str, ...]]

    @property
    def n_events(self) -> int:
        """Rows that the projection actually moved."""
        return int(np.count_nonzero(self.distance2 > 0.0))


def _has_x_terms(c: Constraint) -> bool:
    b = c.body
    if isinstance(b, (LinearInequality, LinearEquality)):
        return any(v != 0.0 for v in b.coef_x)
    return False


class Projector:
    """Projects many points onto the same hard-constraint set.

    Pure box sets are clipped in closed form; fixed linear sets are stacked
    once and only infeasible rows go through the active-set solver; sets with
    nonlinear or input-dependent rows are handled row by row.
    """

    def __init__(self, constraints: Sequence[Constraint], d_y: int, max_outer: int = 5):
        self.d_y = d_y
        self.max_outer = max_outer
        self.constraints = [c for c in constraints if c.hard]
        self.nonlinear = any(isinstance(c.body, NonlinearInequality) for c in self.constraints)
        self.x_dependent = any(_has_x_terms(c) for c in self.constraints)
        self.box = all(isinstance(c.body, Bounds) for c in self.constraints)
        self.fs: FeasibleSet | None = None
        if self.box:
            self._init_box()
        elif not (self.nonlinear or self.x_dependent):
            self.fs = build_feasible_set(self.constraints, d_y=d_y)

    def _init_box(self):
        d = self.d_y
        self.lo = np.full(d, -np.inf)
        self.hi = np.full(d, np.inf)
        self.lo_id = [""] * d
        self.hi_id = [""] * d
        for c in self.constraints:
            b = c.body
            if b.upper is not None and b.upper < self.hi[b.index]:
                self.hi[b.index], self.hi_id[b.index] = b.upper, c.id
            if b.lower is not None and b.lower > self.lo[b.index]:
                self.lo[b.index], self.lo_id[b.index] = b.lower, c.id
        bad = np.flatnonzero(self.lo > self.hi)
        if len(bad):
            i = int(bad[0])
            raise InfeasibleError(f"bounds on y[{i}] are empty: {float(self.lo[i])!r} > {float(self.hi[i])!r}")

    def _project_box(self, Y):
        n, d = Y.shape
        above = Y > self.hi
        below = Y < self.lo
        P = np.clip(Y, self.lo, self.hi)
        J = np.zeros((n, d, d))
        idx = np.arange(d)
        J[:, idx, idx] = ~(above | below)
        active, contrib = [], []
        for i in range(n):
            ids: list[str] = []
            ct: dict[str, float] = {}
            for j in np.flatnonzero(above[i] | below[i]):
                cid = self.hi_id[j] if above[i, j] else self.lo_id[j]
                ids.append(cid)
                ct[cid] = ct.get(cid, 0.0) + abs(float(Y[i, j] - P[i, j]))
            active.append(tuple(ids))
            contrib.append(ct)
        d2 = np.sum((P - Y) ** 2, axis=1)
        return BatchProjection(P, J, d2, active, contrib, np.ones(n, dtype=bool), [()] * n)

    def project_many(self, Y_hat, X=None, anchors=None) -> BatchProjection:
        """Project each row of ``Y_hat``.

        ``anchors`` (nonlinear sets only) fixes the linearization point of each
        row; rows whose anchor is NaN get the full relinearization loop.
        """
        Y = np.atleast_2d(np.asarray(Y_hat, dtype=float))
        n, d = Y.shape
        if d != self.d_y:
            raise ConstraintError(f"expected {self.d_y} outputs, got {d}")
        if not np.all(np.isfinite(Y)):
            raise ConstraintError("cannot project non-finite predictions")
        if not self.constraints:
            eye = np.broadcast_to(np.eye(d), (n, d, d)).copy()
            return BatchProjection(Y.copy(), eye, np.zeros(n), [()] * n, [{} for _ in range(n)],
                                   np.ones(n, dtype=bool), [()] * n)
        if self.box:
            return self._project_box(Y)
        X = np.zeros((n, 0)) if X is None else np.atleast_2d(np.asarray(X, dtype=float))
        results: list[ProjectionResult | None] = [None] * n
        if self.fs is not None:
            viol = np.zeros(n)
            if len(self.fs.b_eq):
                viol = np.max(np.abs(Y @ self.fs.A_eq.T - self.fs.b_eq), axis=1)
            if len(self.fs.b_in):
                viol = np.maximum(viol, np.max(Y @ self.fs.A_in.T - self.fs.b_in, axis=1))
            for i in np.flatnonzero(viol > FEAS_TOL):
                results[i] = project(self.fs, Y[i])
        else:
            for i in range(n):
                a = None if anchors is None else anchors[i]
                if a is not None and np.all(np.isfinite(a)):
                    fs = build_feasible_set(self.constraints, anchor=a, x=X[i], d_y=d, check=False)
                    results[i] = project(fs, Y[i])
                else:
                    results[i] = project_batch_with_relinearization(
                        self.constraints, Y[i], X[i], max_outer=self.max_outer, d_y=d
                    )
        P = Y.copy()
        J = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        d2 = np.zeros(n)
        active: list[tuple[str, ...]] = [()] * n
        contrib: list[dict[str, float]] = [{} for _ in range(n)]
        conv = np.ones(n, dtype=bool)
        flags: list[tuple[str, ...]] = [()] * n
        for i, r in enumerate(results):
            if r is None:
                continue
            P[i], J[i], d2[i] = r.point, r.jacobian, r.distance2
            active[i] = tuple(dict.fromkeys(r.active_ids))
            contrib[i] = r.contributions()
            conv[i], flags[i] = r.converged, r.flags
        return BatchProjection(P, J, d2, active, contrib, conv, flags)
