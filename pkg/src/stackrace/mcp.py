"""Box-constrained mixed complementarity problems.

Find ``z`` in ``[lower, upper]`` such that for every index ``j`` one of

* ``F_j(z) = 0`` and ``lower_j < z_j < upper_j``
* ``F_j(z) > 0`` and ``z_j = lower_j``
* ``F_j(z) < 0`` and ``z_j = upper_j``

holds. The solver is a damped semismooth Newton method applied to the
mid-function ``r(z) = z - median(lower, z - F(z), upper)``, which vanishes
exactly at MCP solutions. Infinite bounds are plain IEEE infinities.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, InvalidPoint

log = logging.getLogger(__name__)

Vector = np.ndarray
Matrix = "np.ndarray | sp.spmatrix"


class MCPStatus(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    SINGULAR = "SingularSystem"
    DIVERGED = "Diverged"


@dataclass(frozen=True)
class MCPProblem:
    """``F(z)`` complementary to the box ``lower <= z <= upper``.

    ``eval_J`` may return a dense array or any scipy sparse matrix.
    Callbacks must be read-only so one problem can serve concurrent solves.
    """

    dim: int
    eval_F: Callable[[Vector], Vector]
    eval_J: Callable[[Vector], Matrix]
    lower: Vector
    upper: Vector

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if self.dim <= 0:
            raise DimensionMismatch(f"dim must be positive, got {self.dim}")
        if lower.shape != (self.dim,) or upper.shape != (self.dim,):
            raise DimensionMismatch("bounds must have length dim")
        if np.any(lower > upper):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def project(self, z: Vector) -> Vector:
        return np.clip(z, self.lower, self.upper)


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 200
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-10
    reg_start: float = 1e-8
    reg_factor: float = 10.0
    reg_max: float = 1e-2
    # give up early when the merit fails to halve (stall_factor) over
    # stall_iter iterations; 0 disables the check
    stall_iter: int = 0
    stall_factor: float = 0.5


@dataclass
class MCPSolution:
    z: Vector
    residual_inf: float
    iterations: int
    status: MCPStatus
    F: Vector = field(repr=False, default=None)

    @property
    def converged(self) -> bool:
        return self.status is MCPStatus.CONVERGED


@dataclass
class IndexClassification:
    """Partition of MCP indices by which complementarity clause holds.

    Degenerate indices (at a bound with ``|F_j|`` below tolerance) are kept
    separately per bound so that branching can tell which pieces they admit.
    """

    interior: list[int]
    at_lower: list[int]
    at_upper: list[int]
    degenerate_lower: list[int]
    degenerate_upper: list[int]
    tol: float

    @property
    def degenerate(self) -> list[int]:
        return sorted(self.degenerate_lower + self.degenerate_upper)

    @property
    def dim(self) -> int:
        return (len(self.interior) + len(self.at_lower) + len(self.at_upper)
                + len(self.degenerate_lower) + len(self.degenerate_upper))


def fb_residual(problem: MCPProblem, z: Vector, F: Vector | None = None) -> Vector:
    """Mid-function residual ``z - median(l, z - F(z), u)``."""
    if F is None:
        F = problem.eval_F(z)
    return z - np.clip(z - F, problem.lower, problem.upper)


def classify_indices(problem: MCPProblem, z: Vector, act_tol: float = 1e-6,
                     F: Vector | None = None) -> IndexClassification:
    """Sort indices into interior / at_lower / at_upper / degenerate.

    ``act_tol`` is scaled by ``max(1, ||z||_inf)``. Raises InvalidPoint if the
    mid-function residual exceeds ``100 * act_tol`` (scaled).
    """
    z = np.asarray(z, dtype=float)
    if F is None:
        F = problem.eval_F(z)
    tol = act_tol * max(1.0, float(np.max(np.abs(z), initial=0.0)))
    res = float(np.max(np.abs(fb_residual(problem, z, F)), initial=0.0))
    if res > 100 * tol:
        raise InvalidPoint(f"residual {res:.3e} exceeds {100 * tol:.3e}")

    lo, hi = problem.lower, problem.upper
    near_lo = np.isfinite(lo) & (z - lo <= tol)
    near_hi = np.isfinite(hi) & (hi - z <= tol)
    small_F = np.abs(F) <= tol

    out = IndexClassification([], [], [], [], [], tol)
    for j in range(problem.dim):
        if near_lo[j] and small_F[j]:
            out.degenerate_lower.append(j)
        elif near_hi[j] and small_F[j]:
            out.degenerate_upper.append(j)
        elif near_lo[j] and F[j] > 0:
            out.at_lower.append(j)
        elif near_hi[j] and F[j] < 0:
            out.at_upper.append(j)
        else:
            out.interior.append(j)
    return out


def _solve_reduced(J: Matrix, rhs: Vector, opts: SolverOptions) -> Vector | None:
    """Solve ``J d = rhs`` with escalating ``+delta*I`` regularization."""
    n = rhs.shape[0]
    if n == 0:
        return rhs.copy()
    scale = 1.0 + float(np.max(np.abs(rhs)))
    deltas = [0.0]
    delta = opts.reg_start
    while delta <= opts.reg_max * (1 + 1e-12):
        deltas.append(delta)
        delta *= opts.reg_factor
    sparse = sp.issparse(J)
    for delta in deltas:
        try:
            if sparse:
                A = (J + delta * sp.identity(n, format="csc")).tocsc() if delta else J.tocsc()
                d = spla.splu(A).solve(rhs)
            else:
                A = J + delta * np.eye(n) if delta else J
                d = np.linalg.solve(A, rhs)
        except (np.linalg.LinAlgError, RuntimeError):
            continue
        if not np.all(np.isfinite(d)):
            continue
        lin_res = np.max(np.abs(A @ d - rhs))
        if lin_res > 1e-6 * scale or np.max(np.abs(d)) > 1e12 * scale:
            continue
        return d
    return None


def _rows_cols(J: Matrix, rows: np.ndarray, cols: np.ndarray) -> Matrix:
    if sp.issparse(J):
        return J.tocsr()[rows][:, cols]
    return J[np.ix_(rows, cols)]


def solve_mcp(problem: MCPProblem, z0: Vector,
              opts: SolverOptions | None = None) -> MCPSolution:
    """Damped semismooth Newton on the mid-function with Armijo backtracking."""
    opts = opts or SolverOptions()
    z0 = np.asarray(z0, dtype=float).reshape(-1)
    if z0.shape != (problem.dim,):
        raise DimensionMismatch(f"z0 has length {z0.size}, expected {problem.dim}")
    lo, hi = problem.lower, problem.upper

    z = problem.project(z0)
    F = np.asarray(problem.eval_F(z), dtype=float)
    if not np.all(np.isfinite(F)):
        return MCPSolution(z, np.inf, 0, MCPStatus.DIVERGED, F)
    r = z - np.clip(z - F, lo, hi)
    merit = 0.5 * float(r @ r)
    history = [merit]

    for it in range(opts.max_iter):
        res = float(np.max(np.abs(r), initial=0.0))
        if res <= opts.tol:
            return MCPSolution(z, res, it, MCPStatus.CONVERGED, F)
        if opts.stall_iter and it >= opts.stall_iter and merit > opts.stall_factor * history[-1 - opts.stall_iter]:
            log.debug("stalled at iteration %d, residual %.3e", it, res)
            return MCPSolution(z, res, it, MCPStatus.MAX_ITERATIONS, F)

        log.debug("iteration %d residual %.3e", it, res)
        J = problem.eval_J(z)
        w = z - F
        clamped = (w <= lo) | (w >= hi)
        free = np.flatnonzero(~clamped)
        fixed = np.flatnonzero(clamped)

        d = np.empty_like(z)
        d[fixed] = -r[fixed]
        if free.size:
            rhs = -F[free]
            if fixed.size:
                rhs = rhs - _rows_cols(J, free, fixed) @ d[fixed]
            d_free = _solve_reduced(_rows_cols(J, free, free), rhs, opts)
            if d_free is None:
                return MCPSolution(z, res, it, MCPStatus.SINGULAR, F)
            d[free] = d_free

        step = _line_search(problem, z, d, merit, -2.0 * merit, opts)
        if step is None:
            # Newton direction failed; try steepest descent on the merit.
            g = np.where(clamped, r, 0.0)
            g += _masked_transpose_product(J, r, free)
            step = _line_search(problem, z, -g, merit, -float(g @ g), opts)
            if step is None:
                log.debug("line search failed at iteration %d, residual %.3e", it, res)
                return MCPSolution(z, res, it, MCPStatus.DIVERGED, F)
        z, F, r, merit = step
        history.append(merit)
        if not np.all(np.isfinite(F)):
            return MCPSolution(z, np.inf, it + 1, MCPStatus.DIVERGED, F)

    res = float(np.max(np.abs(r), initial=0.0))
    status = MCPStatus.CONVERGED if res <= opts.tol else MCPStatus.MAX_ITERATIONS
    return MCPSolution(z, res, opts.max_iter, status, F)


def _masked_transpose_product(J: Matrix, r: Vector, free: np.ndarray) -> Vector:
    """``J[free, :].T @ r[free]``, the free-row part of ``V^T r``."""
    if free.size == 0:
        return np.zeros_like(r)
    if sp.issparse(J):
        return np.asarray(J.tocsr()[free].T @ r[free]).ravel()
    return J[free].T @ r[free]


def _line_search(problem: MCPProblem, z: Vector, d: Vector, merit: float,
                 slope: float, opts: SolverOptions):
    lo, hi = problem.lower, problem.upper
    t = 1.0
    while t >= opts.min_step:
        z_t = np.clip(z + t * d, lo, hi)
        F_t = np.asarray(problem.eval_F(z_t), dtype=float)
        if np.all(np.isfinite(F_t)):
            r_t = z_t - np.clip(z_t - F_t, lo, hi)
            merit_t = 0.5 * float(r_t @ r_t)
            if merit_t <= merit + opts.armijo * t * slope:
                return z_t, F_t, r_t, merit_t
        t *= opts.backtrack
    return None
