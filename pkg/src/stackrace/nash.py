"""Generalized Nash equilibria through the stacked KKT system of both players.

The MCP variable is ``z = [x, lam_1, lam_2]``. Rows of ``F`` are each
player's stationarity over their own block, then each player's constraint
values. Primal and equality-multiplier rows are free; inequality
multipliers live in ``[0, inf)``. A converged point is a first-order
(KKT) point, used as a stand-in for an equilibrium; it is not certified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch
from .mcp import MCPProblem, MCPSolution, MCPStatus, SolverOptions, solve_mcp
from .problems import PlayerProblem, TwoPlayerGame, dense


def _csr(A, shape=None) -> sp.csr_matrix:
    if sp.issparse(A):
        M = A.tocsr()
    else:
        A = np.asarray(A, dtype=float)
        M = sp.csr_matrix(A.reshape(shape) if shape is not None else A)
    if shape is not None and M.shape != shape:
        raise DimensionMismatch(f"expected shape {shape}, got {M.shape}")
    return M


@dataclass(frozen=True)
class KKTLayout:
    n: int
    m: tuple[int, int]
    m_ineq: tuple[int, int]

    @property
    def primal(self) -> slice:
        return slice(0, self.n)

    def dual(self, i: int) -> slice:
        start = self.n + (0 if i == 0 else self.m[0])
        return slice(start, start + self.m[i])

    def dual_ineq(self, i: int) -> slice:
        s = self.dual(i)
        return slice(s.start, s.start + self.m_ineq[i])

    def dual_eq(self, i: int) -> slice:
        s = self.dual(i)
        return slice(s.start + self.m_ineq[i], s.stop)

    @property
    def total_dim(self) -> int:
        return self.n + self.m[0] + self.m[1]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lower = np.full(self.total_dim, -np.inf)
        upper = np.full(self.total_dim, np.inf)
        for i in range(2):
            lower[self.dual_ineq(i)] = 0.0
        return lower, upper


def kkt_layout(game: TwoPlayerGame) -> KKTLayout:
    p1, p2 = game.players
    return KKTLayout(game.n_total, (p1.m, p2.m), (p1.m_ineq, p2.m_ineq))


def multiplier_bounds(p: PlayerProblem) -> tuple[np.ndarray, np.ndarray]:
    lower = np.concatenate([np.zeros(p.m_ineq), np.full(p.m_eq, -np.inf)])
    return lower, np.full(p.m, np.inf)


def assemble_kkt_mcp(game: TwoPlayerGame) -> MCPProblem:
    """Stack both players' KKT conditions into one MCP."""
    layout = kkt_layout(game)
    n = layout.n
    blocks = [game.block_of(0), game.block_of(1)]

    def eval_F(z):
        x = z[:n]
        rows_stat, rows_cons = [], []
        for i, p in enumerate(game.players):
            lam = z[layout.dual(i)]
            grad = np.asarray(p.cost_grad(x), dtype=float)[blocks[i]]
            if p.m:
                grad = grad - p.jac_t_vec(x, lam)[blocks[i]]
                rows_cons.append(np.asarray(p.cons(x), dtype=float).reshape(-1))
            rows_stat.append(grad)
        return np.concatenate(rows_stat + rows_cons)

    def eval_J(z):
        x = z[:n]
        grid = [[None] * 3 for _ in range(4)]
        for i, p in enumerate(game.players):
            lam = z[layout.dual(i)]
            H = _csr(p.lag_hess(x, lam), (n, n))
            grid[i][0] = H[blocks[i]]
            if p.m:
                J = _csr(p.cons_jac(x), (p.m, n))
                grid[i][1 + i] = -J[:, blocks[i]].T
                grid[2 + i][0] = J
            else:
                grid[2 + i][0] = sp.csr_matrix((0, n))
        for i, p in enumerate(game.players):
            if grid[i][1 + i] is None:
                grid[i][1 + i] = sp.csr_matrix((game.players[i].n_own, 0))
        # fill structural zeros so bmat can infer block sizes
        sizes_r = [game.players[0].n_own, game.players[1].n_own, layout.m[0], layout.m[1]]
        sizes_c = [n, layout.m[0], layout.m[1]]
        for r in range(4):
            for c in range(3):
                if grid[r][c] is None:
                    grid[r][c] = sp.csr_matrix((sizes_r[r], sizes_c[c]))
        return sp.bmat(grid, format="csc")

    lower, upper = layout.bounds()
    return MCPProblem(layout.total_dim, eval_F, eval_J, lower, upper)


@dataclass
class KKTCertificate:
    stationarity: float
    min_ineq: float
    max_eq: float
    min_dual: float
    complementarity: float

    def ok(self, tol: float = 1e-6) -> bool:
        return (self.stationarity <= tol and self.min_ineq >= -tol
                and self.max_eq <= tol and self.min_dual >= -1e-10
                and self.complementarity <= tol)

    @property
    def violation(self) -> float:
        """Largest violation among the conditions; 0 at an exact KKT point."""
        return max(0.0, self.stationarity, -self.min_ineq, self.max_eq, -self.min_dual,
                   self.complementarity)


def player_certificate(game: TwoPlayerGame, i: int, x, lam) -> KKTCertificate:
    p = game.players[i]
    x = np.asarray(x, dtype=float)
    blk = game.block_of(i)
    grad = np.asarray(p.cost_grad(x), dtype=float)[blk]
    if p.m == 0:
        return KKTCertificate(float(np.max(np.abs(grad), initial=0.0)), 0.0, 0.0, 0.0, 0.0)
    J = dense(p.cons_jac(x)).reshape(p.m, -1)
    c = np.asarray(p.cons(x), dtype=float).reshape(-1)
    stat = grad - J[:, blk].T @ lam
    g, h = c[:p.m_ineq], c[p.m_ineq:]
    mu = lam[:p.m_ineq]
    return KKTCertificate(
        stationarity=float(np.max(np.abs(stat), initial=0.0)),
        min_ineq=float(np.min(g, initial=0.0)),
        max_eq=float(np.max(np.abs(h), initial=0.0)),
        min_dual=float(np.min(mu, initial=0.0)),
        complementarity=float(np.max(np.abs(mu * g), initial=0.0)),
    )


def combine_certificates(certs) -> KKTCertificate:
    certs = list(certs)
    return KKTCertificate(
        max(c.stationarity for c in certs),
        min(c.min_ineq for c in certs),
        max(c.max_eq for c in certs),
        min(c.min_dual for c in certs),
        max(c.complementarity for c in certs),
    )


@dataclass
class EquilibriumResult:
    """Output of :func:`solve_nash`.

    ``first_order_only`` is always True: the point satisfies both players'
    KKT conditions, which is necessary but not sufficient for an equilibrium.
    """

    x: np.ndarray
    duals: tuple[np.ndarray, np.ndarray]
    status: MCPStatus
    kkt_residual: float
    iterations: int
    z0: np.ndarray = field(repr=False)
    first_order_only: bool = True

    @property
    def converged(self) -> bool:
        return self.status is MCPStatus.CONVERGED

    def certificate(self, game: TwoPlayerGame) -> KKTCertificate:
        return combine_certificates(
            player_certificate(game, i, self.x, self.duals[i]) for i in range(2))


def solve_nash(game: TwoPlayerGame, x0, duals0=None,
               opts: SolverOptions | None = None) -> EquilibriumResult:
    layout = kkt_layout(game)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (layout.n,):
        raise DimensionMismatch(f"x0 has length {x0.size}, expected {layout.n}")
    z0 = np.zeros(layout.total_dim)
    z0[:layout.n] = x0
    if duals0 is not None:
        z0[layout.dual(0)] = duals0[0]
        z0[layout.dual(1)] = duals0[1]
    sol: MCPSolution = solve_mcp(assemble_kkt_mcp(game), z0, opts)
    z = sol.z
    return EquilibriumResult(
        x=z[:layout.n].copy(),
        duals=(z[layout.dual(0)].copy(), z[layout.dual(1)].copy()),
        status=sol.status,
        kkt_residual=sol.residual_inf,
        iterations=sol.iterations,
        z0=z0,
    )
