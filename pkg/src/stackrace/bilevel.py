"""Bilevel (leader/follower) equilibrium points.

The follower's KKT conditions form an MCP over ``w = [x_follower, mu]``.
Near a solution that MCP splits into closed *pieces*: each index either
keeps ``F_j = 0`` with ``z_j`` inside its bounds (J1), pins ``z_j`` to the
lower bound with ``F_j >= 0`` (J2), or pins it to the upper bound with
``F_j <= 0`` (J3). A point is a local optimum of the leader over the union
of pieces iff it is a local optimum over every piece that contains it, so
the leader problem restricted to each piece is solved (as its own MCP) and
the incumbent is accepted once every piece agrees.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidPoint, TooManyPieces
from .mcp import (
    IndexClassification,
    MCPProblem,
    MCPStatus,
    SolverOptions,
    classify_indices,
    solve_mcp,
)
from .nash import KKTCertificate, _csr, multiplier_bounds, player_certificate
from .nlp import piece_best_response
from .problems import TwoPlayerGame, dense


class BilevelStatus(str, enum.Enum):
    EQUILIBRIUM = "Equilibrium"
    MAX_OUTER = "MaxOuterIterations"
    PIECE_FAILED = "PieceSolveFailed"
    FOLLOWER_FAILED = "FollowerSolveFailed"


@dataclass(frozen=True)
class PieceSpec:
    J1: tuple[int, ...]
    J2: tuple[int, ...]
    J3: tuple[int, ...]
    # relaxed degenerate indices: both the bound on z_j and the sign of F_j
    # are kept as inequalities (at a lower / upper bound respectively)
    R2: tuple[int, ...] = ()
    R3: tuple[int, ...] = ()

    def __post_init__(self):
        sets = [set(self.J1), set(self.J2), set(self.J3), set(self.R2), set(self.R3)]
        if any(a & b for a, b in itertools.combinations(sets, 2)):
            raise ValueError("piece index sets overlap")

    @property
    def dim(self) -> int:
        return len(self.J1) + len(self.J2) + len(self.J3) + len(self.R2) + len(self.R3)

    def role(self) -> dict[int, int]:
        out = {j: 1 for j in self.J1}
        out.update({j: 2 for j in self.J2})
        out.update({j: 3 for j in self.J3})
        out.update({j: 4 for j in self.R2})
        out.update({j: 5 for j in self.R3})
        return out


@dataclass
class BilevelOptions:
    piece_cap: int = 256
    max_outer: int = 50
    act_tol: float = 1e-6
    move_tol: float = 1e-6
    improve_tol: float = 1e-8
    stall_tol: float = 1e-10
    mcp: SolverOptions = field(default_factory=SolverOptions)
    # Newton options for the piece solves; None uses ``mcp``
    piece_mcp: SolverOptions | None = None
    # on a failed piece solve, retry from an SLSQP solve of the piece NLP
    piece_seed: bool = False
    seed_maxiter: int = 200
    # before enumerating, test the relaxed piece that contains all of them
    relaxed_check: bool = False


# --------------------------------------------------------------------------
# follower


def follower_mcp(game: TwoPlayerGame, follower: int, x) -> MCPProblem:
    """Follower KKT system in ``w = [x_follower, mu]`` with the leader block of ``x`` fixed."""
    p = game.players[follower]
    blk = game.block_of(follower)
    n = game.n_total
    base = np.array(x, dtype=float)

    def joint(w):
        y = base.copy()
        y[blk] = w[:p.n_own]
        return y

    def eval_F(w):
        y = joint(w)
        mu = w[p.n_own:]
        grad = np.asarray(p.cost_grad(y), dtype=float)[blk]
        if p.m == 0:
            return grad
        return np.concatenate([grad - p.jac_t_vec(y, mu)[blk],
                               np.asarray(p.cons(y), dtype=float).reshape(-1)])

    def eval_J(w):
        y = joint(w)
        mu = w[p.n_own:]
        H = _csr(p.lag_hess(y, mu), (n, n))[blk][:, blk]
        if p.m == 0:
            return H.tocsc()
        J = _csr(p.cons_jac(y), (p.m, n))[:, blk]
        return sp.bmat([[H, -J.T], [J, None]], format="csc")

    lo_mu, hi_mu = multiplier_bounds(p)
    lower = np.concatenate([np.full(p.n_own, -np.inf), lo_mu])
    upper = np.concatenate([np.full(p.n_own, np.inf), hi_mu])
    return MCPProblem(p.n_own + p.m, eval_F, eval_J, lower, upper)


@dataclass
class FollowerSolution:
    x: np.ndarray
    x_follower: np.ndarray
    mu: np.ndarray
    status: MCPStatus
    residual: float
    problem: MCPProblem = field(repr=False)
    F: np.ndarray = field(repr=False)

    @property
    def converged(self) -> bool:
        return self.status is MCPStatus.CONVERGED

    @property
    def w(self) -> np.ndarray:
        return np.concatenate([self.x_follower, self.mu])


def solve_follower(game: TwoPlayerGame, follower: int, x0, mu0=None,
                   opts: SolverOptions | None = None) -> FollowerSolution:
    """Follower best response (KKT point) with the other block of ``x0`` held fixed."""
    p = game.players[follower]
    blk = game.block_of(follower)
    x0 = np.asarray(x0, dtype=float)
    prob = follower_mcp(game, follower, x0)
    w0 = np.concatenate([x0[blk], np.zeros(p.m) if mu0 is None else np.asarray(mu0, float)])
    sol = solve_mcp(prob, w0, opts)
    x = x0.copy()
    x[blk] = sol.z[:p.n_own]
    return FollowerSolution(x, sol.z[:p.n_own].copy(), sol.z[p.n_own:].copy(), sol.status,
                            sol.residual_inf, prob, sol.F)


# --------------------------------------------------------------------------
# pieces


def enumerate_pieces(classification: IndexClassification, cap: int = 256) -> list[PieceSpec]:
    """All pieces containing the classified point, in canonical order.

    Each degenerate index branches into J1 or its bound's set; branching is
    lexicographic on index with J1 first.
    """
    dl = set(classification.degenerate_lower)
    degenerate = classification.degenerate
    if 2 ** len(degenerate) > cap:
        raise TooManyPieces(f"{len(degenerate)} degenerate indices -> "
                            f"{2 ** len(degenerate)} pieces > cap {cap}")
    base1 = list(classification.interior)
    base2 = list(classification.at_lower)
    base3 = list(classification.at_upper)
    pieces = []
    for choice in itertools.product((False, True), repeat=len(degenerate)):
        J1, J2, J3 = list(base1), list(base2), list(base3)
        for j, pinned in zip(degenerate, choice):
            if not pinned:
                J1.append(j)
            elif j in dl:
                J2.append(j)
            else:
                J3.append(j)
        pieces.append(PieceSpec(tuple(sorted(J1)), tuple(sorted(J2)), tuple(sorted(J3))))
    return pieces


def relaxed_piece(classification: IndexClassification) -> PieceSpec:
    """The set holding every piece through the point: degenerate indices keep
    both their bound and the sign of ``F`` but drop complementarity."""
    c = classification
    return PieceSpec(tuple(sorted(c.interior)), tuple(sorted(c.at_lower)),
                     tuple(sorted(c.at_upper)), tuple(sorted(c.degenerate_lower)),
                     tuple(sorted(c.degenerate_upper)))


@dataclass
class PieceResult:
    x: np.ndarray
    mu: np.ndarray
    is_local_min: bool
    status: MCPStatus
    leader_cost: float
    residual: float
    nlp_only: bool = False      # accepted on the SLSQP solve alone, without KKT certification

    @property
    def converged(self) -> bool:
        return self.status is MCPStatus.CONVERGED or self.nlp_only


class _PieceLayout:
    def __init__(self, game: TwoPlayerGame, leader: int):
        self.leader = leader
        self.follower = 1 - leader
        self.n = game.n_total
        self.nf = game.players[self.follower].n_own
        self.mf = game.players[self.follower].m
        self.ml = game.players[leader].m
        n, mf, ml, nf = self.n, self.mf, self.ml, self.nf
        self.x = slice(0, n)
        self.mu = slice(n, n + mf)
        self.rho = slice(n + mf, n + mf + ml)
        self.nu = slice(n + mf + ml, n + mf + ml + nf + mf)
        self.nu_s = slice(self.nu.start, self.nu.start + nf)
        self.nu_c = slice(self.nu.start + nf, self.nu.stop)
        self.dim = self.nu.stop


def piece_problem(game: TwoPlayerGame, leader: int, piece: PieceSpec) -> MCPProblem:
    """KKT system of the leader's problem restricted to one follower piece.

    Variables ``[x, mu, rho, nu]``: joint decisions, follower multipliers,
    leader multipliers and multipliers of the piece's follower rows.
    """
    L = _PieceLayout(game, leader)
    pl = game.players[leader]
    pf = game.players[L.follower]
    blk_f = game.block_of(L.follower)
    n, nf, mf = L.n, L.nf, L.mf

    f_lo = np.concatenate([np.full(nf, -np.inf), multiplier_bounds(pf)[0]])
    f_hi = np.concatenate([np.full(nf, np.inf), multiplier_bounds(pf)[1]])
    lower = np.full(L.dim, -np.inf)
    upper = np.full(L.dim, np.inf)
    lower[L.rho], upper[L.rho] = multiplier_bounds(pl)
    for q, role in piece.role().items():
        nu_q = L.nu.start + q
        if q >= nf:
            mu_q = L.mu.start + q - nf
            if role in (1, 4, 5):
                lower[mu_q], upper[mu_q] = f_lo[q], f_hi[q]
            elif role == 2:
                lower[mu_q] = upper[mu_q] = f_lo[q]
            else:
                lower[mu_q] = upper[mu_q] = f_hi[q]
        elif role != 1:
            raise InvalidPoint("follower primal indices have no finite bounds")
        if role in (2, 4):
            lower[nu_q] = 0.0
        elif role in (3, 5):
            upper[nu_q] = 0.0

    def split(v):
        return v[L.x], v[L.mu], v[L.rho], v[L.nu_s], v[L.nu_c]

    def embed(nu_s):
        out = np.zeros(n)
        out[blk_f] = nu_s
        return out

    def eval_F(v):
        x, mu, rho, nu_s, nu_c = split(v)
        Hf = _csr(pf.lag_hess(x, mu), (n, n))
        Jf = _csr(pf.cons_jac(x), (mf, n)) if mf else sp.csr_matrix((0, n))
        grad_f = np.asarray(pf.cost_grad(x), dtype=float)[blk_f]
        G_stat = grad_f - (pf.jac_t_vec(x, mu)[blk_f] if mf else 0.0)
        G_cons = np.asarray(pf.cons(x), dtype=float).reshape(-1) if mf else np.zeros(0)
        Fx = np.asarray(pl.cost_grad(x), dtype=float).copy()
        if pl.m:
            Fx -= pl.jac_t_vec(x, rho)
            c_l = np.asarray(pl.cons(x), dtype=float).reshape(-1)
        else:
            c_l = np.zeros(0)
        Fx -= Hf[blk_f].T @ nu_s
        if mf:
            Fx -= pf.jac_t_vec(x, nu_c)
        F_mu = Jf[:, blk_f] @ nu_s
        return np.concatenate([Fx, F_mu, c_l, G_stat, G_cons])

    def eval_J(v):
        x, mu, rho, nu_s, nu_c = split(v)
        nu_t = embed(nu_s)
        Hf = _csr(pf.lag_hess(x, mu), (n, n))
        T = _csr(pf.lag_hess_directional(x, mu, nu_t), (n, n))
        Hxx = _csr(pl.lag_hess(x, rho), (n, n)) - T
        Jf = _csr(pf.cons_jac(x), (mf, n)) if mf else sp.csr_matrix((0, n))
        if mf:
            Hxx = Hxx - _csr(pf.cons_hess(x, nu_c), (n, n))
            HV = _csr(pf.hvp_rows(x, nu_t), (mf, n))
        else:
            HV = sp.csr_matrix((0, n))
        Jl = _csr(pl.cons_jac(x), (pl.m, n)) if pl.m else sp.csr_matrix((0, n))
        Hf_rows = Hf[blk_f]
        Jf_own = Jf[:, blk_f]
        grid = [
            [Hxx, HV.T, -Jl.T, -Hf_rows.T, -Jf.T],
            [HV, None, None, Jf_own, None],
            [Jl, None, None, None, None],
            [Hf_rows, -Jf_own.T, None, None, None],
            [Jf, None, None, None, None],
        ]
        sizes = [n, mf, pl.m, nf, mf]
        for r in range(5):
            for c in range(5):
                if grid[r][c] is None:
                    grid[r][c] = sp.csr_matrix((sizes[r], sizes[c]))
        return sp.bmat(grid, format="csc")

    return MCPProblem(L.dim, eval_F, eval_J, lower, upper)


def _warm_multipliers(game, leader, piece, L: _PieceLayout, x, mu, act_tol):
    """Least-squares multipliers for the active rows of the piece problem."""
    pl = game.players[leader]
    pf = game.players[L.follower]
    blk_f = game.block_of(L.follower)
    n, nf, mf = L.n, L.nf, L.mf
    cols, col_ids = [], []
    if pl.m:
        Jl = dense(pl.cons_jac(x)).reshape(pl.m, n)
        c_l = np.asarray(pl.cons(x), dtype=float).reshape(-1)
        active = np.ones(pl.m, bool)
        active[:pl.m_ineq] = c_l[:pl.m_ineq] <= act_tol
        for k in np.flatnonzero(active):
            cols.append(np.concatenate([Jl[k], np.zeros(mf)]))
            col_ids.append(L.rho.start + k)
    Hf = dense(pf.lag_hess(x, mu)).reshape(n, n)
    Jf = dense(pf.cons_jac(x)).reshape(mf, n) if mf else np.zeros((0, n))
    G_cons = np.asarray(pf.cons(x), dtype=float).reshape(-1) if mf else np.zeros(0)
    role = piece.role()
    for q in range(nf + mf):
        if q < nf:
            col = np.concatenate([Hf[blk_f][q], -Jf[:, blk_f].T[q]])
        else:
            k = q - nf
            if role.get(q, 1) in (2, 3) and abs(G_cons[k]) > act_tol:
                continue
            col = np.concatenate([Jf[k], np.zeros(mf)])
        cols.append(col)
        col_ids.append(L.nu.start + q)
    v = np.zeros(L.dim)
    if not cols:
        return v
    A = np.array(cols).T
    b = np.concatenate([np.asarray(pl.cost_grad(x), dtype=float), np.zeros(mf)])
    # mu rows that are pinned carry their own bound multiplier; drop them
    keep = np.ones(n + mf, bool)
    for q, r in role.items():
        if q >= nf and r in (2, 3):
            keep[n + q - nf] = False
    sol, *_ = np.linalg.lstsq(A[keep], b[keep], rcond=None)
    v[col_ids] = sol
    return v


def solve_piece_nlp(game: TwoPlayerGame, leader: int, piece: PieceSpec, x, mu,
                    opts: BilevelOptions | None = None) -> PieceResult:
    """Leader's problem over one follower piece, warm-started at ``(x, mu)``.

    ``is_local_min`` is True when the solve neither moves the point by more
    than ``move_tol`` nor lowers the leader cost by more than ``improve_tol``.
    """
    opts = opts or BilevelOptions()
    L = _PieceLayout(game, leader)
    prob = piece_problem(game, leader, piece)
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)

    def newton(xs, mus):
        v0 = _warm_multipliers(game, leader, piece, L, xs, mus, opts.act_tol)
        v0[L.x] = xs
        v0[L.mu] = mus
        return solve_mcp(prob, prob.project(v0), opts.piece_mcp or opts.mcp)

    sol = newton(x, mu)
    nlp_only = False
    role = [piece.role().get(L.nf + q, 1) for q in range(L.mf)]
    if not sol.converged and opts.piece_seed and not any(r in (3, 5) for r in role):
        xn, mun, ok = piece_best_response(game, leader, role, x, mu, opts.seed_maxiter)
        stayed = max(float(np.max(np.abs(xn - x), initial=0.0)),
                     float(np.max(np.abs(mun - mu), initial=0.0))) <= opts.move_tol
        if not stayed:
            sol = newton(xn, mun)
        # at points where the piece's constraint qualification fails the
        # KKT system has no solution; fall back on the NLP solve itself
        nlp_only = ok and not sol.converged
        if nlp_only:
            sol = dataclasses.replace(sol, z=sol.z.copy())
            sol.z[L.x], sol.z[L.mu] = xn, mun
    xs, mus = sol.z[L.x].copy(), sol.z[L.mu].copy()
    f0 = float(game.players[leader].cost(x))
    f1 = float(game.players[leader].cost(xs))
    moved = max(float(np.max(np.abs(xs - x), initial=0.0)),
                float(np.max(np.abs(mus - mu), initial=0.0)))
    ok = sol.converged or nlp_only
    stays = ok and moved <= opts.move_tol and f1 >= f0 - opts.improve_tol
    return PieceResult(xs, mus, stays, sol.status, f1, sol.residual_inf, nlp_only)


def piece_agreement(pieces: Sequence, solve_restricted: Callable, start) -> tuple[bool, int | None, object]:
    """Check the incumbent against every piece that contains it.

    ``solve_restricted(piece, start)`` returns an object with
    ``is_local_min`` and ``converged``. Stops at the first disagreement or
    failure and returns ``(all_agree, index, result)``.
    """
    last = None
    for k, piece in enumerate(pieces):
        res = solve_restricted(piece, start)
        last = res
        if not res.converged or not res.is_local_min:
            return False, k, res
    return True, None, last


# --------------------------------------------------------------------------
# outer loop


@dataclass
class BilevelResult:
    x: np.ndarray
    follower_duals: np.ndarray
    pieces_checked: int
    status: BilevelStatus
    leader_cost: float
    outer_iterations: int
    leader: int
    x0: np.ndarray = field(repr=False, default=None)

    @property
    def ok(self) -> bool:
        return self.status is BilevelStatus.EQUILIBRIUM

    def certificate(self, game: TwoPlayerGame) -> KKTCertificate:
        """Follower KKT certificate plus leader constraint satisfaction."""
        f = player_certificate(game, 1 - self.leader, self.x, self.follower_duals)
        pl = game.players[self.leader]
        c = np.asarray(pl.cons(self.x), dtype=float).reshape(-1)
        min_ineq = min(f.min_ineq, float(np.min(c[:pl.m_ineq], initial=0.0)))
        max_eq = max(f.max_eq, float(np.max(np.abs(c[pl.m_ineq:]), initial=0.0)))
        return KKTCertificate(f.stationarity, min_ineq, max_eq, f.min_dual, f.complementarity)


def solve_bilevel(game: TwoPlayerGame, leader: int, x0, opts: BilevelOptions | None = None,
                  mu0=None) -> BilevelResult:
    """Iterate follower solve, piece enumeration and per-piece leader solves."""
    opts = opts or BilevelOptions()
    follower = 1 - leader
    x = np.array(x0, dtype=float)
    mu = mu0
    pieces_checked = 0
    prev_costs: list[float] = []
    pl = game.players[leader]

    def result(status, it, x, mu):
        return BilevelResult(x, np.asarray(mu, float) if mu is not None else np.zeros(0),
                             pieces_checked, status, float(pl.cost(x)), it, leader,
                             np.array(x0, dtype=float))

    for it in range(opts.max_outer):
        fol = solve_follower(game, follower, x, mu, opts.mcp)
        if not fol.converged:
            return result(BilevelStatus.FOLLOWER_FAILED, it, x, mu)
        x, mu = fol.x, fol.mu
        try:
            cls = classify_indices(fol.problem, fol.w, opts.act_tol, F=fol.F)
        except InvalidPoint:
            return result(BilevelStatus.FOLLOWER_FAILED, it, x, mu)

        def solve_restricted(piece, start):
            return solve_piece_nlp(game, leader, piece, start[0], start[1], opts)

        if opts.relaxed_check and cls.degenerate:
            # local optimality over a superset of all pieces implies agreement
            pieces_checked += 1
            res = solve_restricted(relaxed_piece(cls), (x, mu))
            if res.converged and res.is_local_min:
                return result(BilevelStatus.EQUILIBRIUM, it + 1, x, mu)
        try:
            pieces = enumerate_pieces(cls, opts.piece_cap)
        except TooManyPieces:
            return result(BilevelStatus.PIECE_FAILED, it + 1, x, mu)
        agree, k, res = piece_agreement(pieces, solve_restricted, (x, mu))
        pieces_checked += len(pieces) if agree else k + 1
        if agree:
            return result(BilevelStatus.EQUILIBRIUM, it + 1, x, mu)
        if not res.converged:
            return result(BilevelStatus.PIECE_FAILED, it + 1, x, mu)
        x, mu = res.x, res.mu
        prev_costs.append(res.leader_cost)
        if len(prev_costs) >= 3 and prev_costs[-3] - prev_costs[-1] <= opts.stall_tol:
            return result(BilevelStatus.MAX_OUTER, it + 1, x, mu)
    return result(BilevelStatus.MAX_OUTER, opts.max_outer, x, mu)
