"""Two-player constrained games with derivative callbacks.

Every callback takes the *joint* decision vector ``x = [x_1, x_2]``. A
player's constraint vector is ordered inequalities first (``g(x) >= 0``),
then equalities (``h(x) = 0``). Matrices may be dense arrays or scipy
sparse matrices; the solvers accept either.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, NonFinite


def dense(A) -> np.ndarray:
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


@dataclass(frozen=True)
class PlayerProblem:
    """One player's cost ``f_i`` and constraints ``g_i`` / ``h_i``.

    Second-order callbacks:

    ``cost_hess(x)``
        Hessian of ``f_i`` over the joint vector.
    ``cons_hess(x, lam)``
        ``sum_k lam_k * hess(c_k)``.
    ``cons_hvp(x, v)`` (optional)
        Matrix whose row ``k`` is ``hess(c_k) @ v``. Falls back to a central
        difference of ``cons_jac`` along ``v``.
    ``lag_hess_dir(x, lam, v)`` (optional)
        Directional derivative along ``v`` of ``cost_hess - cons_hess(lam)``;
        needed only by the bilevel piece problems. Falls back to a central
        difference of the analytic Hessians.
    ``cons_jac_tvec(x, lam)`` (optional)
        Fast ``cons_jac(x).T @ lam``; residual evaluations call it often.
    """

    n_own: int
    m_ineq: int
    m_eq: int
    cost: Callable
    cost_grad: Callable
    cost_hess: Callable
    cons: Callable
    cons_jac: Callable
    cons_hess: Callable
    cons_hvp: Callable | None = None
    lag_hess_dir: Callable | None = None
    cons_jac_tvec: Callable | None = None

    def jac_t_vec(self, x, lam) -> np.ndarray:
        """``cons_jac(x).T @ lam`` over the joint vector."""
        if self.cons_jac_tvec is not None:
            return np.asarray(self.cons_jac_tvec(x, lam), dtype=float)
        J = self.cons_jac(x)
        if sp.issparse(J):
            return np.asarray(J.T @ lam).ravel()
        return np.asarray(J, dtype=float).reshape(self.m, -1).T @ lam

    @property
    def m(self) -> int:
        return self.m_ineq + self.m_eq

    def lag_hess(self, x, lam):
        H = self.cost_hess(x)
        if self.m == 0:
            return H
        return H - self.cons_hess(x, lam)

    def hvp_rows(self, x, v):
        if self.cons_hvp is not None:
            return self.cons_hvp(x, v)
        eps = _fd_step(x, v)
        return (dense(self.cons_jac(x + eps * v)) - dense(self.cons_jac(x - eps * v))) / (2 * eps)

    def lag_hess_directional(self, x, lam, v):
        if self.lag_hess_dir is not None:
            return self.lag_hess_dir(x, lam, v)
        eps = _fd_step(x, v)
        return (self.lag_hess(x + eps * v, lam) - self.lag_hess(x - eps * v, lam)) / (2 * eps)


def _fd_step(x, v) -> float:
    vmax = float(np.max(np.abs(v), initial=0.0))
    if vmax == 0.0:
        return 1.0
    return 1e-6 * max(1.0, float(np.max(np.abs(x), initial=0.0))) / vmax


@dataclass(frozen=True)
class TwoPlayerGame:
    players: tuple[PlayerProblem, PlayerProblem]

    @property
    def n_total(self) -> int:
        return self.players[0].n_own + self.players[1].n_own

    def block_of(self, i: int) -> slice:
        n1 = self.players[0].n_own
        return slice(0, n1) if i == 0 else slice(n1, self.n_total)

    def scatter(self, x1, x2) -> np.ndarray:
        x = np.empty(self.n_total)
        x[self.block_of(0)] = x1
        x[self.block_of(1)] = x2
        return x

    def gather(self, x, i: int) -> np.ndarray:
        return np.asarray(x)[self.block_of(i)]


@dataclass
class PlayerEvaluation:
    cost: float
    grad_own: np.ndarray
    g: np.ndarray
    jac_own: np.ndarray


def evaluate_player(game: TwoPlayerGame, i: int, x) -> PlayerEvaluation:
    x = np.asarray(x, dtype=float)
    if x.shape != (game.n_total,):
        raise DimensionMismatch(f"x has shape {x.shape}, expected ({game.n_total},)")
    p = game.players[i]
    blk = game.block_of(i)
    cost = float(p.cost(x))
    grad = np.asarray(p.cost_grad(x), dtype=float)[blk]
    g = np.asarray(p.cons(x), dtype=float).reshape(-1)
    jac = dense(p.cons_jac(x)).reshape(p.m, game.n_total)[:, blk]
    for name, val in (("cost", cost), ("grad", grad), ("g", g), ("jac", jac)):
        if not np.all(np.isfinite(val)):
            raise NonFinite(f"player {i + 1} {name} is not finite")
    return PlayerEvaluation(cost, grad, g, jac)


def _fd_jac(fun, x, h):
    f0 = np.atleast_1d(np.asarray(fun(x), dtype=float))
    out = np.zeros((f0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[:, k] = (np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e))) / (2 * h)
    return out


def _rel_err(a, b) -> float:
    a = dense(a)
    b = np.asarray(b).reshape(a.shape)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def check_derivatives(game: TwoPlayerGame, x, step: float | None = None,
                      rng: np.random.Generator | None = None) -> dict[str, float]:
    """Worst relative error of every analytic derivative vs central differences.

    Keys look like ``"p1.cost_grad"``. Hessian checks contract constraints
    with a random multiplier vector.
    """
    x = np.asarray(x, dtype=float)
    if step is None:
        step = 1e-6 * max(1.0, float(np.max(np.abs(x))))
    rng = rng or np.random.default_rng(0)
    report = {}
    for i, p in enumerate(game.players):
        tag = f"p{i + 1}"
        report[f"{tag}.cost_grad"] = _rel_err(
            np.asarray(p.cost_grad(x)).reshape(1, -1), _fd_jac(p.cost, x, step))
        report[f"{tag}.cost_hess"] = _rel_err(p.cost_hess(x), _fd_jac(p.cost_grad, x, step))
        if p.m:
            report[f"{tag}.cons_jac"] = _rel_err(p.cons_jac(x), _fd_jac(p.cons, x, step))
            lam = rng.normal(size=p.m)
            report[f"{tag}.cons_hess"] = _rel_err(
                p.cons_hess(x, lam),
                _fd_jac(lambda y: dense(p.cons_jac(y)).T @ lam, x, step))
            if p.cons_hvp is not None:
                v = rng.normal(size=x.size)
                report[f"{tag}.cons_hvp"] = _rel_err(p.cons_hvp(x, v), _fd_hvp(p, x, v, step))
    return report


def _fd_hvp(p: PlayerProblem, x, v, step):
    # rows: hess(c_k) @ v  ==  d/dt jac(x + t v) evaluated row-wise
    h = step / max(1.0, float(np.max(np.abs(v))))
    return (dense(p.cons_jac(x + h * v)) - dense(p.cons_jac(x - h * v))) / (2 * h)


def symbolic_game(symbols, blocks, costs, ineqs=((), ()), eqs=((), ())) -> TwoPlayerGame:
    """Build a small game from sympy expressions.

    ``symbols`` lists the joint variables in order, ``blocks`` gives each
    player's own-variable count. Derivatives are generated symbolically.
    Intended for toy games and tests; the racing model has its own
    vectorized compiler.
    """
    import sympy

    symbols = list(symbols)
    n = len(symbols)
    if sum(blocks) != n:
        raise DimensionMismatch("blocks must cover the joint vector")

    def lam(expr):
        f = sympy.lambdify([symbols], expr, "numpy")
        return lambda x: np.asarray(f(np.asarray(x, dtype=float)), dtype=float)

    players = []
    for i in range(2):
        f = sympy.sympify(costs[i])
        cons = [sympy.sympify(c) for c in list(ineqs[i]) + list(eqs[i])]
        m = len(cons)
        grad = [sympy.diff(f, s) for s in symbols]
        hess = sympy.hessian(f, symbols)
        c_fun = lam(sympy.Matrix(cons)) if m else (lambda x: np.zeros(0))
        jac_expr = sympy.Matrix(cons).jacobian(symbols) if m else None
        c_hess = [sympy.hessian(c, symbols) for c in cons]
        jac_fun = lam(jac_expr) if m else (lambda x: np.zeros((0, n)))
        c_hess_funs = [lam(h) for h in c_hess]

        def cons_hess(x, lmb, _funs=c_hess_funs):
            out = np.zeros((n, n))
            for k, h in enumerate(_funs):
                out += lmb[k] * h(x)
            return out

        players.append(PlayerProblem(
            n_own=blocks[i],
            m_ineq=len(ineqs[i]),
            m_eq=len(eqs[i]),
            cost=lam(f),
            cost_grad=(lambda x, _g=lam(sympy.Matrix(grad)): _g(x).reshape(-1)),
            cost_hess=lam(hess),
            cons=(lambda x, _c=c_fun: _c(x).reshape(-1)),
            cons_jac=(lambda x, _j=jac_fun, _m=m: _j(x).reshape(_m, n)),
            cons_hess=cons_hess,
        ))
    return TwoPlayerGame(tuple(players))
