"""Objective-merit best responses used to seed the complementarity solves.

The semismooth Newton method on the mid-function is fast near a solution but
its residual merit has many spurious local minima on nonconvex problems. A
sequential quadratic programming solve of a single player's problem uses the
player's own cost as merit and is far more reliable from a rough start, so
the game solvers use it to produce starting points. Certification always
comes from the complementarity solve that follows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import Bounds, lsq_linear, minimize

from .problems import TwoPlayerGame, dense


@dataclass
class BestResponse:
    x: np.ndarray          # joint vector with the player's block replaced
    success: bool
    iterations: int


def best_response(game: TwoPlayerGame, i: int, x, maxiter: int = 100,
                  ftol: float = 1e-10) -> BestResponse:
    """Player ``i``'s constrained minimizer with the other block of ``x`` fixed."""
    p = game.players[i]
    blk = game.block_of(i)
    x = np.array(x, dtype=float)
    mi = p.m_ineq

    def full(w):
        out = x.copy()
        out[blk] = w
        return out

    def jac_rows(w, rows):
        return dense(p.cons_jac(full(w)))[rows][:, blk]

    cons = []
    if mi:
        cons.append({"type": "ineq", "fun": lambda w: np.asarray(p.cons(full(w)))[:mi],
                     "jac": lambda w: jac_rows(w, slice(0, mi))})
    if p.m_eq:
        cons.append({"type": "eq", "fun": lambda w: np.asarray(p.cons(full(w)))[mi:],
                     "jac": lambda w: jac_rows(w, slice(mi, p.m))})
    with np.errstate(all="ignore"):
        res = minimize(lambda w: p.cost(full(w)), x[blk],
                       jac=lambda w: np.asarray(p.cost_grad(full(w)))[blk],
                       constraints=cons, method="SLSQP",
                       options={"maxiter": maxiter, "ftol": ftol})
    ok = bool(res.success) and bool(np.all(np.isfinite(res.x)))
    return BestResponse(full(res.x) if ok else x, ok, int(res.nit))


def estimate_multipliers(game: TwoPlayerGame, i: int, x, act_tol: float = 1e-5) -> np.ndarray:
    """Least-squares multipliers for player ``i``'s stationarity at ``x``.

    Inactive inequalities get zero; active ones are constrained nonnegative.
    """
    p = game.players[i]
    if p.m == 0:
        return np.zeros(0)
    x = np.asarray(x, dtype=float)
    blk = game.block_of(i)
    J = dense(p.cons_jac(x))[:, blk]
    grad = np.asarray(p.cost_grad(x))[blk]
    c = np.asarray(p.cons(x))
    active = np.ones(p.m, bool)
    active[:p.m_ineq] = c[:p.m_ineq] <= act_tol
    is_ineq = np.arange(p.m) < p.m_ineq
    lam = np.zeros(p.m)
    if active.any():
        lo = np.where(is_ineq, 0.0, -np.inf)[active]
        sol = lsq_linear(J[active].T, grad, bounds=(lo, np.full(lo.size, np.inf)))
        lam[active] = sol.x
    return lam


@dataclass
class BestResponseIteration:
    x: np.ndarray
    converged: bool
    rounds: int
    last_change: float


def iterated_best_response(game: TwoPlayerGame, x0, rounds: int = 8, tol: float = 1e-5,
                           maxiter: int = 100) -> BestResponseIteration:
    """Alternate best responses (player 1 then player 2) until the point settles."""
    x = np.array(x0, dtype=float)
    change = np.inf
    for k in range(rounds):
        prev = x.copy()
        for i in range(2):
            x = best_response(game, i, x, maxiter).x
        change = float(np.max(np.abs(x - prev), initial=0.0))
        if change <= tol:
            return BestResponseIteration(x, True, k + 1, change)
    return BestResponseIteration(x, False, rounds, change)


def piece_best_response(game: TwoPlayerGame, leader: int, role, x, mu,
                        maxiter: int = 200, ftol: float = 1e-12):
    """Leader's minimizer over one follower piece, as a plain NLP.

    ``role[k]`` describes follower constraint row ``k``: 1 keeps it at
    equality with a free multiplier, 2 keeps it an inequality with its
    multiplier at zero, 4 keeps both the row and its multiplier as
    inequalities. Variables are the joint decisions plus the free follower
    multipliers, constrained by the leader's constraints, the follower's
    stationarity and the rows. Returns ``(x, mu, success)``.
    """
    fol = 1 - leader
    pl, pf = game.players[leader], game.players[fol]
    blk = game.block_of(fol)
    n, mf, mi = game.n_total, pf.m, pl.m_ineq
    role = np.asarray(role)
    if np.any((role == 3) | (role == 5)):
        raise ValueError("multipliers with finite upper bounds are not supported")
    free = np.flatnonzero((role == 1) | (role == 4))
    eq_rows = np.flatnonzero(role == 1)
    in_rows = np.flatnonzero((role != 1) & (np.arange(mf) < pf.m_ineq))
    k = free.size

    def unpack(w):
        m = np.zeros(mf)
        m[free] = w[n:]
        return w[:n], m

    def pad(J):
        return np.hstack([J, np.zeros((J.shape[0], k))])

    def stat(w):
        xx, m = unpack(w)
        return np.asarray(pf.cost_grad(xx))[blk] - pf.jac_t_vec(xx, m)[blk]

    def stat_jac(w):
        xx, m = unpack(w)
        Jf = dense(pf.cons_jac(xx))
        H = dense(pf.lag_hess(xx, m))
        return np.hstack([H[blk], -Jf[:, blk].T[:, free]])

    def rows(idx):
        return {"fun": lambda w: np.asarray(pf.cons(w[:n]))[idx],
                "jac": lambda w: pad(dense(pf.cons_jac(w[:n]))[idx])}

    cons = [{"type": "eq", "fun": stat, "jac": stat_jac}]
    if mi:
        cons.append({"type": "ineq", "fun": lambda w: np.asarray(pl.cons(w[:n]))[:mi],
                     "jac": lambda w: pad(dense(pl.cons_jac(w[:n]))[:mi])})
    if pl.m_eq:
        cons.append({"type": "eq", "fun": lambda w: np.asarray(pl.cons(w[:n]))[mi:],
                     "jac": lambda w: pad(dense(pl.cons_jac(w[:n]))[mi:])})
    if eq_rows.size:
        cons.append({"type": "eq", **rows(eq_rows)})
    if in_rows.size:
        cons.append({"type": "ineq", **rows(in_rows)})
    lb = np.concatenate([np.full(n, -np.inf), np.where(free < pf.m_ineq, 0.0, -np.inf)])
    w0 = np.concatenate([np.asarray(x, dtype=float), np.asarray(mu, dtype=float)[free]])
    w0[n:] = np.maximum(w0[n:], lb[n:])
    with np.errstate(all="ignore"):
        res = minimize(lambda w: pl.cost(w[:n]), w0,
                       jac=lambda w: np.concatenate([pl.cost_grad(w[:n]), np.zeros(k)]),
                       constraints=cons, bounds=Bounds(lb, np.full(lb.size, np.inf)),
                       method="SLSQP", options={"maxiter": maxiter, "ftol": ftol})
    if not np.all(np.isfinite(res.x)):
        return np.asarray(x, dtype=float), np.asarray(mu, dtype=float), False
    xs, ms = unpack(res.x)
    return xs, ms, bool(res.success)
