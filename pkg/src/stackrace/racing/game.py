"""Assemble the two-player racing game over an ``n_T``-step horizon.

Decision block of player ``i`` (``6 n_T`` entries): states ``y_1..y_nT``
(4 each) followed by controls ``u_1..u_nT`` (2 each); control ``u_t`` drives
``y_{t-1} -> y_t``. Constraint rows are time-major: 10 inequalities per
step, then 4 dynamics equalities per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import DimensionMismatch, InfeasibleStart
from ..problems import PlayerProblem, TwoPlayerGame
from . import model
from .model import CraftState, RaceParams
from .stages import N_EQ, N_INEQ, N_LOCAL, compile_stages, param_values
from .track import Arc


def _index_map(i: int, n_T: int) -> np.ndarray:
    """``(n_T, 16)`` global indices of each stage's locals in the extended vector.

    The extended vector is ``[x, y1_init, y2_init]``; indices ``>= 12 n_T``
    refer to initial-state parameters.
    """
    n_blk = 6 * n_T
    n = 2 * n_blk
    o = 1 - i
    own, opp = i * n_blk, o * n_blk
    k = np.arange(n_T)[:, None]
    j4 = np.arange(4)[None, :]
    j2 = np.arange(2)[None, :]
    y = own + 4 * k + j4
    u = own + 4 * n_T + 2 * k + j2
    y_prev = np.where(k > 0, own + 4 * (k - 1) + j4, n + 4 * i + j4)
    yo = opp + 4 * k + j4
    yo_prev = np.where(k > 0, opp + 4 * (k - 1) + j2, n + 4 * o + j2)
    return np.hstack([y, u, y_prev, yo, yo_prev])


def _row_map(n_T: int) -> np.ndarray:
    """``(n_T, 14)`` constraint row of each stage's constraint output."""
    k = np.arange(n_T)[:, None]
    ineq = N_INEQ * k + np.arange(N_INEQ)[None, :]
    eq = N_INEQ * n_T + N_EQ * k + np.arange(N_EQ)[None, :]
    return np.hstack([ineq, eq])


class _StagePlayer:
    """Callbacks of one player built from the compiled stage functions."""

    def __init__(self, i, n_T, init_ext, arc: Arc, params: RaceParams):
        self.n_T = n_T
        self.n = 12 * n_T
        self.m = (N_INEQ + N_EQ) * n_T
        self.idx = _index_map(i, n_T)
        self.rows = _row_map(n_T)
        self.init_ext = init_ext
        self.extra = [float(arc.center[0]), float(arc.center[1]), float(arc.radius)] + param_values(params)
        self.cs = compile_stages(params.dynamics_mode)
        cs = self.cs
        # gradient entries: (entry, time) -> global column / constraint row
        self.g_col = self.idx[:, cs.grad_var].T
        self.g_is_cost = cs.grad_out == 0
        self.g_row = np.where(cs.grad_out[:, None] > 0,
                              self.rows[:, np.maximum(cs.grad_out - 1, 0)].T, -1)
        self.h_ca = self.idx[:, cs.hess_a].T
        self.h_cb = self.idx[:, cs.hess_b].T
        self.h_is_cost = cs.hess_out == 0
        self.h_row = np.where(cs.hess_out[:, None] > 0,
                              self.rows[:, np.maximum(cs.hess_out - 1, 0)].T, -1)
        self.h_offdiag = cs.hess_a != cs.hess_b
        # constraint Jacobian entries have a fixed pattern without duplicates
        sel = ~self.g_is_cost
        cols, rows = self.g_col[sel], self.g_row[sel]
        self.j_keep = cols < self.n
        order = np.lexsort((cols[self.j_keep], rows[self.j_keep]))
        self.j_order = order
        self.j_indices = cols[self.j_keep][order]
        self.j_indptr = np.concatenate([[0], np.cumsum(np.bincount(rows[self.j_keep], minlength=self.m))])
        self.jt_cols = cols.ravel()
        self.jt_rows = rows.ravel()
        self._cache = {}

    def _ext(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionMismatch(f"x has shape {x.shape}, expected ({self.n},)")
        return np.concatenate([x, self.init_ext])

    def _eval(self, kind, x):
        key = (kind, np.asarray(x, dtype=float).tobytes())
        hit = self._cache.get(kind)
        if hit is not None and hit[0] == key:
            return hit[1]
        xe = self._ext(x)
        cols = list(xe[self.idx].T)
        fn = {"v": self.cs.values, "g": self.cs.grad, "h": self.cs.hess}[kind]
        out = fn(cols, self.extra, self.n_T)
        self._cache[kind] = (key, out)
        return out

    # ---- cost ----
    def cost(self, x):
        return float(self._eval("v", x)[0].sum())

    def cost_grad(self, x):
        G = self._eval("g", x)[self.g_is_cost]
        cols = self.g_col[self.g_is_cost]
        out = np.bincount(cols.ravel(), G.ravel(), minlength=self.n + 8)
        return out[:self.n]

    def cost_hess(self, x):
        H = self._eval("h", x)[self.h_is_cost]
        return self._sym_coo(H, self.h_ca[self.h_is_cost], self.h_cb[self.h_is_cost],
                             self.h_offdiag[self.h_is_cost])

    def _sym_coo(self, vals, ca, cb, offdiag):
        keep = (ca < self.n) & (cb < self.n)
        mirror = keep & offdiag[:, None]
        rows = np.concatenate([ca[keep], cb[mirror]])
        cols = np.concatenate([cb[keep], ca[mirror]])
        data = np.concatenate([vals[keep], vals[mirror]])
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    # ---- constraints ----
    def cons(self, x):
        V = self._eval("v", x)[1:]
        out = np.empty(self.m)
        out[self.rows.T.ravel()] = V.ravel()
        return out

    def cons_jac(self, x):
        G = self._eval("g", x)[~self.g_is_cost]
        data = G[self.j_keep][self.j_order]
        return sp.csr_matrix((data, self.j_indices, self.j_indptr), shape=(self.m, self.n))

    def cons_jac_tvec(self, x, lam):
        G = self._eval("g", x)[~self.g_is_cost].ravel()
        w = G * np.asarray(lam, dtype=float)[self.jt_rows]
        return np.bincount(self.jt_cols, w, minlength=self.n + 8)[:self.n]

    def cons_hess(self, x, lam):
        lam = np.asarray(lam, dtype=float)
        H = self._eval("h", x)
        sel = ~self.h_is_cost
        w = H[sel] * lam[self.h_row[sel]]
        return self._sym_coo(w, self.h_ca[sel], self.h_cb[sel], self.h_offdiag[sel])

    def cons_hvp(self, x, v):
        ve = np.concatenate([np.asarray(v, dtype=float), np.zeros(8)])
        H = self._eval("h", x)
        sel = ~self.h_is_cost
        H, ca, cb, rows = H[sel], self.h_ca[sel], self.h_cb[sel], self.h_row[sel]
        off = self.h_offdiag[sel][:, None]
        # row k gets hess(c_k) @ v: entry (a, b) contributes to column a with v_b
        # and, when off-diagonal, to column b with v_a
        r = np.concatenate([rows.ravel(), rows[np.broadcast_to(off, rows.shape)]])
        c = np.concatenate([ca.ravel(), cb[np.broadcast_to(off, cb.shape)]])
        d = np.concatenate([(H * ve[cb]).ravel(), (H * ve[ca])[np.broadcast_to(off, H.shape)]])
        keep = c < self.n
        return sp.csr_matrix((d[keep], (r[keep], c[keep])), shape=(self.m, self.n))

    def problem(self) -> PlayerProblem:
        return PlayerProblem(
            n_own=6 * self.n_T, m_ineq=N_INEQ * self.n_T, m_eq=N_EQ * self.n_T,
            cost=self.cost, cost_grad=self.cost_grad, cost_hess=self.cost_hess,
            cons=self.cons, cons_jac=self.cons_jac, cons_hess=self.cons_hess,
            cons_hvp=self.cons_hvp, cons_jac_tvec=self.cons_jac_tvec)


@dataclass
class RaceGame:
    """A built racing game plus helpers to move between vectors and trajectories."""

    game: TwoPlayerGame
    params: RaceParams
    init: tuple[CraftState, CraftState]
    arcs: tuple[Arc, Arc]
    _players: tuple = field(repr=False, default=())

    @property
    def n_T(self) -> int:
        return self.params.n_T

    def states(self, x, i: int) -> np.ndarray:
        blk = np.asarray(x)[self.game.block_of(i)]
        return blk[:4 * self.n_T].reshape(self.n_T, 4)

    def controls(self, x, i: int) -> np.ndarray:
        blk = np.asarray(x)[self.game.block_of(i)]
        return blk[4 * self.n_T:].reshape(self.n_T, 2)

    def pack(self, states, controls) -> np.ndarray:
        return np.concatenate([np.asarray(states, float).ravel(), np.asarray(controls, float).ravel()])

    def rollout(self, i: int, controls) -> np.ndarray:
        """Own block obtained by integrating ``controls`` from the initial state."""
        controls = np.asarray(controls, dtype=float).reshape(self.n_T, 2)
        y = self.init[i].as_array()
        traj = np.empty((self.n_T, 4))
        for k in range(self.n_T):
            y = np.array(model.dynamics_expr(y, controls[k], self.params))
            traj[k] = y
        return self.pack(traj, controls)

    def constant_velocity_block(self, i: int) -> np.ndarray:
        """Own block of player ``i`` holding speed and heading constant."""
        s = self.init[i]
        p = self.params
        k = np.arange(1, self.n_T + 1)[:, None]
        step = p.dt * s.v * np.array([[np.sin(s.theta), np.cos(s.theta)]])
        states = np.hstack([np.array([[s.p_lat, s.p_long]]) + k * step,
                            np.full((self.n_T, 1), s.v), np.full((self.n_T, 1), s.theta)])
        if p.dynamics_mode == model.PAPER_LITERAL:
            u = [(1 + p.c_drag) * s.v, s.theta]
        else:
            u = [p.c_drag * s.v, 0.0]
        return self.pack(states, np.tile(u, (self.n_T, 1)))

    def initial_guess(self) -> np.ndarray:
        """Straight-ahead rollouts; a trailing player close in lateral offset
        slows to the leader's speed so the guess starts collision-free."""
        p = self.params
        s = self.init
        lead = 0 if s[0].p_long >= s[1].p_long else 1
        close = abs(s[0].p_lat - s[1].p_lat) < np.hypot(p.r_plan, 1.0) + 0.2
        blocks = []
        for i in range(2):
            target = min(s[i].v, s[lead].v) if (i != lead and close) else s[i].v
            v = s[i].v
            u = np.zeros((self.n_T, 2))
            for k in range(self.n_T):
                if p.dynamics_mode == model.PAPER_LITERAL:
                    tau = target + p.c_drag * v
                else:
                    tau = (target - v) / p.dt + p.c_drag * v
                u[k, 0] = min(max(tau, p.tau_min), p.tau_nom_max)
                v = model.dynamics_expr((0.0, 0.0, v, 0.0), u[k], p)[2]
            blocks.append(self.rollout(i, u))
        return np.concatenate(blocks)

    def shift_block(self, block) -> np.ndarray:
        """Drop the first step of an own block and extend by repeating the last control."""
        n = self.n_T
        block = np.asarray(block, dtype=float)
        states = block[:4 * n].reshape(n, 4)
        controls = block[4 * n:].reshape(n, 2)
        last = np.array(model.dynamics_expr(states[-1], controls[-1], self.params), dtype=float)
        return self.pack(np.vstack([states[1:], last]), np.vstack([controls[1:], controls[-1:]]))

    def shift_duals(self, lam) -> np.ndarray:
        """Time-shift one player's multipliers (inequality rows, then equality rows)."""
        n = self.n_T
        lam = np.asarray(lam, dtype=float)
        ineq = lam[:N_INEQ * n].reshape(n, N_INEQ)
        eq = lam[N_INEQ * n:].reshape(n, N_EQ)
        return np.concatenate([np.vstack([ineq[1:], ineq[-1:]]).ravel(),
                               np.vstack([eq[1:], eq[-1:]]).ravel()])

    def stage_values(self, x, i: int) -> np.ndarray:
        """``(15, n_T)`` raw stage outputs: cost row, 10 inequality rows, 4 equality rows."""
        return self._players[i]._eval("v", x)


def check_start(init, arcs, params: RaceParams) -> None:
    """Raise InfeasibleStart if the current joint state violates track or collision limits."""
    p1, p2 = init[0].position, init[1].position
    if model.collided(p1, p2, params):
        raise InfeasibleStart("players overlap")
    half = params.w_track / 2
    for i, (s, arc) in enumerate(zip(init, arcs)):
        d = np.hypot(s.p_lat - arc.center[0], s.p_long - arc.center[1])
        if not (arc.radius - half <= d <= arc.radius + half):
            raise InfeasibleStart(f"player {i + 1} is off the track")


def build_game(init: tuple[CraftState, CraftState], arcs: tuple[Arc, Arc],
               params: RaceParams | None = None, check: bool = True) -> RaceGame:
    params = params or RaceParams()
    if check:
        check_start(init, arcs, params)
    init_ext = np.concatenate([init[0].as_array(), init[1].as_array()])
    players = tuple(_StagePlayer(i, params.n_T, init_ext, arcs[i], params) for i in range(2))
    game = TwoPlayerGame(tuple(p.problem() for p in players))
    return RaceGame(game, params, tuple(init), tuple(arcs), players)
