"""Symbolic per-stage functions, compiled once and evaluated over the horizon.

Every stage ``t`` of a player's problem depends on 16 local quantities:
own state at ``t`` (4), own control at ``t`` (2), own state at ``t - 1``
(4), opponent state at ``t`` (4) and opponent position at ``t - 1`` (2).
Stage outputs are the running cost, then 10 inequalities and 4 dynamics
equalities. Gradients and Hessians of each output with respect to the 16
locals are generated with sympy and lambdified with common-subexpression
elimination; the game assembles them by index scatter.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from types import SimpleNamespace

import numpy as np
import sympy
from scipy.special import expit

from . import model

LOCALS = ("lat", "long", "v", "th", "tau", "om",
          "lat0", "long0", "v0", "th0",
          "olat", "olong", "ov", "oth", "olat0", "olong0")
N_LOCAL = len(LOCALS)
N_INEQ = 10
N_EQ = 4
N_OUT = 1 + N_INEQ + N_EQ

INEQ_NAMES = ("collision", "track_inner", "track_outer", "speed_floor",
              "heading_max", "heading_min", "thrust_min", "thrust_draft",
              "turn_max", "turn_min")
EQ_NAMES = ("lat", "long", "v", "theta")

PARAM_FIELDS = ("alpha1", "alpha2", "beta", "dt", "c_drag", "r_col", "col_buffer",
                "tau_nom_max", "tau_draft_max", "tau_min", "omega_max", "w_track",
                "w_draft", "l_draft", "a", "b", "gate_sharpness")
ARC_FIELDS = ("c_lat", "c_long", "radius")


class Sigmoid(sympy.Function):
    """Logistic function with closed-form derivatives; lambdifies to ``expit``."""

    def fdiff(self, argindex=1):
        s = Sigmoid(self.args[0])
        return s * (1 - s)


def stage_outputs(loc, arc, p, m=np):
    """The 15 stage outputs as expressions in namespace ``m``."""
    y = (loc.lat, loc.long, loc.v, loc.th)
    u = (loc.tau, loc.om)
    y0 = (loc.lat0, loc.long0, loc.v0, loc.th0)
    yo = (loc.olat, loc.olong, loc.ov, loc.oth)
    pos, opos = (loc.lat, loc.long), (loc.olat, loc.olong)
    d2 = (loc.lat - arc.c_lat) ** 2 + (loc.long - arc.c_long) ** 2
    half = p.w_track / 2
    cost = model.stage_cost_expr(y, u, yo, (arc.c_lat, arc.c_long), arc.radius, p, m)
    ineq = [
        model.collision_expr(pos, opos, p, m),
        d2 - (arc.radius - half) ** 2,
        (arc.radius + half) ** 2 - d2,
        loc.v,
        m.pi / 2 - loc.th,
        loc.th + m.pi / 2,
        loc.tau - p.tau_min,
        # the draft boost for this step's control is set by the previous positions
        model.draft_limit_expr((loc.lat0, loc.long0), (loc.olat0, loc.olong0), p, m) - loc.tau,
        p.omega_max - loc.om,
        loc.om + p.omega_max,
    ]
    nxt = model.dynamics_expr(y0, u, p, m)
    eq = [y[j] - nxt[j] for j in range(4)]
    return [cost] + ineq + eq


class _SymParams(SimpleNamespace):
    @property
    def r_plan(self):
        return self.r_col + self.col_buffer


@dataclass
class CompiledStages:
    """Lambdified stage outputs and their nonzero first and second derivatives."""

    values: callable
    grad: callable
    grad_out: np.ndarray   # output index of each gradient entry
    grad_var: np.ndarray   # local variable index
    hess: callable
    hess_out: np.ndarray
    hess_a: np.ndarray
    hess_b: np.ndarray


def _lambdify(args, exprs):
    f = sympy.lambdify(args, exprs, modules=[{"Sigmoid": expit}, "numpy"], cse=True)

    def call(local_cols, extra, n):
        with np.errstate(over="ignore"):
            out = f(*local_cols, *extra)
        arr = np.empty((len(exprs), n))
        for k, e in enumerate(out):
            arr[k] = e
        return arr

    return call


@lru_cache(maxsize=None)
def compile_stages(dynamics_mode: str) -> CompiledStages:
    loc = SimpleNamespace(**{name: sympy.Symbol(name, real=True) for name in LOCALS})
    arc = SimpleNamespace(**{name: sympy.Symbol(name, real=True) for name in ARC_FIELDS})
    psym = {name: sympy.Symbol(name, real=True) for name in PARAM_FIELDS}
    p = _SymParams(**psym, dynamics_mode=dynamics_mode)
    outs = [sympy.sympify(e) for e in stage_outputs(loc, arc, p, sympy)]
    local_syms = [getattr(loc, name) for name in LOCALS]
    args = local_syms + [getattr(arc, name) for name in ARC_FIELDS] + [psym[k] for k in PARAM_FIELDS]

    g_exprs, g_out, g_var = [], [], []
    h_exprs, h_out, h_a, h_b = [], [], [], []
    for e, expr in enumerate(outs):
        grads = [sympy.diff(expr, s) for s in local_syms]
        for a, ga in enumerate(grads):
            if ga == 0:
                continue
            g_exprs.append(ga)
            g_out.append(e)
            g_var.append(a)
            for b in range(a, N_LOCAL):
                hab = sympy.diff(ga, local_syms[b])
                if hab == 0:
                    continue
                h_exprs.append(hab)
                h_out.append(e)
                h_a.append(a)
                h_b.append(b)

    return CompiledStages(
        values=_lambdify(args, outs),
        grad=_lambdify(args, g_exprs),
        grad_out=np.array(g_out), grad_var=np.array(g_var),
        hess=_lambdify(args, h_exprs),
        hess_out=np.array(h_out), hess_a=np.array(h_a), hess_b=np.array(h_b),
    )


def param_values(params: model.RaceParams) -> list[float]:
    return [float(getattr(params, k)) for k in PARAM_FIELDS]
