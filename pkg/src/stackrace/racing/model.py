"""Craft dynamics, responsibility, drafting and stage cost for the race.

Positions are ``(lat, long)`` pairs. Heading is measured from the
longitudinal (race) direction, so ``theta = 0`` drives straight down the
track and ``v_long = v * cos(theta)``.

The ``*_expr`` helpers take a math namespace (``numpy`` or ``sympy``) so the
same formulas feed both the scalar API and the symbolic stage compiler.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

INTEGRATED = "integrated"
PAPER_LITERAL = "paper_literal"


@dataclass(frozen=True)
class RaceParams:
    alpha1: float = 0.001
    alpha2: float = 0.0001
    beta: float = 0.1
    n_T: int = 10
    dt: float = 0.1
    c_drag: float = 0.1
    r_col: float = 1.0
    tau_nom_max: float = 1.0
    tau_draft_max: float = 3.0
    tau_min: float = -3.0
    omega_max: float = 3.0
    w_track: float = 4.0
    w_draft: float = 5.0
    l_draft: float = 5.0
    col_buffer: float = 0.2
    a: float = 5.0
    b: float = 4.5
    gate_sharpness: float = 4.0
    dynamics_mode: str = INTEGRATED

    def __post_init__(self):
        mode = self.dynamics_mode.replace("-", "_")
        if mode not in (INTEGRATED, PAPER_LITERAL):
            raise ValueError(f"unknown dynamics_mode {self.dynamics_mode!r}")
        object.__setattr__(self, "dynamics_mode", mode)
        if self.n_T < 1:
            raise ValueError("n_T must be at least 1")
        for name in ("dt", "r_col", "tau_nom_max", "omega_max", "w_track", "w_draft",
                     "l_draft", "a", "gate_sharpness"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.tau_draft_max < self.tau_nom_max:
            raise ValueError("tau_draft_max must be >= tau_nom_max")
        if self.tau_min >= 0 or self.c_drag < 0 or self.col_buffer < 0:
            raise ValueError("tau_min must be negative, c_drag and col_buffer non-negative")

    @property
    def r_plan(self) -> float:
        return self.r_col + self.col_buffer

    def replace(self, **kw) -> "RaceParams":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class CraftState:
    p_lat: float
    p_long: float
    v: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_lat, self.p_long, self.v, self.theta])

    @property
    def position(self) -> tuple[float, float]:
        return (self.p_lat, self.p_long)

    @classmethod
    def from_array(cls, y) -> "CraftState":
        return cls(*(float(t) for t in y))


@dataclass(frozen=True)
class Control:
    tau: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tau, self.omega])


def sigmoid(z, m=np):
    if m is np:
        return expit(z)
    from .stages import Sigmoid
    return Sigmoid(z)


def responsibility_expr(h, a, b, m=np):
    """Ego responsibility for ``h = opp_long - ego_long``; positive when trailing."""
    return sigmoid(a * h - b, m) - 1 / (1 + m.exp(b))


def draft_gate_expr(dlong, dlat, p, m=np):
    """Smooth triangle behind the opponent, values in (0, 1).

    ``dlong = opp_long - ego_long`` (positive when the ego trails),
    ``dlat = opp_lat - ego_lat``. The lateral half-width tapers from
    ``w_draft / 2`` at the opponent to zero at ``l_draft`` behind.
    """
    s = p.gate_sharpness
    half = (p.w_draft / 2) * (1 - dlong / p.l_draft)
    return (sigmoid(s * dlong, m) * sigmoid(s * (p.l_draft - dlong), m)
            * sigmoid(s * (half - dlat), m) * sigmoid(s * (half + dlat), m))


def draft_limit_expr(ego_pos, opp_pos, p, m=np):
    g = draft_gate_expr(opp_pos[1] - ego_pos[1], opp_pos[0] - ego_pos[0], p, m)
    return p.tau_nom_max + (p.tau_draft_max - p.tau_nom_max) * g


def collision_expr(ego_pos, opp_pos, p, m=np):
    d2 = (ego_pos[0] - opp_pos[0]) ** 2 + (ego_pos[1] - opp_pos[1]) ** 2
    return d2 - p.r_plan ** 2 - responsibility_expr(opp_pos[1] - ego_pos[1], p.a, p.b, m)


def dynamics_expr(y0, u, p, m=np):
    """Next state from ``y0 = (lat, long, v, theta)`` and ``u = (tau, omega)``."""
    lat, long, v, th = y0
    tau, om = u
    if p.dynamics_mode == PAPER_LITERAL:
        v1 = tau - p.c_drag * v
        th1 = om
    else:
        v1 = v + p.dt * (tau - p.c_drag * v)
        th1 = th + p.dt * om
    # positions use the end-of-step speed and heading (implicit Euler)
    return (lat + p.dt * v1 * m.sin(th1), long + p.dt * v1 * m.cos(th1), v1, th1)


def stage_cost_expr(y, u, y_opp, center, radius, p, m=np):
    d2 = (y[0] - center[0]) ** 2 + (y[1] - center[1]) ** 2
    return (p.alpha1 ** 2 * (d2 - radius ** 2) ** 2
            + p.alpha2 * (u[0] ** 2 + u[1] ** 2)
            + p.beta * (y_opp[2] * m.cos(y_opp[3]) - y[2] * m.cos(y[3])))


# ---- scalar API -------------------------------------------------------------

def step_dynamics(state: CraftState, control: Control, params: RaceParams) -> CraftState:
    y = dynamics_expr(state.as_array(), control.as_array(), params, np)
    return CraftState.from_array(y)


def responsibility(h: float, params: RaceParams) -> tuple[float, float]:
    """``(ell_1, ell_2)`` for ``h = p2_long - p1_long``."""
    with np.errstate(over="ignore"):
        l1 = float(responsibility_expr(h, params.a, params.b))
        l2 = float(responsibility_expr(-h, params.a, params.b))
    return l1, l2


def collision_constraint(p1, p2, i: int, params: RaceParams) -> float:
    """Planning-radius collision constraint of player ``i`` (0 or 1)."""
    ego, opp = (p1, p2) if i == 0 else (p2, p1)
    with np.errstate(over="ignore"):
        return float(collision_expr(ego, opp, params))


def draft_limit(p_ego, p_opp, params: RaceParams) -> float:
    with np.errstate(over="ignore"):
        return float(draft_limit_expr(p_ego, p_opp, params))


def stage_cost(ego: CraftState, control: Control, opp: CraftState, arc, params: RaceParams) -> float:
    return float(stage_cost_expr(ego.as_array(), control.as_array(), opp.as_array(),
                                 arc.center, arc.radius, params))


def collided(p1, p2, params: RaceParams) -> bool:
    return math.hypot(p1[0] - p2[0], p1[1] - p2[1]) < params.r_col
