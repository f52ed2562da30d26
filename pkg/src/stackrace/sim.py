"""Receding-horizon race simulation with per-player strategies.

Each step both players plan independently on a game built in their own
frame (ego as player 1), execute the first control of their plan and the
joint state advances. Planning is self-contained per player, so swapping
the labels of a competition swaps the trace exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bilevel import BilevelOptions, BilevelStatus, solve_bilevel, solve_follower
from .mcp import SolverOptions
from .nash import player_certificate, solve_nash
from .nlp import best_response, estimate_multipliers, iterated_best_response
from .racing import (
    Control, CraftState, RaceGame, RaceParams, TrackLayout, build_game, default_track,
    fit_arc, on_track, stage_cost, step_dynamics,
)
from .racing.model import collided, draft_limit


class StrategyKind(str, enum.Enum):
    SINGLE = "S"
    NASH = "N"
    LEADER = "L"
    FOLLOWER = "F"

    @property
    def long_name(self) -> str:
        return {"S": "SinglePlayer", "N": "Nash", "L": "Leader", "F": "Follower"}[self.value]

    @classmethod
    def parse(cls, text: str) -> "StrategyKind":
        t = text.strip()
        for k in cls:
            if t.upper() == k.value or t.lower() == k.long_name.lower():
                return k
        raise ValueError(f"unknown strategy {text!r}")


STRATEGY_ORDER = (StrategyKind.SINGLE, StrategyKind.NASH, StrategyKind.LEADER, StrategyKind.FOLLOWER)


@dataclass(frozen=True)
class CompetitionType:
    p1: StrategyKind
    p2: StrategyKind

    @property
    def label(self) -> str:
        return f"{self.p1.value}-{self.p2.value}"

    @classmethod
    def parse(cls, text: str) -> "CompetitionType":
        parts = text.replace(",", "-").split("-")
        if len(parts) != 2:
            raise ValueError(f"competition must look like 'L-F', got {text!r}")
        return cls(StrategyKind.parse(parts[0]), StrategyKind.parse(parts[1]))

    def swapped(self) -> "CompetitionType":
        return CompetitionType(self.p2, self.p1)

    def canonical(self) -> "CompetitionType":
        """The representative of this cell among the 10 unordered pairs."""
        a, b = STRATEGY_ORDER.index(self.p1), STRATEGY_ORDER.index(self.p2)
        return self if a <= b else self.swapped()

    @property
    def is_canonical(self) -> bool:
        return self.canonical() == self


ALL_CELLS = tuple(CompetitionType(a, b) for a in STRATEGY_ORDER for b in STRATEGY_ORDER)
CANONICAL_CELLS = tuple(c for c in ALL_CELLS if c.is_canonical)


# --------------------------------------------------------------------------
# planning


@dataclass
class PlannerOptions:
    """Solver settings and effort caps for one receding-horizon plan."""

    tol: float = 1e-8
    warm_newton_iter: int = 25      # Newton iterations tried directly from a warm start
    polish_iter: int = 40           # Newton iterations after best-response seeding
    stall_iter: int = 10
    br_rounds: int = 6
    br_maxiter: int = 100
    bilevel_max_outer: int = 3
    bilevel_newton_iter: int = 20
    piece_cap: int = 16
    piece_seed: bool = True
    seed_maxiter: int = 40          # SLSQP iterations when re-seeding a failed piece solve
    relaxed_check: bool = True
    piece_stall_iter: int = 5

    def mcp(self, max_iter: int) -> SolverOptions:
        return SolverOptions(tol=self.tol, max_iter=max_iter, stall_iter=self.stall_iter)

    def bilevel(self) -> BilevelOptions:
        return BilevelOptions(piece_cap=self.piece_cap, max_outer=self.bilevel_max_outer,
                              mcp=self.mcp(self.bilevel_newton_iter),
                              piece_mcp=SolverOptions(tol=self.tol, max_iter=self.bilevel_newton_iter,
                                                      stall_iter=self.piece_stall_iter),
                              piece_seed=self.piece_seed, seed_maxiter=self.seed_maxiter,
                              relaxed_check=self.relaxed_check)


@dataclass
class Warm:
    """What a player carries between steps (already time-shifted)."""

    x: np.ndarray | None = None                  # previous plan's joint vector
    nash: tuple | None = None                    # (x, duals) of the previous Nash solution


@dataclass
class Plan:
    controls: np.ndarray           # (n_T, 2) ego controls
    status: str
    fallback_level: int
    rung: str
    attempts: tuple = ()
    x: np.ndarray | None = field(default=None, repr=False)
    nash: tuple | None = field(default=None, repr=False)
    certificate: float = math.nan      # KKT violation of the accepted solve; NaN if uncontrolled


RUNGS = {
    StrategyKind.SINGLE: ("single_player", "uncontrolled"),
    StrategyKind.NASH: ("nash", "single_player", "uncontrolled"),
    StrategyKind.LEADER: ("bilevel_nash_init", "bilevel_single_player_init", "uncontrolled"),
    StrategyKind.FOLLOWER: ("bilevel_nash_init", "bilevel_single_player_init", "uncontrolled"),
}


def solve_single_player(rg: RaceGame, ego: int, start=None, opts: PlannerOptions | None = None):
    """Ego's problem against the opponent extrapolated at constant speed and heading.

    Returns ``(x, duals, status)``; the status is that of the final
    complementarity solve, which certifies the plan.
    """
    opts = opts or PlannerOptions()
    game = rg.game
    opp = 1 - ego
    x = np.array(rg.initial_guess() if start is None else start, dtype=float)
    x[game.block_of(opp)] = rg.constant_velocity_block(opp)
    br = best_response(game, ego, x, opts.br_maxiter)
    lam = estimate_multipliers(game, ego, br.x)
    fol = solve_follower(game, ego, br.x, lam, opts.mcp(opts.polish_iter))
    return fol.x, fol.mu, fol.status.value


def solve_nash_seeded(rg: RaceGame, warm: tuple | None = None, opts: PlannerOptions | None = None):
    """Newton from the warm start if there is one, else (or on failure)
    best-response seeding followed by Newton polishing."""
    opts = opts or PlannerOptions()
    game = rg.game
    if warm is not None:
        res = solve_nash(game, warm[0], warm[1], opts.mcp(opts.warm_newton_iter))
        if res.converged:
            return res
        x0 = warm[0]
    else:
        x0 = rg.initial_guess()
    ibr = iterated_best_response(game, x0, opts.br_rounds, maxiter=opts.br_maxiter)
    duals = tuple(estimate_multipliers(game, i, ibr.x) for i in range(2))
    return solve_nash(game, ibr.x, duals, opts.mcp(opts.polish_iter))


def plan(strategy: StrategyKind, rg: RaceGame, ego: int = 0, warm: Warm | None = None,
         opts: PlannerOptions | None = None) -> Plan:
    """Run the strategy's fallback chain; the last rung (zero controls) always succeeds."""
    opts = opts or PlannerOptions()
    warm = warm or Warm()
    game = rg.game
    blk = game.block_of(ego)
    attempts = []

    def done(level, status, x, cert, nash=None):
        ctrl = rg.controls(x, ego).copy()
        return Plan(ctrl, status, level, RUNGS[strategy][level], tuple(attempts), x, nash,
                    cert.violation)

    def sp():
        x, mu, status = solve_single_player(rg, ego, warm.x, opts)
        attempts.append(status)
        return x, mu, status == "Converged"

    if strategy is StrategyKind.SINGLE:
        x, mu, ok = sp()
        if ok:
            return done(0, attempts[-1], x, player_certificate(game, ego, x, mu))
    elif strategy is StrategyKind.NASH:
        res = solve_nash_seeded(rg, warm.nash, opts)
        attempts.append(res.status.value)
        if res.converged:
            return done(0, res.status.value, res.x, res.certificate(game), (res.x, res.duals))
        x, mu, ok = sp()
        if ok:
            return done(1, attempts[-1], x, player_certificate(game, ego, x, mu))
    else:
        leader = ego if strategy is StrategyKind.LEADER else 1 - ego
        follower = 1 - leader
        nash_keep = None
        res = solve_nash_seeded(rg, warm.nash, opts)
        attempts.append(res.status.value)
        if res.converged:
            nash_keep = (res.x, res.duals)
            b = solve_bilevel(game, leader, res.x, opts.bilevel(), mu0=res.duals[follower])
            attempts.append(b.status.value)
            if b.status is BilevelStatus.EQUILIBRIUM:
                return done(0, b.status.value, b.x, b.certificate(game), nash_keep)
        x_sp, _, ok = sp()
        if ok:
            # the follower block of an ego plan may be an extrapolation
            x_sp = best_response(game, follower, x_sp, opts.br_maxiter).x
            mu_f = estimate_multipliers(game, follower, x_sp)
            b = solve_bilevel(game, leader, x_sp, opts.bilevel(), mu0=mu_f)
            attempts.append(b.status.value)
            if b.status is BilevelStatus.EQUILIBRIUM:
                return done(1, b.status.value, b.x, b.certificate(game), nash_keep)
        return Plan(np.zeros((rg.n_T, 2)), "Uncontrolled", 2, RUNGS[strategy][2],
                    tuple(attempts), None, nash_keep)
    level = len(RUNGS[strategy]) - 1
    return Plan(np.zeros((rg.n_T, 2)), "Uncontrolled", level, RUNGS[strategy][level], tuple(attempts))


def shift_warm(rg: RaceGame, p: Plan) -> Warm:
    def shift_x(x):
        return np.concatenate([rg.shift_block(rg.game.gather(x, i)) for i in range(2)])

    x = shift_x(p.x) if p.x is not None else None
    nash = None
    if p.nash is not None:
        nash = (shift_x(p.nash[0]), tuple(rg.shift_duals(d) for d in p.nash[1]))
    return Warm(x, nash)


# --------------------------------------------------------------------------
# simulation


class Termination(str, enum.Enum):
    COMPLETED = "Completed"
    TRACK = "TrackViolation"
    COLLISION = "Collision"


@dataclass
class StepRecord:
    step: int
    state: tuple            # 8 values: lat, long, v, theta for P1 then P2, before the step
    controls: tuple         # tau1, omega1, tau2, omega2 executed
    costs: tuple            # realized stage cost of P1, P2
    statuses: tuple         # plan status per player
    levels: tuple           # fallback level per player
    certs: tuple = (math.nan, math.nan)   # KKT violation of each accepted plan


@dataclass
class SimTrace:
    pair: CompetitionType
    seed: int
    steps: list
    termination: Termination
    violation_step: int | None
    final_state: tuple
    horizon: int

    @property
    def steps_completed(self) -> int:
        return len(self.steps)

    def total_cost(self, i: int) -> float:
        return float(math.fsum(r.costs[i] for r in self.steps))

    def summary(self) -> dict:
        return {
            "pair": self.pair.label, "seed": self.seed, "horizon": self.horizon,
            "termination": self.termination.value,
            "violation_step": -1 if self.violation_step is None else self.violation_step,
            "steps": self.steps_completed,
            "cost_p1": self.total_cost(0), "cost_p2": self.total_cost(1),
            "fallbacks_p1": sum(r.levels[0] > 0 for r in self.steps),
            "fallbacks_p2": sum(r.levels[1] > 0 for r in self.steps),
        }

    def mirrored(self) -> "SimTrace":
        """Same trace with the player labels swapped."""
        steps = [StepRecord(r.step, r.state[4:] + r.state[:4], r.controls[2:] + r.controls[:2],
                            r.costs[::-1], r.statuses[::-1], r.levels[::-1], r.certs[::-1])
                 for r in self.steps]
        return SimTrace(self.pair.swapped(), self.seed, steps, self.termination,
                        self.violation_step, self.final_state[4:] + self.final_state[:4], self.horizon)


def check_violation(states, track: TrackLayout, params: RaceParams) -> Termination | None:
    """Absolute safety check: bare collision radius and the true track edges."""
    if collided(states[0].position, states[1].position, params):
        return Termination.COLLISION
    for s in states:
        if not on_track(track, s.position):
            return Termination.TRACK
    return None


def _clip_control(u, ego: CraftState, opp: CraftState, params: RaceParams) -> Control:
    tau_hi = draft_limit(ego.position, opp.position, params)
    tau = min(max(float(u[0]), params.tau_min), tau_hi)
    om = min(max(float(u[1]), -params.omega_max), params.omega_max)
    return Control(tau, om)


def simulate(init, pair: CompetitionType, params: RaceParams | None = None,
             horizon_steps: int = 25, seed: int = 0, track: TrackLayout | None = None,
             opts: PlannerOptions | None = None) -> SimTrace:
    params = params or RaceParams()
    track = track or default_track(width=params.w_track)
    opts = opts or PlannerOptions()
    states = (init[0], init[1])
    strategies = (pair.p1, pair.p2)
    warm = [Warm(), Warm()]
    steps = []
    for k in range(horizon_steps):
        bad = check_violation(states, track, params)
        if bad is not None:
            return SimTrace(pair, seed, steps, bad, k, _flat(states), horizon_steps)
        arcs = tuple(fit_arc(track, s.position) for s in states)
        plans = []
        for i in range(2):
            o = 1 - i
            rg = build_game((states[i], states[o]), (arcs[i], arcs[o]), params, check=False)
            pl = plan(strategies[i], rg, 0, warm[i], opts)
            plans.append(pl)
            warm[i] = shift_warm(rg, pl)
        controls = [_clip_control(plans[i].controls[0], states[i], states[1 - i], params)
                    for i in range(2)]
        nxt = tuple(step_dynamics(states[i], controls[i], params) for i in range(2))
        costs = tuple(stage_cost(nxt[i], controls[i], nxt[1 - i], arcs[i], params) for i in range(2))
        steps.append(StepRecord(
            k, _flat(states),
            (controls[0].tau, controls[0].omega, controls[1].tau, controls[1].omega),
            costs, (plans[0].status, plans[1].status),
            (plans[0].fallback_level, plans[1].fallback_level),
            (plans[0].certificate, plans[1].certificate)))
        states = nxt
    bad = check_violation(states, track, params)
    term = Termination.COMPLETED if bad is None else bad
    return SimTrace(pair, seed, steps, term, None if bad is None else horizon_steps,
                    _flat(states), horizon_steps)


def _flat(states) -> tuple:
    return tuple(float(v) for s in states for v in s.as_array())


# --------------------------------------------------------------------------
# serialization

TRACE_COLUMNS = ("step", "lat1", "long1", "v1", "theta1", "lat2", "long2", "v2", "theta2",
                 "tau1", "omega1", "tau2", "omega2", "cost1", "cost2",
                 "status1", "status2", "level1", "level2", "cert1", "cert2")


def format_trace(trace: SimTrace) -> str:
    """Line-delimited trace: a ``#`` header with the summary, one line per step."""
    s = trace.summary()
    lines = ["# " + " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
                             for k, v in s.items()),
             "# final " + " ".join(repr(v) for v in trace.final_state),
             "# " + " ".join(TRACE_COLUMNS)]
    for r in trace.steps:
        vals = [str(r.step)] + [repr(float(v)) for v in r.state + r.controls + r.costs]
        vals += list(r.statuses) + [str(v) for v in r.levels] + [repr(float(v)) for v in r.certs]
        lines.append(" ".join(vals))
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> SimTrace:
    lines = text.splitlines()
    head = dict(kv.split("=", 1) for kv in lines[0][2:].split())
    final = tuple(float(v) for v in lines[1].split()[2:])
    steps = []
    for line in lines[3:]:
        f = line.split()
        nums = [float(v) for v in f[1:15]]
        steps.append(StepRecord(int(f[0]), tuple(nums[:8]), tuple(nums[8:12]), tuple(nums[12:14]),
                                (f[15], f[16]), (int(f[17]), int(f[18])),
                                (float(f[19]), float(f[20]))))
    vs = int(head["violation_step"])
    return SimTrace(CompetitionType.parse(head["pair"]), int(head["seed"]), steps,
                    Termination(head["termination"]), None if vs < 0 else vs, final,
                    int(head["horizon"]))


def write_trace(trace: SimTrace, path) -> None:
    Path(path).write_text(format_trace(trace))


def read_trace(path) -> SimTrace:
    return parse_trace(Path(path).read_text())
