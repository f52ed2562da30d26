"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one pass/fail line, printed in the terminal summary.
Criteria 6-8 read stored study directories:

* ``results/smoke``: ``stackrace study --config configs/smoke.cfg --out results/smoke``
* ``results/desk``:  ``stackrace study --config configs/desk.cfg --out results/desk``

The desk-scale study needs at least 200 finished conditions. With fewer,
criteria 7 and 8 are evaluated on the finished conditions, recorded as
FAIL and marked xfail (the data requirement is not met); with 200 or more
they are asserted.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import sympy
from scipy.special import expit

from oracles import grid_local_min, lcp_enumerate
from stackrace.bilevel import BilevelStatus, piece_agreement, solve_bilevel
from stackrace.mcp import MCPProblem, solve_mcp
from stackrace.nash import solve_nash
from stackrace.problems import check_derivatives
from stackrace.racing import (
    CraftState, RaceParams, build_game, default_track, draft_limit, fit_arc, responsibility,
)
from stackrace.racing import model
from stackrace.racing.track import circumcircle
from stackrace.sim import CompetitionType, format_trace, simulate
from stackrace.study import load_results, run_study, sample_initial_conditions, summarize
from stackrace.toys import decoupled_toy, nash_toy, stackelberg_toy

ROOT = Path(__file__).resolve().parents[1]
SMOKE_DIR = ROOT / "results" / "smoke"
DESK_DIR = ROOT / "results" / "desk"
DESK_MIN_CONDITIONS = 200
DESK_HORIZON = 25


# ---- 1: MCP vs exhaustive active sets --------------------------------------

def test_criterion_1_mcp_matches_active_set_oracle(criterion):
    rng = np.random.default_rng(2024)
    worst, failures = 0.0, 0
    t0 = time.perf_counter()
    problems = []
    for _ in range(100):
        n = int(rng.integers(1, 11))
        A = rng.normal(size=(n, n))
        M = A @ A.T + 1e-1 * np.eye(n)          # strictly monotone
        q = rng.normal(size=n) * 3
        problems.append((M, q))
    sols = []
    for M, q in problems:
        n = len(q)
        prob = MCPProblem(n, lambda z, M=M, q=q: M @ z + q, lambda z, M=M: M,
                          np.zeros(n), np.full(n, np.inf))
        sols.append(solve_mcp(prob, np.zeros(n)))
    elapsed = time.perf_counter() - t0
    for (M, q), sol in zip(problems, sols):
        (ref,) = lcp_enumerate(M, q)
        err = float(np.max(np.abs(sol.z - ref)))
        worst = max(worst, err)
        failures += (not sol.converged) or err > 1e-6
    ok = failures == 0 and elapsed < 5.0
    criterion(1, ok, f"100 LCPs, worst error {worst:.1e}, {failures} mismatches, {elapsed:.2f} s")
    assert ok


# ---- 2: derivative integrity on the racing game ----------------------------

def _feasible_points(count, rng):
    track = default_track()
    p = RaceParams()
    conds = sample_initial_conditions(count, p, master_seed=77, track=track)
    for c in conds:
        init = (c.p1, c.p2)
        rg = build_game(init, tuple(fit_arc(track, s.position) for s in init), p)
        x = np.empty(rg.game.n_total)
        for i in range(2):
            u = np.column_stack([rng.uniform(-0.5, 0.9, p.n_T), rng.uniform(-0.3, 0.3, p.n_T)])
            x[rg.game.block_of(i)] = rg.rollout(i, u)
        yield rg, x


def test_criterion_2_derivatives(criterion):
    rng = np.random.default_rng(11)
    worst, where = 0.0, ""
    for rg, x in _feasible_points(20, rng):
        rep = check_derivatives(rg.game, x, rng=rng)
        k = max(rep, key=rep.get)
        if rep[k] > worst:
            worst, where = rep[k], k
    ok = worst <= 1e-5
    criterion(2, ok, f"20 points, worst relative error {worst:.1e} ({where})")
    assert ok


# ---- 3: Nash toy ------------------------------------------------------------

def test_criterion_3_nash_toy(criterion):
    res = solve_nash(nash_toy(), np.zeros(2))
    err = float(np.max(np.abs(res.x - 2.0)))
    ok = res.converged and err <= 1e-8
    criterion(3, ok, f"x = {res.x.tolist()}, error {err:.1e}")
    assert ok


# ---- 4: bilevel toy ---------------------------------------------------------

def test_criterion_4_bilevel_toy(criterion):
    game = stackelberg_toy()
    res = solve_bilevel(game, 0, np.zeros(2))
    e1 = float(np.max(np.abs(res.x - 0.5)))
    e2 = abs(res.leader_cost - 0.5)
    dec = decoupled_toy()
    x0 = np.array([1.0, -2.0])
    nash, bil = solve_nash(dec, x0), solve_bilevel(dec, 0, x0)
    e3 = float(np.max(np.abs(bil.x - nash.x)))
    ok = (res.status is BilevelStatus.EQUILIBRIUM and e1 <= 1e-6 and e2 <= 1e-6
          and bil.ok and nash.converged and e3 <= 1e-8)
    criterion(4, ok, f"x error {e1:.1e}, leader cost error {e2:.1e}, decoupled gap {e3:.1e}")
    assert ok


# ---- 5: piece agreement vs grid search --------------------------------------

PIECES = [(0.0, 1.0), (1.0, 2.0)]


def _f(x):
    return (x - 1.25) ** 2


class _Restricted:
    def __init__(self, sol, start):
        self.converged = sol.converged
        self.x = sol.z[0]
        self.is_local_min = sol.converged and abs(sol.z[0] - start) <= 1e-6


def _solve_interval(piece, start):
    a, b = piece
    prob = MCPProblem(1, lambda z: np.array([2 * (z[0] - 1.25)]), lambda z: np.array([[2.0]]),
                      np.array([a]), np.array([b]))
    return _Restricted(solve_mcp(prob, np.array([start])), start)


def test_criterion_5_piece_agreement(criterion):
    points = sorted(set(np.round(np.arange(0.0, 2.0001, 0.125), 6)) | {1.25})
    mismatches = []
    for x in points:
        pieces = [p for p in PIECES if p[0] - 1e-12 <= x <= p[1] + 1e-12]
        verdicts = [_solve_interval(p, x).is_local_min for p in pieces]
        oracle = [grid_local_min(_f, [p], x) for p in pieces]
        agree, _, _ = piece_agreement(pieces, _solve_interval, x)
        if verdicts != oracle or agree != grid_local_min(_f, PIECES, x):
            mismatches.append(x)
    d1 = _solve_interval(PIECES[0], 1.0).is_local_min
    d2 = _solve_interval(PIECES[1], 1.0).is_local_min
    union_1, _, _ = piece_agreement(PIECES, _solve_interval, 1.0)
    star, _, _ = piece_agreement([PIECES[1]], _solve_interval, 1.25)
    ok = not mismatches and d1 and not d2 and not union_1 and star
    criterion(5, ok, f"{len(points)} points, mismatches {mismatches or 'none'}; "
                     f"x=1: D1 {d1}, D2 {d2}, union {union_1}; x=1.25: {star}")
    assert ok


# ---- 6: certificates in the smoke study -------------------------------------

def _need(dir_: Path, what: str):
    if not (dir_ / "conditions.csv").exists():
        pytest.fail(f"{what} results missing in {dir_}; run the command in this module's docstring")


def test_criterion_6_certificates(criterion):
    _need(SMOKE_DIR, "smoke study")
    res = load_results(SMOKE_DIR)
    conds = res.conditions[:50]
    worst, count, bad = 0.0, 0, 0
    for label, traces in res.cells.items():
        cell = CompetitionType.parse(label)
        if not cell.is_canonical:
            continue
        for t in traces:
            if t.seed not in {c.seed for c in conds}:
                continue
            for r in t.steps:
                for status, cert in zip(r.statuses, r.certs):
                    if status in ("Converged", "Equilibrium"):
                        count += 1
                        worst = max(worst, cert)
                        bad += not (cert <= 1e-6)
    ok = res.complete and len(conds) == 50 and count > 0 and bad == 0
    criterion(6, ok, f"{len(conds)} conditions, {count} certified solves, worst violation "
                     f"{worst:.1e}, {bad} above 1e-6")
    assert ok


# ---- 7 and 8: desk-scale orderings ------------------------------------------

def _desk():
    _need(DESK_DIR, "desk-scale study")
    res = load_results(DESK_DIR, finished_only=True)
    return res, len(res.conditions) >= DESK_MIN_CONDITIONS and res.horizon == DESK_HORIZON


def _finish(ok, detail, enough, n):
    criterion_line = f"{detail} [{n} finished conditions]"
    if not enough:
        criterion_line += f"; requires >= {DESK_MIN_CONDITIONS}"
    return ok and enough, criterion_line


def test_criterion_7_robustness_ordering(criterion):
    res, enough = _desk()
    n = len(res.conditions)
    steps = np.array([[s.mean for s in row] for row in res.steps_table])
    avgs = [s.mean for s in res.steps_averages]
    ll = steps[2, 2]
    others = np.delete(steps.ravel(), 2 * 4 + 2)
    cell_ok = bool(ll < others.min())
    avg_ok = bool(np.argmin(avgs) == 2 and avgs[2] < min(a for j, a in enumerate(avgs) if j != 2))
    flagged = "CI overlaps" in summarize(res)
    ok, line = _finish(cell_ok and avg_ok and flagged,
                       f"L-L {ll:.2f} vs next {others.min():.2f} ({'min' if cell_ok else 'not min'}); "
                       f"averages S/N/L/F {', '.join(f'{a:.2f}' for a in avgs)} "
                       f"({'Leader min' if avg_ok else 'Leader not min'})", enough, n)
    criterion(7, ok, line)
    if not enough:
        pytest.xfail(f"desk-scale study has {n} finished conditions, needs {DESK_MIN_CONDITIONS}")
    assert ok


def test_criterion_8_performance_structure(criterion):
    res, enough = _desk()
    n = len(res.conditions)
    avgs = [s.mean for s in res.cost_averages]
    f_ok = bool(np.argmin(avgs) == 3 and avgs[3] < min(avgs[:3]))
    meta = sorted(c.label for c in res.meta_equilibria) if res.complete else []
    meta_ok = meta == ["F-F"]
    ss, nn = res.cost_table[0][0], res.cost_table[1][1]
    diag_ok = abs(ss.mean - nn.mean) < ss.half + nn.half
    ok, line = _finish(f_ok and meta_ok and diag_ok,
                       f"averages x100 S/N/L/F {', '.join(f'{100 * a:.3f}' for a in avgs)} "
                       f"({'Follower min' if f_ok else 'Follower not min'}); meta {meta or 'none'}; "
                       f"|S-S - N-N| {100 * abs(ss.mean - nn.mean):.3f} vs CI sum "
                       f"{100 * (ss.half + nn.half):.3f}", enough, n)
    criterion(8, ok, line)
    if not enough:
        pytest.xfail(f"desk-scale study has {n} finished conditions, needs {DESK_MIN_CONDITIONS}")
    assert ok


# ---- 9: determinism ---------------------------------------------------------

def test_criterion_9_determinism(criterion):
    init = (CraftState(0.3, 10.0, 2.2, 0.0), CraftState(-0.6, 11.4, 2.6, 0.0))
    pair = CompetitionType.parse("S-N")
    a = format_trace(simulate(init, pair, horizon_steps=2, seed=5))
    b = format_trace(simulate(init, pair, horizon_steps=2, seed=5))
    conds = sample_initial_conditions(2, master_seed=8)
    cells = [CompetitionType.parse("S-S"), CompetitionType.parse("S-N")]
    one = run_study(conds, horizon_steps=1, cells=cells, workers=1)
    two = run_study(conds, horizon_steps=1, cells=cells, workers=2)
    same = all([format_trace(t) for t in one.cells[c.label]] == [format_trace(t) for t in two.cells[c.label]]
               for c in cells)
    ok = a == b and same
    criterion(9, ok, f"repeat identical {a == b}, workers 1 vs 2 identical {same}")
    assert ok


# ---- 10: model invariants ---------------------------------------------------

def test_criterion_10_model_invariants(criterion):
    p = RaceParams()
    fails = []
    off = 1 / (1 + math.exp(p.b))
    hs = np.concatenate([-np.logspace(-6, 2, 400)[::-1], [0.0], np.logspace(-6, 2, 400)])
    l1 = np.array([responsibility(h, p)[0] for h in hs])
    l2 = np.array([responsibility(h, p)[1] for h in hs])
    if not np.array_equal(l1, l2[::-1]):
        fails.append("symmetry")
    if np.any(np.diff(l1) < 0) or np.any(np.diff(l2) > 0):
        fails.append("monotonicity")
    if np.any(l1 < -off) or np.any(l1 > 1 - off):
        fails.append("bounds")
    if responsibility(0.0, p) != (0.0, 0.0):
        fails.append("ell(0)")
    nz = hs != 0
    if np.any((l1[nz] > 0) == (l2[nz] > 0)):
        fails.append("exactly one tightens")

    rng = np.random.default_rng(10)
    s = sympy.symbols("a b c d")
    grad = sympy.lambdify(s, [sympy.diff(model.draft_limit_expr(s[:2], s[2:], p, m=sympy), v) for v in s],
                          modules=[{"Sigmoid": expit}, "numpy"])
    for _ in range(200):
        x = rng.uniform(-8, 8, 4)
        t = draft_limit(x[:2], x[2:], p)
        if not (p.tau_nom_max <= t <= p.tau_draft_max):
            fails.append("draft range")
            break
        fd = np.array([(draft_limit((x + e)[:2], (x + e)[2:], p) - draft_limit((x - e)[:2], (x - e)[2:], p))
                       / 2e-6 for e in np.eye(4) * 1e-6])
        an = np.array(grad(*x), dtype=float)
        if np.any(np.abs(fd - an) > 1e-5 * np.maximum(1.0, np.abs(an))):
            fails.append("draft smoothness")
            break

    for _ in range(100):
        ang = np.sort(rng.uniform(0, 2 * np.pi, 3))
        if np.min(np.diff(np.r_[ang, ang[0] + 2 * np.pi])) < 1e-2:
            continue
        c = rng.uniform(-50, 50, 2)
        arc = circumcircle(*(c + 20 * np.column_stack([np.cos(ang), np.sin(ang)])))
        if abs(arc.radius - 20) > 1e-9:
            fails.append("arc fit")
            break

    track = default_track()
    init = (CraftState(0.0, 10.0, 2.0, 0.0), CraftState(1.5, 11.0, 2.5, 0.05))
    arcs = tuple(fit_arc(track, q.position) for q in init)
    g = build_game(init, arcs).game
    h = build_game(init[::-1], arcs[::-1]).game
    x = build_game(init, arcs).initial_guess() + rng.normal(0, 0.01, g.n_total)
    b0, b1 = g.block_of(0), g.block_of(1)
    xs = np.r_[x[b1], x[b0]]
    for i in range(2):
        a, b = g.players[i], h.players[1 - i]
        if not (a.cost(x) == b.cost(xs) and np.array_equal(a.cons(x), b.cons(xs))
                and np.array_equal(a.cost_grad(x)[np.r_[b1, b0]], b.cost_grad(xs))):
            fails.append("player swap")
    ok = not fails
    criterion(10, ok, "all invariants hold" if ok else "failed: " + ", ".join(fails))
    assert ok
