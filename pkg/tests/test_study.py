import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackrace import study
from stackrace.racing import RaceParams, default_track, on_track
from stackrace.sim import (
    ALL_CELLS, CANONICAL_CELLS, STRATEGY_ORDER, CompetitionType, SimTrace, StepRecord, Termination,
    format_trace,
)
from stackrace.study import (
    StudyResults, load_results, mean_ci, meta_game_nash, read_conditions, run_study,
    sample_initial_conditions, summarize, write_conditions, write_manifest,
)

REFERENCE_COSTS = np.array([[1.214, .30, .64, .67],
                     [2.09, 1.148, .30, .22],
                     [1.23, 1.41, .625, .13],
                     [1.75, 2.05, 1.80, 1.200]])


# ---- sampling -------------------------------------------------------------

@pytest.fixture(scope="module")
def conds():
    return sample_initial_conditions(60, master_seed=4)


def test_sampling_ranges(conds):
    tr = default_track()
    for c in conds:
        d = math.hypot(c.p1.p_lat - c.p2.p_lat, c.p1.p_long - c.p2.p_long)
        assert 1.2 - 1e-12 <= d <= 2.4 + 1e-12
        assert 1.5 <= c.p1.v <= 3.0 and 0.0 <= c.p2.v - c.p1.v <= 1.5
        assert c.p1.theta == 0.0 and c.p2.theta == 0.0
        assert on_track(tr, c.p1.position) and on_track(tr, c.p2.position)


def test_sampling_is_deterministic(conds):
    assert sample_initial_conditions(60, master_seed=4) == conds
    assert sample_initial_conditions(10, master_seed=4) == conds[:10]
    assert sample_initial_conditions(10, master_seed=5) != conds[:10]


def test_sampling_rejects_bad_n():
    with pytest.raises(ValueError):
        sample_initial_conditions(0)


def test_conditions_csv_round_trip(conds, tmp_path):
    write_conditions(tmp_path / "c.csv", conds[:5])
    assert read_conditions(tmp_path / "c.csv") == conds[:5]


# ---- statistics -----------------------------------------------------------

def test_mean_ci_examples():
    s = mean_ci([1, 1, 1, 1])
    assert (s.mean, s.half, s.n) == (1.0, 0.0, 4)
    s = mean_ci([0, 2])
    assert s.mean == 1.0 and s.half == pytest.approx(1.96, abs=1e-12)
    assert math.isnan(mean_ci([3.0]).half)


def test_meta_game_reference_costs():
    assert meta_game_nash(REFERENCE_COSTS, REFERENCE_COSTS.T) == {(3, 3)}


def test_meta_game_constant_and_dominance():
    z = np.zeros((4, 4))
    assert len(meta_game_nash(z, z)) == 16
    A = np.ones((4, 4))
    A[:, 2] = 0.0                      # column L strictly best for P1 whatever P2 plays
    assert meta_game_nash(A, A.T) == {(2, 2)}


def _brute(A, B):
    out = set()
    for r in range(4):
        for c in range(4):
            if all(A[r, c] <= A[r, k] for k in range(4)) and all(B[r, c] <= B[k, c] for k in range(4)):
                out.add((r, c))
    return out


@settings(max_examples=60)
@given(st.lists(st.integers(0, 5), min_size=16, max_size=16), st.floats(-100, 100))
def test_meta_game_matches_enumeration_and_shift(vals, shift):
    A = np.array(vals, dtype=float).reshape(4, 4)
    eq = meta_game_nash(A, A.T)
    assert eq == _brute(A, A.T)
    assert meta_game_nash(A + shift, A.T + shift) == eq


# ---- results built from synthetic traces ----------------------------------

def _trace(pair, seed, n_steps, cost1, cost2, horizon=5):
    steps = [StepRecord(k, (0.0,) * 8, (0.0,) * 4, (cost1, cost2), ("Converged",) * 2, (0, 0),
                        (0.0, 0.0)) for k in range(n_steps)]
    term = Termination.COMPLETED if n_steps == horizon else Termination.COLLISION
    return SimTrace(pair, seed, steps, term, None if n_steps == horizon else n_steps,
                    (0.0,) * 8, horizon)


def _synthetic(n=3):
    conds = sample_initial_conditions(n, master_seed=1)
    rng = np.random.default_rng(0)
    canonical = {}
    for cell in CANONICAL_CELLS:
        canonical[cell.label] = [_trace(cell, c.seed, int(rng.integers(1, 6)),
                                        float(rng.normal()), float(rng.normal())) for c in conds]
    return StudyResults.from_canonical(conds, canonical, 5)


def test_tables_transpose_under_label_swap():
    res = _synthetic()
    assert res.complete and sum(len(res.cells[c.label]) for c in CANONICAL_CELLS) == 10 * 3
    for p1 in STRATEGY_ORDER:
        for p2 in STRATEGY_ORDER:
            if p1 == p2:
                continue
            a = res.cells[CompetitionType(p1, p2).label]
            b = res.cells[CompetitionType(p2, p1).label]
            assert [t.total_cost(1) for t in a] == [t.total_cost(0) for t in b]
            assert [t.steps_completed for t in a] == [t.steps_completed for t in b]
    steps = res.steps_table
    for r in range(4):
        for c in range(4):
            assert steps[r][c].mean == steps[c][r].mean


def test_summary_mentions_every_strategy():
    text = summarize(_synthetic())
    for k in STRATEGY_ORDER:
        assert k.long_name in text
    assert "Average" in text and "meta-game" in text


def test_cell_accounting_reuses_mirrors(monkeypatch):
    calls = []

    def fake(init, pair, params, horizon, seed, track, opts):
        calls.append(pair.label)
        return _trace(pair, seed, horizon, 0.1, 0.2, horizon)

    monkeypatch.setattr(study, "simulate", fake)
    conds = sample_initial_conditions(1)
    res = run_study(conds, horizon_steps=25)
    assert sorted(calls) == sorted(c.label for c in CANONICAL_CELLS)
    assert all(len(res.cells[c.label]) == 1 for c in ALL_CELLS)
    assert all(s.n == 1 for row in res.cost_table for s in row)


def test_resume_and_finished_only(monkeypatch, tmp_path):
    calls = []

    def fake(init, pair, params, horizon, seed, track, opts):
        calls.append(pair.label)
        return _trace(pair, seed, horizon, 0.1, 0.2, horizon)

    monkeypatch.setattr(study, "simulate", fake)
    conds = sample_initial_conditions(2)
    write_conditions(tmp_path / "conditions.csv", conds)
    write_manifest(tmp_path, {"horizon_steps": 3})
    run_study(conds, horizon_steps=3, out_dir=tmp_path)
    assert len(calls) == 20
    run_study(conds, horizon_steps=3, out_dir=tmp_path)
    assert len(calls) == 20                      # everything reused
    study.trace_path(tmp_path, CANONICAL_CELLS[3], 1).unlink()
    part = load_results(tmp_path)
    assert not part.complete and part.missing_cells == [CANONICAL_CELLS[3].label]
    bal = load_results(tmp_path, finished_only=True)
    assert bal.complete and len(bal.conditions) == 1


def test_results_invariant_to_worker_count(tmp_path):
    conds = sample_initial_conditions(2, master_seed=3)
    cells = [CompetitionType.parse("S-S"), CompetitionType.parse("S-N")]
    one = run_study(conds, horizon_steps=1, cells=cells, workers=1)
    two = run_study(conds, horizon_steps=1, cells=cells, workers=2)
    for c in cells:
        assert [format_trace(t) for t in one.cells[c.label]] == \
               [format_trace(t) for t in two.cells[c.label]]
