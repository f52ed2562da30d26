import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackrace.errors import InvalidPoint
from stackrace.mcp import (
    MCPProblem,
    MCPStatus,
    SolverOptions,
    classify_indices,
    fb_residual,
    solve_mcp,
)

from oracles import lcp_enumerate

INF = np.inf


def lcp_problem(M, q, lower=None, upper=None):
    n = len(q)
    lower = np.zeros(n) if lower is None else lower
    upper = np.full(n, INF) if upper is None else upper
    return MCPProblem(n, lambda z: M @ z + q, lambda z: M, lower, upper)


def scalar_problem(F, l=0.0, u=INF):
    return MCPProblem(
        1,
        lambda z: np.array([F(z[0])]),
        lambda z: np.array([[1.0]]),
        np.array([l]),
        np.array([u]),
    )


def test_interior_root():
    sol = solve_mcp(scalar_problem(lambda z: z - 1), np.array([0.0]))
    assert sol.status is MCPStatus.CONVERGED
    assert sol.z[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.residual_inf <= 1e-8


def test_lower_bound_active():
    sol = solve_mcp(scalar_problem(lambda z: z + 1), np.array([5.0]))
    assert sol.converged
    assert sol.z[0] == pytest.approx(0.0, abs=1e-12)
    assert sol.F[0] == pytest.approx(1.0)


def test_two_dim_lcp_matches_enumeration():
    M = np.array([[2.0, 1.0], [1.0, 2.0]])
    q = np.array([-1.0, -1.0])
    (expected,) = lcp_enumerate(M, q)
    np.testing.assert_allclose(expected, [1 / 3, 1 / 3], atol=1e-12)
    sol = solve_mcp(lcp_problem(M, q), np.zeros(2))
    assert sol.converged
    np.testing.assert_allclose(sol.z, expected, atol=1e-8)


def test_upper_bound_and_free_variable():
    # z0 free with F0 = z0 - 2; z1 in [0, 1] with F1 = z1 - 3 -> upper bound active
    M = np.eye(2)
    q = np.array([-2.0, -3.0])
    prob = lcp_problem(M, q, lower=np.array([-INF, 0.0]), upper=np.array([INF, 1.0]))
    sol = solve_mcp(prob, np.zeros(2))
    assert sol.converged
    np.testing.assert_allclose(sol.z, [2.0, 1.0], atol=1e-10)


def test_fixed_variable_is_respected():
    prob = lcp_problem(np.eye(1), np.array([-5.0]), lower=np.array([0.3]),
                       upper=np.array([0.3]))
    sol = solve_mcp(prob, np.array([2.0]))
    assert sol.converged and sol.z[0] == 0.3


@pytest.mark.parametrize(
    "z, F, expected",
    [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, -1.0, -1.0)],
)
def test_mid_residual_examples(z, F, expected):
    prob = scalar_problem(lambda _: F)
    assert fb_residual(prob, np.array([z]))[0] == expected


def test_classify_examples():
    F_vals = np.array([0.0, 0.2, 1e-9])
    prob = MCPProblem(3, lambda z: F_vals, lambda z: np.eye(3),
                      np.zeros(3), np.array([1.0, INF, INF]))
    cls = classify_indices(prob, np.array([0.5, 0.0, 0.0]), act_tol=1e-6)
    assert cls.interior == [0]
    assert cls.at_lower == [1]
    assert cls.degenerate == [2]
    assert cls.dim == 3


def test_classify_upper_and_invalid():
    prob = MCPProblem(2, lambda z: np.array([-0.5, 0.0]), lambda z: np.eye(2),
                      np.zeros(2), np.ones(2))
    cls = classify_indices(prob, np.array([1.0, 0.4]))
    assert cls.at_upper == [0] and cls.interior == [1]
    with pytest.raises(InvalidPoint):
        classify_indices(prob, np.array([0.5, 0.4]))


def test_singular_system_reported():
    # F(z) = 0*z - 1 with z free: Newton matrix is zero, regularization cannot fix it
    prob = MCPProblem(1, lambda z: np.array([-1.0]), lambda z: np.zeros((1, 1)),
                      np.array([-INF]), np.array([INF]))
    sol = solve_mcp(prob, np.array([0.0]))
    assert sol.status in (MCPStatus.SINGULAR, MCPStatus.DIVERGED, MCPStatus.MAX_ITERATIONS)
    assert not sol.converged


def test_max_iterations_status():
    prob = scalar_problem(lambda z: np.arctan(z - 10.0), l=-INF)
    sol = solve_mcp(prob, np.array([0.0]), SolverOptions(max_iter=1))
    assert sol.status is MCPStatus.MAX_ITERATIONS


def test_nonlinear_mcp():
    # F(z) = exp(z) - 2 on [0, inf): root log 2
    prob = MCPProblem(1, lambda z: np.exp(z) - 2, lambda z: np.diag(np.exp(z)),
                      np.zeros(1), np.full(1, INF))
    sol = solve_mcp(prob, np.array([3.0]))
    assert sol.converged
    assert sol.z[0] == pytest.approx(np.log(2), abs=1e-9)


def test_sparse_jacobian_path():
    import scipy.sparse as sp

    M = np.array([[2.0, 1.0], [1.0, 2.0]])
    q = np.array([-1.0, -1.0])
    prob = MCPProblem(2, lambda z: M @ z + q, lambda z: sp.csr_matrix(M),
                      np.zeros(2), np.full(2, INF))
    sol = solve_mcp(prob, np.zeros(2))
    np.testing.assert_allclose(sol.z, [1 / 3, 1 / 3], atol=1e-10)


def random_monotone_lcp(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 11))
    A = rng.normal(size=(n, n))
    M = A @ A.T + np.eye(n)
    q = rng.normal(size=n) * 3
    return M, q


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_random_monotone_lcp_agrees_with_enumeration(seed):
    M, q = random_monotone_lcp(seed)
    (expected,) = lcp_enumerate(M, q)
    prob = lcp_problem(M, q)
    sol = solve_mcp(prob, np.zeros(len(q)))
    assert sol.converged
    np.testing.assert_allclose(sol.z, expected, atol=1e-6)
    # exactly one complementarity clause per index
    cls = classify_indices(prob, sol.z, F=sol.F)
    assert cls.dim == len(q)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_solver_is_deterministic(seed):
    M, q = random_monotone_lcp(seed)
    prob = lcp_problem(M, q)
    a = solve_mcp(prob, np.ones(len(q)))
    b = solve_mcp(prob, np.ones(len(q)))
    assert a.iterations == b.iterations and a.status == b.status
    assert np.array_equal(a.z, b.z)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_zero_residual_iff_valid_partition(seed):
    M, q = random_monotone_lcp(seed)
    prob = lcp_problem(M, q)
    sol = solve_mcp(prob, np.zeros(len(q)))
    cls = classify_indices(prob, sol.z, act_tol=1e-6)
    assert sorted(cls.interior + cls.at_lower + cls.at_upper + cls.degenerate) == list(range(len(q)))
    bad = sol.z + 1.0
    if np.max(np.abs(fb_residual(prob, bad))) > 100 * 1e-6 * max(1, np.max(np.abs(bad))):
        with pytest.raises(InvalidPoint):
            classify_indices(prob, bad, act_tol=1e-6)
