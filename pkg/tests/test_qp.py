"""The operator-splitting QP solver against closed forms and a dense re-solver.

``solve_qp`` handles ``min p.lin + sum c (p - pbar)^2 s.t. G p <= h``; the
checks range from one-variable problems with pencil-and-paper answers up to
random ten-variable instances verified by an independent active-set method.
"""

import numpy as np
import pytest
import scipy.sparse as sp

from loadsteer.oracle import dense_active_set_qp, scalar_qp_closed_form
from loadsteer.qp import (
    HomeQpSolver,
    home_objective,
    kkt_residuals,
    solve_home_qp,
    solve_qp,
)
from loadsteer.scenario import NeighborhoodConfig, generate_neighborhood


def _box(lo, hi):
    """Rows of a one-variable interval lo <= p <= hi."""
    return sp.csr_matrix(np.array([[1.0], [-1.0]])), np.array([hi, -lo])


def _solve_scalar(c, pbar, price, lo, hi):
    G, h = _box(lo, hi)
    return solve_qp(G, h, np.array([c]), np.array([pbar]), np.array([price]))


# ---------------------------------------------------------------------------
# one-variable worked examples
# ---------------------------------------------------------------------------


def test_interior_optimum():
    # argmin p*0.2 + (p-1)^2 over [0,2] is p = 1 - 0.1 = 0.9
    sol = _solve_scalar(1.0, 1.0, 0.2, 0.0, 2.0)
    assert sol.status == "optimal"
    assert sol.p_star[0] == pytest.approx(0.9, abs=1e-8)
    assert sol.objective_value == pytest.approx(0.9 * 0.2 + 0.01, abs=1e-8)
    np.testing.assert_allclose(sol.lambda_star, 0.0, atol=1e-7)


def test_clipped_at_lower_bound():
    # expensive power pushes the unconstrained optimum below zero
    sol = _solve_scalar(1.0, 0.5, 3.0, 0.0, 2.0)
    assert sol.p_star[0] == pytest.approx(0.0, abs=1e-8)
    # stationarity: -lambda_lo + 2c(p - pbar) + price = 0 => lambda_lo = 2
    assert sol.lambda_star[1] == pytest.approx(2.0, abs=1e-6)
    assert sol.lambda_star[0] == pytest.approx(0.0, abs=1e-8)


def test_clipped_at_upper_bound():
    sol = _solve_scalar(0.5, 3.0, 0.1, 0.0, 1.0)
    assert sol.p_star[0] == pytest.approx(1.0, abs=1e-8)
    # lambda_hi = 2c(pbar - p) - price = 2 - 0.1
    assert sol.lambda_star[0] == pytest.approx(1.9, abs=1e-6)


def test_degenerate_boundary():
    """Unconstrained optimum lands exactly on the bound: active with
    multiplier zero, the weakly-active corner case."""
    sol = _solve_scalar(1.0, 1.0, 2.0, 0.0, 2.0)  # pbar - price/2c = 0 exactly
    assert sol.p_star[0] == pytest.approx(0.0, abs=1e-8)
    np.testing.assert_allclose(sol.lambda_star, 0.0, atol=1e-6)


@pytest.mark.parametrize(
    "c,pbar,price,lo,hi",
    [
        (1.0, 1.0, 0.2, 0.0, 2.0),
        (1.0, 0.5, 3.0, 0.0, 2.0),
        (0.5, 3.0, 0.1, 0.0, 1.0),
        (1.0, 1.0, 2.0, 0.0, 2.0),
        (2.0, -1.0, 0.5, 0.0, 4.0),
        (0.7, 2.5, 0.9, 1.0, 2.0),
    ],
)
def test_scalar_family_matches_closed_form(c, pbar, price, lo, hi):
    sol = _solve_scalar(c, pbar, price, lo, hi)
    p_ref, lam_lo, lam_hi = scalar_qp_closed_form(c, pbar, price, lo, hi)
    assert sol.p_star[0] == pytest.approx(p_ref, abs=1e-6)
    # rows are [p <= hi, -p <= -lo]
    assert sol.lambda_star[0] == pytest.approx(lam_hi, abs=1e-6)
    assert sol.lambda_star[1] == pytest.approx(lam_lo, abs=1e-6)
    assert sol.residuals.within(1e-8)


# ---------------------------------------------------------------------------
# random instances vs the dense active-set re-solver
# ---------------------------------------------------------------------------


def _random_instance(rng, n):
    """A bounded polytope in n variables with a few random cut rows."""
    lo = rng.uniform(-1.0, 0.0, size=n)
    hi = rng.uniform(0.5, 2.0, size=n)
    rows = [np.eye(n), -np.eye(n)]
    rhs = [hi, -lo]
    extra = rng.integers(1, n + 1)
    A = rng.normal(size=(extra, n))
    interior = 0.5 * (lo + hi)
    b = A @ interior + rng.uniform(0.05, 1.0, size=extra)
    rows.append(A)
    rhs.append(b)
    G = np.vstack(rows)
    h = np.concatenate(rhs)
    c = rng.uniform(0.3, 3.0, size=n)
    pbar = rng.uniform(-1.0, 2.0, size=n)
    lin = rng.uniform(-1.0, 1.0, size=n)
    return G, h, c, pbar, lin


def test_random_instances_match_active_set_resolver():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(1, 11))
        G, h, c, pbar, lin = _random_instance(rng, n)
        sol = solve_qp(sp.csr_matrix(G), h, c, pbar, lin)
        p_ref, _ = dense_active_set_qp(G, h, c, pbar, lin)
        worst = max(worst, float(np.max(np.abs(sol.p_star - p_ref))))
        assert sol.residuals.within(1e-8)
    assert worst <= 1e-6


def test_objective_never_below_resolver():
    """The two solvers must agree on the optimal value, not just the point."""
    rng = np.random.default_rng(5)
    G, h, c, pbar, lin = _random_instance(rng, 6)
    sol = solve_qp(sp.csr_matrix(G), h, c, pbar, lin)
    p_ref, _ = dense_active_set_qp(G, h, c, pbar, lin)
    z_ref = float(p_ref @ lin + np.sum(c * (p_ref - pbar) ** 2))
    assert sol.objective_value == pytest.approx(z_ref, abs=1e-9)


def test_dual_agreement_with_resolver():
    rng = np.random.default_rng(77)
    G, h, c, pbar, lin = _random_instance(rng, 5)
    sol = solve_qp(sp.csr_matrix(G), h, c, pbar, lin)
    _, lam_ref = dense_active_set_qp(G, h, c, pbar, lin)
    np.testing.assert_allclose(sol.lambda_star, lam_ref, atol=1e-6)


def test_infeasible_rows_reported():
    G = sp.csr_matrix(np.array([[1.0], [-1.0]]))
    h = np.array([-1.0, 0.0])  # p <= -1 and p >= 0
    sol = solve_qp(G, h, np.array([1.0]), np.array([0.0]), np.array([0.0]))
    assert sol.status == "infeasible"


def test_nonpositive_weights_rejected():
    G, h = _box(0.0, 1.0)
    with pytest.raises(ValueError, match="strictly positive"):
        solve_qp(G, h, np.array([0.0]), np.array([0.5]), np.array([0.1]))


# ---------------------------------------------------------------------------
# home-level wrapper
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def one_home():
    scen = generate_neighborhood(NeighborhoodConfig(n_homes=1, horizon=16, seed=8))
    return scen.homes[0], scen


def test_home_solution_feasible_and_stationary(one_home):
    home, scen = one_home
    price = np.full(16, 0.4)
    sol = solve_home_qp(home.polyhedron, home.weights, home.desired, price)
    assert sol.status == "optimal"
    assert sol.residuals.within(1e-8)
    slack = home.polyhedron.matrix @ sol.p_star - home.polyhedron.rhs
    assert float(np.max(slack)) <= 1e-7


def test_home_objective_helper_agrees(one_home):
    home, _ = one_home
    price = np.full(16, 0.4)
    sol = solve_home_qp(home.polyhedron, home.weights, home.desired, price)
    z = home_objective(sol.p_star, price, home.weights, home.desired)
    assert z == pytest.approx(sol.objective_value, abs=1e-12)


def test_warm_start_returns_same_solution(one_home):
    """A solver reused across prices must answer exactly like a fresh one."""
    home, _ = one_home
    solver = HomeQpSolver(home.polyhedron, home.weights, home.desired)
    prices = [np.full(16, 0.3), np.full(16, 0.7), np.full(16, 0.3)]
    warm = [solver.solve(p) for p in prices]
    cold = [
        HomeQpSolver(home.polyhedron, home.weights, home.desired).solve(p) for p in prices
    ]
    for w, c in zip(warm, cold):
        np.testing.assert_allclose(w.p_star, c.p_star, atol=1e-8)
    # warm restarts should not be slower in iterations than the first solve
    assert warm[2].iterations <= warm[0].iterations


def test_kkt_residuals_flag_violations(one_home):
    import dataclasses

    home, _ = one_home
    price = np.full(16, 0.4)
    sol = solve_home_qp(home.polyhedron, home.weights, home.desired, price)
    good = kkt_residuals(sol, home.polyhedron, home.weights, home.desired, price)
    assert good.within(1e-8)
    tampered = dataclasses.replace(sol, p_star=sol.p_star + 0.05)
    bad = kkt_residuals(tampered, home.polyhedron, home.weights, home.desired, price)
    assert not bad.within(1e-8)


def test_price_monotonicity_scalar():
    """Dearer electricity never increases a bound-constrained load."""
    loads = [
        _solve_scalar(1.0, 1.5, price, 0.0, 3.0).p_star[0]
        for price in np.linspace(0.0, 4.0, 9)
    ]
    assert all(a >= b - 1e-9 for a, b in zip(loads, loads[1:]))
