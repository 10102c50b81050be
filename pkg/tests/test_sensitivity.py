"""Differentiating the home QP solution in the price.

The Jacobian dp*/dprice comes from the reduced KKT system on the strongly
active rows.  The ground truth throughout is central finite differences of
an actual re-solve, which shares no code with the sensitivity path.
"""

import numpy as np
import pytest
import scipy.sparse as sp

from loadsteer.appliances import (
    BasicApplianceSpec,
    assemble_home_polyhedron,
    build_basic_block,
)
from loadsteer.qp import HomeQpSolver, solve_home_qp, solve_qp
from loadsteer.scenario import NeighborhoodConfig, generate_neighborhood
from loadsteer.sensitivity import (
    SingularSystemError,
    active_set,
    home_gradient_contribution,
    price_jacobian,
)


def _interval_polyhedron(lo, hi, n_slots=1, name="x"):
    """A ConstraintPolyhedron for lo <= p(t) <= hi on each slot."""
    from loadsteer.appliances import ConstraintBlock, ConstraintPolyhedron

    eye = np.eye(n_slots)
    matrix = np.vstack([eye, -eye])
    rhs = np.concatenate([np.full(n_slots, hi), np.full(n_slots, -lo)])
    labels = [f"le_hi[t={t}]" for t in range(n_slots)] + [
        f"ge_lo[t={t}]" for t in range(n_slots)
    ]
    block = ConstraintBlock(matrix, rhs, labels)
    return assemble_home_polyhedron([block], names=[name])


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------


def test_interior_solution_has_closed_form_jacobian():
    """Unconstrained optimum p = pbar - price/(2c): slope is -1/(2c)."""
    poly = _interval_polyhedron(0.0, 5.0)
    sol = solve_home_qp(poly, [1.0], [2.0], np.array([0.4]))
    jac = price_jacobian(sol, poly, [1.0])
    assert jac.shape == (1, 1)
    assert jac[0, 0] == pytest.approx(-0.5, abs=1e-7)


def test_strongly_clipped_solution_is_insensitive():
    """Once a bound binds with a positive multiplier, small price moves
    do nothing: the Jacobian row is zero."""
    poly = _interval_polyhedron(0.0, 5.0)
    sol = solve_home_qp(poly, [1.0], [0.5], np.array([3.0]))  # pinned at 0
    assert sol.p_star[0] == pytest.approx(0.0, abs=1e-8)
    jac = price_jacobian(sol, poly, [1.0])
    assert jac[0, 0] == pytest.approx(0.0, abs=1e-7)


def test_contribution_chain_rule():
    poly = _interval_polyhedron(0.0, 5.0)
    sol = solve_home_qp(poly, [1.0], [2.0], np.array([0.4]))
    jac = price_jacobian(sol, poly, [1.0])
    contrib = home_gradient_contribution(sol, jac, np.array([-0.4]))
    assert contrib[0] == pytest.approx((-0.5) * (-0.4), abs=1e-7)


def test_jacobian_matches_finite_differences_multislot():
    poly = _interval_polyhedron(0.0, 4.0, n_slots=3)
    weights = [0.8]
    desired = np.array([[1.0, 2.0, 3.5]])
    price = np.array([0.3, 0.5, 0.2])
    sol = solve_home_qp(poly, weights, desired, price)
    jac = price_jacobian(sol, poly, weights)
    step = 1e-6
    for t in range(3):
        plus, minus = price.copy(), price.copy()
        plus[t] += step
        minus[t] -= step
        p_plus = solve_home_qp(poly, weights, desired, plus).p_star
        p_minus = solve_home_qp(poly, weights, desired, minus).p_star
        fd_col = (p_plus - p_minus) / (2 * step)
        np.testing.assert_allclose(jac[:, t], fd_col, atol=1e-5)


# ---------------------------------------------------------------------------
# active-set classification
# ---------------------------------------------------------------------------


def test_pinned_variable_not_flagged_weak():
    """An off-window slot is held at zero by an equal-and-opposite row pair
    with zero multipliers; that is bookkeeping, not degeneracy."""
    spec = BasicApplianceSpec(window_start=1, window_end=3, total_energy=1.0, max_power=2.0)
    poly = assemble_home_polyhedron([build_basic_block(spec, 4)], names=["basic"])
    sol = solve_home_qp(poly, [1.0], np.array([[0.0, 0.5, 0.5, 0.0]]), np.full(4, 0.3))
    info = active_set(sol, poly)
    weak_labels = [poly.labels[r] for r in info.weakly_active]
    assert not any("off_" in lab for lab in weak_labels), weak_labels


def test_decided_equality_pair_not_flagged_weak():
    """The exact-energy pair has one side at zero multiplier by construction;
    when the net multiplier is decisive the pair is differentiable."""
    spec = BasicApplianceSpec(window_start=0, window_end=3, total_energy=2.0, max_power=2.0)
    poly = assemble_home_polyhedron([build_basic_block(spec, 3)], names=["basic"])
    # steep price makes the energy floor bind hard
    sol = solve_home_qp(poly, [1.0], np.array([[0.6, 0.7, 0.7]]), np.full(3, 2.5))
    info = active_set(sol, poly)
    weak_labels = [poly.labels[r] for r in info.weakly_active]
    assert not any("energy" in lab for lab in weak_labels), weak_labels
    strong_labels = [poly.labels[r] for r in info.strongly_active]
    assert any("energy_ge_total" in lab for lab in strong_labels)


def test_genuinely_weak_row_is_flagged():
    """A lone inequality active with zero multiplier is the real edge case."""
    poly = _interval_polyhedron(0.0, 2.0)
    # unconstrained optimum exactly at the lower bound: slack 0, multiplier 0
    sol = solve_home_qp(poly, [1.0], [1.0], np.array([2.0]))
    assert sol.p_star[0] == pytest.approx(0.0, abs=1e-7)
    info = active_set(sol, poly)
    assert not info.is_clean
    assert any("ge_lo" in poly.labels[r] for r in info.weakly_active)


def test_pinned_variable_jacobian_row_is_zero():
    """Off-window slots cannot move; their Jacobian rows vanish up to the
    Tikhonov scale (exactly zero when both pin sides carry multipliers)."""
    spec = BasicApplianceSpec(window_start=1, window_end=3, total_energy=1.0, max_power=2.0)
    poly = assemble_home_polyhedron([build_basic_block(spec, 4)], names=["basic"])
    sol = solve_home_qp(poly, [1.0], np.array([[0.0, 0.5, 0.5, 0.0]]), np.full(4, 0.3))
    jac = price_jacobian(sol, poly, [1.0])
    np.testing.assert_allclose(jac[0], 0.0, atol=1e-8)
    np.testing.assert_allclose(jac[3], 0.0, atol=1e-8)


def test_equality_constrained_jacobian_columns_sum_to_zero():
    """With total energy fixed, any price-induced move reallocates power
    among window slots without changing the sum: columns of the window
    rows must sum to zero."""
    spec = BasicApplianceSpec(window_start=0, window_end=4, total_energy=3.0, max_power=2.0)
    poly = assemble_home_polyhedron([build_basic_block(spec, 4)], names=["basic"])
    sol = solve_home_qp(poly, [1.0], np.array([[0.75, 0.75, 0.75, 0.75]]),
                        np.array([0.2, 0.4, 0.6, 0.8]))
    jac = price_jacobian(sol, poly, [1.0])
    np.testing.assert_allclose(jac.sum(axis=0), 0.0, atol=1e-7)


# ---------------------------------------------------------------------------
# generated homes
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def solved_home():
    scen = generate_neighborhood(NeighborhoodConfig(n_homes=1, horizon=12, seed=21))
    home = scen.homes[0]
    rng = np.random.default_rng(21)
    price = rng.uniform(0.2, 0.9, size=12)
    sol = HomeQpSolver(home.polyhedron, home.weights, home.desired).solve(price)
    return home, price, sol


def test_generated_home_jacobian_vs_finite_differences(solved_home):
    home, price, sol = solved_home
    info = active_set(sol, home.polyhedron)
    assert info.is_clean, [home.polyhedron.labels[r] for r in info.weakly_active]
    jac = price_jacobian(sol, home.polyhedron, home.weights)
    assert jac.shape == (home.desired.size, 12)
    step = 1e-5
    solver = HomeQpSolver(home.polyhedron, home.weights, home.desired)
    for t in (0, 5, 11):
        plus, minus = price.copy(), price.copy()
        plus[t] += step
        minus[t] -= step
        p_plus = solver.solve(plus).p_star
        p_minus = solver.solve(minus).p_star
        fd_col = (p_plus - p_minus) / (2 * step)
        np.testing.assert_allclose(jac[:, t], fd_col, atol=2e-4)


def test_duplicate_rows_survive_via_regularization():
    """Moderate duplicated active rows are not fatal: the Tikhonov term keeps
    the saddle system quasidefinite and the two copies act as one row."""
    from loadsteer.appliances import ConstraintBlock

    matrix = np.array([[1.0, 1.0], [1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    rhs = np.array([1.0, 1.0, 0.0, 0.0])
    block = ConstraintBlock(matrix, rhs, ["cap_a", "cap_b", "ge0_x", "ge0_y"])
    poly = assemble_home_polyhedron([block], names=["dup"])
    sol = solve_home_qp(poly, [1.0], np.array([[2.0, 2.0]]), np.array([0.1, 0.1]))
    jac = price_jacobian(sol, poly, [1.0])
    # the binding cap forces moves to cancel across the two variables
    np.testing.assert_allclose(jac.sum(axis=0), 0.0, atol=1e-6)


def test_singular_system_reported_with_labels():
    """When the pivot spread is numerically hopeless (duplicate rows of
    enormous norm), the factorization check must refuse and name the rows
    rather than return garbage."""
    from loadsteer.appliances import ConstraintBlock
    from loadsteer.qp import KktResiduals, PrimalDualSolution

    s = 1e8
    matrix = np.array([[s, s], [s, s], [-1.0, 0.0], [0.0, -1.0]])
    rhs = np.array([s, s, 0.0, 0.0])
    block = ConstraintBlock(matrix, rhs, ["cap_a", "cap_b", "ge0_x", "ge0_y"])
    poly = assemble_home_polyhedron([block], names=["dup"])
    # hand-built optimum on the cap face with both duplicates marked strong
    sol = PrimalDualSolution(
        p_star=np.array([0.5, 0.5]),
        lambda_star=np.array([1.0, 1.0, 0.0, 0.0]),
        objective_value=0.0,
        residuals=KktResiduals(0.0, 0.0, 0.0, 0.0),
        status="optimal",
    )
    with pytest.raises(SingularSystemError) as err:
        price_jacobian(sol, poly, [1.0])
    assert any("cap" in lab for lab in err.value.active_labels)
