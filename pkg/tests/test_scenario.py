"""Neighborhood generation: determinism, feasibility, serialization."""

import numpy as np
import pytest

from loadsteer.qp import solve_qp
from loadsteer.scenario import (
    NeighborhoodConfig,
    ScenarioGenerationError,
    build_home_polyhedron,
    desired_schedules,
    feasibility_certify,
    generate_neighborhood,
    load_scenario,
    outside_temperature,
    sample_home_specs,
    save_scenario,
    scenario_to_bytes,
    scenario_to_dict,
    scenario_from_dict,
    target_profile,
)


@pytest.fixture(scope="module")
def small_scenario():
    cfg = NeighborhoodConfig(n_homes=4, horizon=12, seed=42)
    return generate_neighborhood(cfg)


def test_outside_temperature_shape_and_range():
    cfg = NeighborhoodConfig(horizon=96, temp_mean=10.0, temp_amplitude=5.0)
    temp = outside_temperature(cfg)
    assert temp.shape == (96,)
    assert np.all(temp >= 5.0 - 1e-12) and np.all(temp <= 15.0 + 1e-12)
    # coldest pre-dawn by default: minimum in the first half of the day
    assert np.argmin(temp) < 48


def test_generation_is_deterministic(small_scenario):
    again = generate_neighborhood(NeighborhoodConfig(n_homes=4, horizon=12, seed=42))
    assert scenario_to_bytes(again) == scenario_to_bytes(small_scenario)


def test_different_seeds_differ():
    a = generate_neighborhood(NeighborhoodConfig(n_homes=2, horizon=12, seed=0))
    b = generate_neighborhood(NeighborhoodConfig(n_homes=2, horizon=12, seed=1))
    assert scenario_to_bytes(a) != scenario_to_bytes(b)


def test_every_home_has_four_appliances(small_scenario):
    for home in small_scenario.homes:
        assert home.appliances == ["hvac", "ewh", "ev", "basic"]
        assert home.weights.shape == (4,)
        assert np.all(home.weights > 0)
        assert home.desired.shape == (4, 12)


def test_desired_schedule_satisfies_every_row(small_scenario):
    """The preferred trajectory must itself be a feasible schedule."""
    for home in small_scenario.homes:
        p = home.desired.ravel()
        slack = home.polyhedron.matrix @ p - home.polyhedron.rhs
        assert float(np.max(slack)) <= 1e-7, (
            f"home {home.index}: desired violates "
            f"{home.polyhedron.labels[int(np.argmax(slack))]}"
        )


def test_target_is_flat_average(small_scenario):
    q = small_scenario.target.series
    assert q.shape == (12,)
    assert np.allclose(q, q[0])
    total = sum(h.desired.sum() for h in small_scenario.homes)
    assert q.sum() == pytest.approx(total, rel=1e-12)


def test_feasibility_certify_accepts_generated_home(small_scenario):
    home = small_scenario.homes[0]
    res = feasibility_certify(home.polyhedron, center=home.desired.ravel())
    assert res.feasible
    assert res.slack > 1e-9
    # the certified point is genuinely inside
    assert np.max(home.polyhedron.matrix @ res.point - home.polyhedron.rhs) <= 1e-7


def test_feasibility_certify_rejects_empty_set():
    """Contradictory bounds: p0 <= -1 and p0 >= 0 cannot hold together."""
    import scipy.sparse as sp

    from loadsteer.appliances import ConstraintPolyhedron

    matrix = sp.csr_matrix(np.array([[1.0], [-1.0]]))
    rhs = np.array([-1.0, 0.0])
    poly = ConstraintPolyhedron(
        matrix=matrix,
        rhs=rhs,
        labels=["x:le_minus_one", "x:ge_zero"],
        appliances=["x"],
        n_slots=1,
        block_rows=[(0, 2)],
    )
    res = feasibility_certify(poly)
    assert not res.feasible
    assert res.worst_label in ("x:le_minus_one", "x:ge_zero")


def test_equality_pairs_get_no_interior_slack():
    """An exact-energy pair admits no strict interior in that direction,
    but certification must still pass via the slack-variable exemption."""
    cfg = NeighborhoodConfig(n_homes=1, horizon=12, seed=3)
    scen = generate_neighborhood(cfg)
    home = scen.homes[0]
    # the basic appliance always contributes an equality pair
    assert any("energy_le_total" in lab for lab in home.polyhedron.labels)
    res = feasibility_certify(home.polyhedron, center=home.desired.ravel())
    assert res.feasible


def test_sample_home_specs_roundtrip_through_builders():
    cfg = NeighborhoodConfig(horizon=16, seed=9)
    rng = np.random.default_rng(9)
    temp = outside_temperature(cfg)
    specs = sample_home_specs(rng, cfg, temp)
    poly = build_home_polyhedron(specs, temp, cfg.slot_seconds, cfg.slot_hours)
    desired = desired_schedules(specs, temp, cfg.slot_seconds, cfg.slot_hours)
    assert poly.n_vars == 4 * 16
    assert desired.shape == (4, 16)


def test_save_load_roundtrip(tmp_path, small_scenario):
    path = tmp_path / "scen.json"
    save_scenario(small_scenario, path)
    loaded = load_scenario(path)
    assert scenario_to_bytes(loaded) == scenario_to_bytes(small_scenario)
    # matrices survive the trip exactly, not just approximately
    a = small_scenario.homes[0].polyhedron
    b = loaded.homes[0].polyhedron
    assert (a.matrix != b.matrix).nnz == 0
    np.testing.assert_array_equal(a.rhs, b.rhs)
    assert a.labels == b.labels


def test_scenario_dict_rejects_unknown_config_keys(small_scenario):
    blob = scenario_to_dict(small_scenario)
    blob["config"]["surprise"] = 1
    with pytest.raises(ValueError, match="surprise"):
        scenario_from_dict(blob)


def test_scenario_dict_rejects_unknown_format(small_scenario):
    blob = scenario_to_dict(small_scenario)
    blob["format"] = "not-a-scenario"
    with pytest.raises(ValueError, match="format"):
        scenario_from_dict(blob)


def test_infeasible_config_raises_generation_error():
    # EWH pulses far beyond what any tank or element could deliver
    cfg = NeighborhoodConfig(
        n_homes=1,
        horizon=12,
        seed=0,
        resample_attempts=2,
        ewh_pulse_liters=(5000.0, 6000.0),
    )
    with pytest.raises(ScenarioGenerationError):
        generate_neighborhood(cfg)


def test_config_validation_messages():
    with pytest.raises(ValueError, match="price box"):
        NeighborhoodConfig(price_low=1.0, price_high=0.5).validate()
    with pytest.raises(ValueError, match="hvac_gamma1"):
        NeighborhoodConfig(hvac_gamma1=(0.5, 0.1)).validate()


def test_certified_interior_point_usable_as_warm_start(small_scenario):
    """The certification point lands strictly inside, so a solve started
    there converges; sanity check that the pipeline pieces compose."""
    home = small_scenario.homes[0]
    res = feasibility_certify(home.polyhedron, center=home.desired.ravel())
    c = np.repeat(home.weights, small_scenario.horizon)
    price = np.full(home.desired.size, 0.3)
    sol = solve_qp(
        home.polyhedron.matrix,
        home.polyhedron.rhs,
        c,
        home.desired.ravel(),
        price,
    )
    assert sol.status == "optimal"
    assert res.point.shape == sol.p_star.shape
