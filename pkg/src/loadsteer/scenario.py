"""Neighborhood synthesis: homes, appliance specs, desired schedules, target.

Everything is sampled from documented uniform ranges held in
:class:`NeighborhoodConfig`, deterministically per seed (each home draws
from its own spawned substream, so home ``i`` is identical regardless of
how many homes follow it).  A sampled home is kept only if its stacked
polyhedron passes a phase-1 feasibility certificate and its desired
schedule lies inside the polyhedron; otherwise it is resampled, up to a
bounded number of attempts.

Scenario files are JSON with repr-exact floats, so save -> load -> save
round-trips byte-identically; constraint polyhedra are rebuilt from the
specs on load rather than stored.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .appliances import (
    BasicApplianceSpec,
    ConstraintPolyhedron,
    EvSpec,
    EwhSpec,
    HvacSpec,
    InfeasibleSpecError,
    assemble_home_polyhedron,
    build_basic_block,
    build_ev_block,
    build_ewh_block,
    build_hvac_block,
)
from .qp import QpSettings, solve_qp

log = logging.getLogger(__name__)

APPLIANCE_ORDER = ("hvac", "ewh", "ev", "basic")
DESIRED_FEASIBILITY_TOL = 1e-7


class ScenarioGenerationError(RuntimeError):
    """A home could not be made feasible within the resampling budget."""


@dataclass
class NeighborhoodConfig:
    """Sampling ranges and horizon parameters for one neighborhood.

    All two-element tuples are inclusive uniform ranges; integer ranges are
    drawn with both endpoints included.  The defaults describe a winter
    weekday: heating-dominant homes on 15-minute slots.
    """

    n_homes: int = 100
    horizon: int = 96
    slot_minutes: float = 15.0
    price_low: float = 0.1
    price_high: float = 1.0
    seed: int = 0
    resample_attempts: int = 20

    temp_mean: float = 10.0
    temp_amplitude: float = 5.0
    temp_phase: float | None = None          # default horizon/2: coldest pre-dawn

    hvac_gamma1: tuple[float, float] = (0.02, 0.08)
    hvac_gamma2: tuple[float, float] = (0.2, 0.6)
    hvac_band_low: tuple[float, float] = (19.0, 21.0)
    hvac_band_high: tuple[float, float] = (23.0, 25.0)
    hvac_max_power: tuple[float, float] = (2.0, 4.0)

    ewh_capacity: tuple[float, float] = (150.0, 250.0)
    ewh_max_power: tuple[float, float] = (3.0, 4.5)
    ewh_efficiency: tuple[float, float] = (0.9, 1.0)
    ewh_pulse_count: tuple[int, int] = (2, 4)
    ewh_pulse_liters: tuple[float, float] = (20.0, 50.0)
    ewh_temp_delivery: tuple[float, float] = (50.0, 60.0)
    ewh_temp_inlet: tuple[float, float] = (8.0, 12.0)
    ewh_init_frac: tuple[float, float] = (0.7, 0.95)

    ev_capacity: tuple[float, float] = (30.0, 60.0)
    ev_max_power: tuple[float, float] = (3.0, 7.0)
    ev_window_slots: tuple[int, int] = (2, 6)
    ev_trip_kwh: tuple[float, float] = (5.0, 12.0)

    basic_window_slots: tuple[int, int] = (4, 12)
    basic_total_energy: tuple[float, float] = (1.0, 3.0)
    basic_max_power: tuple[float, float] = (1.0, 2.0)

    comfort_weight: tuple[float, float] = (0.5, 2.0)

    @property
    def slot_seconds(self) -> float:
        return self.slot_minutes * 60.0

    @property
    def slot_hours(self) -> float:
        return self.slot_minutes / 60.0

    def validate(self) -> None:
        if self.n_homes < 1:
            raise ValueError("n_homes must be at least 1")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2 slots")
        if self.slot_minutes <= 0.0:
            raise ValueError("slot_minutes must be positive")
        if not self.price_low < self.price_high:
            raise ValueError("price box must have price_low < price_high")
        if self.price_low < 0.0:
            raise ValueError("prices must be nonnegative")
        if self.resample_attempts < 1:
            raise ValueError("resample_attempts must be at least 1")
        for name in (
            "hvac_gamma1", "hvac_gamma2", "hvac_band_low", "hvac_band_high",
            "hvac_max_power", "ewh_capacity", "ewh_max_power", "ewh_efficiency",
            "ewh_pulse_count", "ewh_pulse_liters", "ewh_temp_delivery",
            "ewh_temp_inlet", "ewh_init_frac", "ev_capacity", "ev_max_power",
            "ev_window_slots", "ev_trip_kwh", "basic_window_slots",
            "basic_total_energy", "basic_max_power", "comfort_weight",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: range low {lo} exceeds high {hi}")
        if self.comfort_weight[0] <= 0.0:
            raise ValueError("comfort weights must be strictly positive")


@dataclass
class TargetProfile:
    """Desired aggregate level per slot; flat by construction."""

    series: np.ndarray

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=float)


@dataclass
class HomeData:
    index: int
    appliances: list[str]
    specs: dict
    weights: np.ndarray          # comfort weight per appliance, > 0
    desired: np.ndarray          # (M, K)
    polyhedron: ConstraintPolyhedron


@dataclass
class Scenario:
    config: NeighborhoodConfig
    outside_temp: np.ndarray
    homes: list[HomeData]
    target: TargetProfile

    @property
    def n_homes(self) -> int:
        return len(self.homes)

    @property
    def horizon(self) -> int:
        return self.config.horizon


@dataclass
class FeasibilityResult:
    feasible: bool
    point: np.ndarray
    slack: float                 # attained normalized interior slack
    worst_label: str = ""        # most violated row when infeasible


def outside_temperature(config: NeighborhoodConfig) -> np.ndarray:
    """Sinusoidal outdoor temperature over the horizon."""
    k = config.horizon
    phase = config.temp_phase if config.temp_phase is not None else k / 2.0
    t = np.arange(k, dtype=float)
    return config.temp_mean + config.temp_amplitude * np.sin(2.0 * np.pi * (t - phase) / k)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _sample_hvac(rng, config, outside) -> HvacSpec:
    low = rng.uniform(*config.hvac_band_low)
    high = rng.uniform(*config.hvac_band_high)
    mid = 0.5 * (low + high)
    mode = "heating" if float(np.mean(outside)) < mid else "cooling"
    return HvacSpec(
        gamma1=rng.uniform(*config.hvac_gamma1),
        gamma2=rng.uniform(*config.hvac_gamma2),
        temp_low=low,
        temp_high=high,
        temp_init=rng.uniform(low, high),
        max_power=rng.uniform(*config.hvac_max_power),
        mode=mode,
    )


def _sample_ewh(rng, config) -> EwhSpec:
    k = config.horizon
    capacity = rng.uniform(*config.ewh_capacity)
    lo, hi = config.ewh_pulse_count
    count = int(rng.integers(min(lo, k), min(hi, k) + 1))
    slots = np.sort(rng.choice(k, size=count, replace=False))
    demand = np.zeros(k)
    demand[slots] = rng.uniform(*config.ewh_pulse_liters, size=count)
    return EwhSpec(
        capacity=capacity,
        max_power=rng.uniform(*config.ewh_max_power),
        efficiency=rng.uniform(*config.ewh_efficiency),
        temp_delivery=rng.uniform(*config.ewh_temp_delivery),
        temp_inlet=rng.uniform(*config.ewh_temp_inlet),
        init_level=rng.uniform(*config.ewh_init_frac) * capacity,
        demand=demand,
    )


def _sample_ev(rng, config) -> EvSpec:
    k = config.horizon
    capacity = rng.uniform(*config.ev_capacity)
    trip = rng.uniform(*config.ev_trip_kwh)
    lo, hi = config.ev_window_slots
    max_len = max(1, min(hi, k // 3))
    length = int(rng.integers(min(lo, max_len), max_len + 1))
    start_lo = k // 3
    start_hi = max(start_lo + 1, (3 * k) // 4 - length)
    start = int(rng.integers(start_lo, start_hi))
    demand = np.zeros(k)
    demand[start : start + length] = trip / length
    init_lo = 1.05 * trip + 0.5
    init_hi = capacity - 1.05 * trip
    if init_hi <= init_lo:
        raise InfeasibleSpecError("ev", "battery too small for the sampled trip")
    return EvSpec(
        capacity=capacity,
        max_power=rng.uniform(*config.ev_max_power),
        init_charge=rng.uniform(init_lo, init_hi),
        demand=demand,
    )


def _sample_basic(rng, config) -> BasicApplianceSpec:
    k = config.horizon
    lo, hi = config.basic_window_slots
    length = int(rng.integers(min(lo, k), min(hi, k) + 1))
    start = int(rng.integers(0, k - length + 1))
    return BasicApplianceSpec(
        window_start=start,
        window_end=start + length,
        total_energy=rng.uniform(*config.basic_total_energy),
        max_power=rng.uniform(*config.basic_max_power),
    )


def sample_home_specs(rng, config: NeighborhoodConfig, outside_temp) -> dict:
    """Draw one home's appliance specs (one of each family)."""
    return {
        "hvac": _sample_hvac(rng, config, outside_temp),
        "ewh": _sample_ewh(rng, config),
        "ev": _sample_ev(rng, config),
        "basic": _sample_basic(rng, config),
    }


# ---------------------------------------------------------------------------
# desired schedules and target
# ---------------------------------------------------------------------------


def desired_schedules(
    specs: dict,
    outside_temp: np.ndarray,
    slot_seconds: float,
    slot_hours: float,
) -> np.ndarray:
    """Comfort-preferred schedules, one row per appliance in fixed order.

    HVAC holds the band midpoint (power exactly canceling the leakage),
    the water heater reheats each draw as it happens, the vehicle charges
    uniformly over its plugged-in slots, the basic appliance spreads its
    energy evenly over its window.  Everything is clipped to power limits.
    """
    outside = np.asarray(outside_temp, dtype=float)
    k = outside.shape[0]
    rows = np.zeros((len(APPLIANCE_ORDER), k))

    hvac: HvacSpec = specs["hvac"]
    mid = 0.5 * (hvac.temp_low + hvac.temp_high)
    raw = hvac.sign * hvac.gamma1 * (mid - outside) / hvac.gamma2
    rows[0] = np.clip(raw, 0.0, hvac.max_power)

    ewh: EwhSpec = specs["ewh"]
    lpk = ewh.liters_per_kw_slot(slot_seconds)
    rows[1] = np.clip(np.asarray(ewh.demand, dtype=float) / lpk, 0.0, ewh.max_power)

    ev: EvSpec = specs["ev"]
    demand = np.asarray(ev.demand, dtype=float)
    free = demand == 0.0
    n_free = int(np.count_nonzero(free))
    if n_free:
        level = float(demand.sum()) / (n_free * slot_hours)
        rows[2, free] = min(level, ev.max_power)

    basic: BasicApplianceSpec = specs["basic"]
    rows[3, basic.window_start : basic.window_end] = min(
        basic.total_energy / basic.window_length, basic.max_power
    )
    return rows


def target_profile(desired_per_home: list[np.ndarray], horizon: int) -> TargetProfile:
    """Flat target: the neighborhood's total desired energy spread evenly.

    The sum runs in home order so the result is reproducible bit for bit.
    """
    total = 0.0
    for desired in desired_per_home:
        total += float(np.asarray(desired).sum())
    return TargetProfile(np.full(horizon, total / horizon))


# ---------------------------------------------------------------------------
# feasibility certification
# ---------------------------------------------------------------------------


def _equality_pair_rows(G: sp.csr_matrix, h: np.ndarray) -> np.ndarray:
    """Rows that together pin an equality (a row and its exact negation)."""
    G = G.tocsr()
    seen: dict[tuple, list[int]] = {}
    for r in range(G.shape[0]):
        sl = slice(G.indptr[r], G.indptr[r + 1])
        key = (tuple(G.indices[sl].tolist()), tuple(np.abs(G.data[sl]).tolist()))
        seen.setdefault(key, []).append(r)
    pinned: list[int] = []
    for rows in seen.values():
        if len(rows) < 2:
            continue
        for i, ri in enumerate(rows):
            sli = slice(G.indptr[ri], G.indptr[ri + 1])
            for rj in rows[i + 1 :]:
                slj = slice(G.indptr[rj], G.indptr[rj + 1])
                if (
                    np.array_equal(G.data[sli], -G.data[slj])
                    and abs(h[ri] + h[rj]) <= 1e-12
                ):
                    pinned.extend((ri, rj))
    return np.unique(np.array(pinned, dtype=int))


def feasibility_certify(
    polyhedron: ConstraintPolyhedron,
    center: np.ndarray | None = None,
    settings: QpSettings | None = None,
    tol: float = DESIRED_FEASIBILITY_TOL,
) -> FeasibilityResult:
    """Phase-1 check: maximize the normalized slack over the polyhedron.

    Solves a strictly convex QP in (p, s) with rows ``G p + ||g_r|| s <= h``;
    rows forming exact equalities keep a zero slack coefficient (they can
    never be interior).  The schedule penalty is anchored at ``center``
    (ideally an already-feasible point such as the comfort-preferred
    schedule): with a feasible anchor the optimum provably has ``s > 0``
    exactly when the polyhedron has a strict interior, since ``(center, 0)``
    beats every negative-slack candidate and loses to any interior move.
    A positive optimal ``s`` plus a direct recheck of ``G p <= h``
    certifies feasibility; otherwise the most violated row is reported.
    """
    G = polyhedron.matrix.tocsr()
    h = polyhedron.rhs
    n = G.shape[1]
    row_norms = np.sqrt(np.asarray(G.multiply(G).sum(axis=1)).ravel())
    s_col = np.where(row_norms > 0.0, row_norms, 0.0)
    s_col[_equality_pair_rows(G, h)] = 0.0

    G1 = sp.hstack([G, sp.csr_matrix(s_col.reshape(-1, 1))], format="csr")
    c = np.concatenate([np.full(n, 1e-2), [1e-1]])
    anchor = np.zeros(n) if center is None else np.asarray(center, dtype=float).ravel()
    pbar = np.concatenate([anchor, [5.0]])
    lin = np.zeros(n + 1)
    qp_settings = settings or QpSettings()
    sol = solve_qp(G1, h, c, pbar, lin, qp_settings)
    point = sol.p_star[:n]
    slack = float(sol.p_star[n])

    violation = np.asarray(G @ point - h)
    worst = int(np.argmax(np.where(row_norms > 0, violation / np.maximum(row_norms, 1e-30), violation)))
    ok = sol.status in ("optimal", "max_iter") and slack > 1e-9 and float(np.max(violation)) <= tol
    return FeasibilityResult(
        feasible=bool(ok),
        point=point,
        slack=slack,
        worst_label="" if ok else polyhedron.labels[worst],
    )


# ---------------------------------------------------------------------------
# home assembly and neighborhood generation
# ---------------------------------------------------------------------------


def build_home_polyhedron(
    specs: dict, outside_temp: np.ndarray, slot_seconds: float, slot_hours: float
) -> ConstraintPolyhedron:
    """Stack the four appliance blocks of one home in canonical order."""
    k = np.asarray(outside_temp).shape[0]
    blocks = [
        build_hvac_block(specs["hvac"], outside_temp),
        build_ewh_block(specs["ewh"], slot_seconds),
        build_ev_block(specs["ev"], slot_hours),
        build_basic_block(specs["basic"], k),
    ]
    return assemble_home_polyhedron(blocks, names=list(APPLIANCE_ORDER))


def _desired_inside(polyhedron: ConstraintPolyhedron, desired: np.ndarray) -> bool:
    viol = polyhedron.matrix @ desired.ravel() - polyhedron.rhs
    return float(np.max(viol)) <= DESIRED_FEASIBILITY_TOL


def generate_neighborhood(config: NeighborhoodConfig) -> Scenario:
    """Sample a full neighborhood; every home is certified feasible."""
    config.validate()
    outside = outside_temperature(config)
    homes: list[HomeData] = []
    desireds: list[np.ndarray] = []
    for i in range(config.n_homes):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(i,)))
        home = None
        reasons: list[str] = []
        for _ in range(config.resample_attempts):
            weights = rng.uniform(*config.comfort_weight, size=len(APPLIANCE_ORDER))
            try:
                specs = sample_home_specs(rng, config, outside)
                poly = build_home_polyhedron(
                    specs, outside, config.slot_seconds, config.slot_hours
                )
            except InfeasibleSpecError as exc:
                reasons.append(str(exc))
                continue
            desired = desired_schedules(specs, outside, config.slot_seconds, config.slot_hours)
            if not _desired_inside(poly, desired):
                reasons.append("desired schedule outside the polyhedron")
                continue
            cert = feasibility_certify(poly, center=desired.ravel())
            if not cert.feasible:
                reasons.append(f"phase-1 failed at row {cert.worst_label!r}")
                continue
            home = HomeData(
                index=i,
                appliances=list(APPLIANCE_ORDER),
                specs=specs,
                weights=weights,
                desired=desired,
                polyhedron=poly,
            )
            break
        if home is None:
            raise ScenarioGenerationError(
                f"home {i}: no feasible draw in {config.resample_attempts} attempts "
                f"(last: {reasons[-1] if reasons else 'n/a'})"
            )
        homes.append(home)
        desireds.append(home.desired)
    target = target_profile(desireds, config.horizon)
    return Scenario(config=config, outside_temp=outside, homes=homes, target=target)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_FORMAT = "loadsteer-scenario-v1"

_SPEC_TYPES = {
    "hvac": HvacSpec,
    "ewh": EwhSpec,
    "ev": EvSpec,
    "basic": BasicApplianceSpec,
}


def _spec_to_dict(spec) -> dict:
    out = {}
    for f in dataclasses.fields(spec):
        value = getattr(spec, f.name)
        out[f.name] = value.tolist() if isinstance(value, np.ndarray) else value
    return out


def _spec_from_dict(name: str, data: dict):
    cls = _SPEC_TYPES[name]
    kwargs = dict(data)
    if "demand" in kwargs:
        kwargs["demand"] = np.asarray(kwargs["demand"], dtype=float)
    return cls(**kwargs)


def scenario_to_dict(scenario: Scenario) -> dict:
    config = dataclasses.asdict(scenario.config)
    config = {k: list(v) if isinstance(v, tuple) else v for k, v in config.items()}
    return {
        "format": _FORMAT,
        "config": config,
        "outside_temp": scenario.outside_temp.tolist(),
        "target": scenario.target.series.tolist(),
        "homes": [
            {
                "index": home.index,
                "appliances": home.appliances,
                "weights": home.weights.tolist(),
                "specs": {name: _spec_to_dict(home.specs[name]) for name in home.appliances},
                "desired": home.desired.tolist(),
            }
            for home in scenario.homes
        ],
    }


def scenario_from_dict(data: dict) -> Scenario:
    if data.get("format") != _FORMAT:
        raise ValueError(f"unrecognized scenario format {data.get('format')!r}")
    raw = dict(data["config"])
    fields = {f.name: f for f in dataclasses.fields(NeighborhoodConfig)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    for key, value in list(raw.items()):
        if isinstance(value, list):
            raw[key] = tuple(value)
    config = NeighborhoodConfig(**raw)
    outside = np.asarray(data["outside_temp"], dtype=float)
    homes = []
    for entry in data["homes"]:
        specs = {
            name: _spec_from_dict(name, entry["specs"][name]) for name in entry["appliances"]
        }
        poly = build_home_polyhedron(specs, outside, config.slot_seconds, config.slot_hours)
        homes.append(
            HomeData(
                index=int(entry["index"]),
                appliances=list(entry["appliances"]),
                specs=specs,
                weights=np.asarray(entry["weights"], dtype=float),
                desired=np.asarray(entry["desired"], dtype=float),
                polyhedron=poly,
            )
        )
    return Scenario(
        config=config,
        outside_temp=outside,
        homes=homes,
        target=TargetProfile(np.asarray(data["target"], dtype=float)),
    )


def scenario_to_bytes(scenario: Scenario) -> bytes:
    return json.dumps(scenario_to_dict(scenario), indent=1).encode()


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_bytes(scenario_to_bytes(scenario))


def load_scenario(path) -> Scenario:
    data = json.loads(Path(path).read_text())
    return scenario_from_dict(data)
