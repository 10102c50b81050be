"""Appliance comfort models expressed as linear inequality blocks.

Every appliance family owns a K-slot power schedule ``p`` (kW per slot) and
a set of comfort rules (temperature band, tank level, battery charge, total
run energy).  Each builder turns those rules into rows of ``G p <= h`` over
that appliance's schedule, together with human-readable row labels.  The
forward simulators (``*_trajectory``) evaluate the underlying recursions
directly and act as independent checks of the rows.

Blocks from the appliances of one home are stacked block-diagonally by
:func:`assemble_home_polyhedron`; the stacked decision vector orders
variables appliance-major, slot-minor: ``p_1(0..K-1), p_2(0..K-1), ...``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

WATER_HEAT_J_PER_KG_C = 4186.0  # specific heat of water
DEFAULT_SLOT_SECONDS = 900.0    # 15-minute slots
DEFAULT_SLOT_HOURS = 0.25


class InfeasibleSpecError(ValueError):
    """An appliance spec admits no schedule (cheap analytic precheck).

    Raised by the block builders; full certification of an assembled home
    is the scenario generator's job.
    """

    def __init__(self, label: str, reason: str):
        self.label = label
        self.reason = reason
        super().__init__(f"{label}: {reason}")


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass
class HvacSpec:
    """Thermal parameters of a heat pump serving one conditioned zone.

    The indoor temperature follows

        T_in(t+1) = T_in(t) + gamma1 * (T_out(t) - T_in(t)) + s * gamma2 * p(t)

    with ``s = +1`` for heating and ``s = -1`` for cooling.  Comfort is the
    band ``temp_low <= T_in(t) <= temp_high`` for t = 1..K.
    """

    gamma1: float          # thermal leakage per slot, 0 < gamma1 < 1
    gamma2: float          # degC gained per kW-slot
    temp_low: float
    temp_high: float
    temp_init: float
    max_power: float       # kW
    mode: str = "heating"  # or "cooling"

    @property
    def sign(self) -> float:
        return 1.0 if self.mode == "heating" else -1.0

    def validate(self) -> None:
        if not 0.0 < self.gamma1 < 1.0:
            raise ValueError(f"gamma1 must be in (0, 1), got {self.gamma1}")
        if self.gamma2 <= 0.0:
            raise ValueError(f"gamma2 must be positive, got {self.gamma2}")
        if self.temp_low > self.temp_high:
            raise ValueError("temperature band is empty")
        if self.max_power <= 0.0:
            raise ValueError("max_power must be positive")
        if self.mode not in ("heating", "cooling"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class EwhSpec:
    """Electric water heater: a tank of hot water topped up by heating.

    One kW-slot of heating converts to liters through
    ``efficiency * slot_seconds * 1000 / (WATER_HEAT_J_PER_KG_C * (temp_delivery - temp_inlet))``
    (water taken as 1 kg/L).
    """

    capacity: float        # liters
    max_power: float       # kW
    efficiency: float      # 0 < eta <= 1
    temp_delivery: float   # degC
    temp_inlet: float      # degC
    init_level: float      # liters of hot water at t=0
    demand: np.ndarray     # liters drawn per slot, length K

    def liters_per_kw_slot(self, slot_seconds: float = DEFAULT_SLOT_SECONDS) -> float:
        joules = self.efficiency * slot_seconds * 1000.0
        return joules / (WATER_HEAT_J_PER_KG_C * (self.temp_delivery - self.temp_inlet))

    def validate(self) -> None:
        if self.capacity <= 0.0 or self.max_power <= 0.0:
            raise ValueError("capacity and max_power must be positive")
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError(f"efficiency must be in (0, 1], got {self.efficiency}")
        if self.temp_delivery <= self.temp_inlet:
            raise ValueError("delivery temperature must exceed inlet temperature")
        if not 0.0 <= self.init_level <= self.capacity:
            raise ValueError("init_level must lie in [0, capacity]")
        if np.any(np.asarray(self.demand) < 0.0):
            raise ValueError("demand must be nonnegative")


@dataclass
class EvSpec:
    """Electric vehicle battery charged at home, unavailable while in use.

    Slots with positive energy demand form the usage set: charging is
    pinned to zero there, and the battery balance skips their charge term.
    There is no discharging to the grid.
    """

    capacity: float        # kWh
    max_power: float       # kW
    init_charge: float     # kWh
    demand: np.ndarray     # kWh drawn per slot, length K

    def usage_slots(self) -> np.ndarray:
        """Slots where the vehicle is away; derived from demand, never stored."""
        return np.flatnonzero(np.asarray(self.demand) > 0.0)

    def validate(self) -> None:
        if self.capacity <= 0.0 or self.max_power <= 0.0:
            raise ValueError("capacity and max_power must be positive")
        if not 0.0 <= self.init_charge <= self.capacity:
            raise ValueError("init_charge must lie in [0, capacity]")
        if np.any(np.asarray(self.demand) < 0.0):
            raise ValueError("demand must be nonnegative")


@dataclass
class BasicApplianceSpec:
    """Fixed-energy appliance (washer, dryer, oven) run inside a window.

    The schedule must deliver exactly ``total_energy`` kW-slots inside
    ``[window_start, window_end)`` and stay off outside it.
    """

    window_start: int
    window_end: int        # exclusive
    total_energy: float    # kW-slots
    max_power: float       # kW

    @property
    def window_length(self) -> int:
        return self.window_end - self.window_start

    def validate(self) -> None:
        if self.window_length <= 0:
            raise ValueError("window must be nonempty")
        if self.window_start < 0:
            raise ValueError("window_start must be nonnegative")
        if self.total_energy < 0.0 or self.max_power <= 0.0:
            raise ValueError("total_energy must be >= 0 and max_power > 0")


# ---------------------------------------------------------------------------
# constraint containers
# ---------------------------------------------------------------------------


@dataclass
class ConstraintBlock:
    """Rows of ``G p <= h`` over one appliance's K-slot schedule."""

    matrix: np.ndarray          # (rows, K)
    rhs: np.ndarray             # (rows,)
    labels: list[str]

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        self.rhs = np.asarray(self.rhs, dtype=float)
        if self.matrix.shape[0] != self.rhs.shape[0]:
            raise ValueError("matrix and rhs row counts disagree")
        if len(self.labels) != self.matrix.shape[0]:
            raise ValueError("one label per row required")

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_slots(self) -> int:
        return self.matrix.shape[1]


@dataclass
class ConstraintPolyhedron:
    """Stacked block-diagonal feasible set ``G p <= h`` of one home.

    ``matrix`` is CSR (the blocks are sparse: bound rows carry one entry,
    state rows a lower-triangular band).  Column ``j * K + t`` is appliance
    ``j``'s power in slot ``t``.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    labels: list[str]
    appliances: list[str]              # block names, in column order
    n_slots: int
    block_rows: list[tuple[int, int]] = field(default_factory=list)  # [start, end) per block

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_vars(self) -> int:
        return self.matrix.shape[1]

    def column_of(self, appliance: int, slot: int) -> int:
        if not 0 <= appliance < len(self.appliances):
            raise IndexError(f"no appliance {appliance}")
        if not 0 <= slot < self.n_slots:
            raise IndexError(f"no slot {slot}")
        return appliance * self.n_slots + slot

    def row_origin(self, row: int) -> tuple[str, str]:
        """Map a stacked row back to (appliance name, block-local label)."""
        for name, (lo, hi) in zip(self.appliances, self.block_rows):
            if lo <= row < hi:
                label = self.labels[row]
                return name, label.split(":", 1)[1]
        raise IndexError(f"no row {row}")

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


# ---------------------------------------------------------------------------
# HVAC
# ---------------------------------------------------------------------------


def _hvac_affine(spec: HvacSpec, outside_temp: np.ndarray):
    """Closed-form pieces of the indoor temperature.

    Unrolling the recursion gives, for t = 1..K,

        T_in(t) = (1-g1)^t T_in(0)
                  + sum_a (1-g1)^a g1 T_out(t-1-a)
                  + s * sum_a (1-g1)^a g2 p(t-1-a)

    i.e. ``T_in(t) = const(t) + s * (W p)(t)`` with W lower-triangular
    Toeplitz, ``W[t-1, tau] = (1-g1)^(t-1-tau) g2``.
    """
    outside = np.asarray(outside_temp, dtype=float)
    k = outside.shape[0]
    decay = 1.0 - spec.gamma1
    const = np.empty(k)
    prev = spec.temp_init
    for t in range(k):
        prev = decay * prev + spec.gamma1 * outside[t]
        const[t] = prev
    col = spec.gamma2 * decay ** np.arange(k)
    weights = np.zeros((k, k))
    for t in range(k):
        weights[t, : t + 1] = col[: t + 1][::-1]
    return const, weights


def hvac_temperature_trajectory(
    spec: HvacSpec, schedule: np.ndarray, outside_temp: np.ndarray
) -> np.ndarray:
    """Indoor temperature T_in(1..K) under ``schedule``, by direct recursion."""
    schedule = np.asarray(schedule, dtype=float)
    outside = np.asarray(outside_temp, dtype=float)
    temps = np.empty(schedule.shape[0])
    temp = spec.temp_init
    for t in range(schedule.shape[0]):
        temp = temp + spec.gamma1 * (outside[t] - temp) + spec.sign * spec.gamma2 * schedule[t]
        temps[t] = temp
    return temps


def build_hvac_block(spec: HvacSpec, outside_temp: np.ndarray) -> ConstraintBlock:
    """Temperature-band and power-bound rows for one HVAC unit.

    Raises :class:`InfeasibleSpecError` when the band is already missed at
    t = 1 by both extreme schedules (a constant-only check; anything subtler
    is left to full certification).
    """
    spec.validate()
    outside = np.asarray(outside_temp, dtype=float)
    k = outside.shape[0]
    const, weights = _hvac_affine(spec, outside)

    reach_lo = const[0] if spec.sign > 0 else const[0] - spec.gamma2 * spec.max_power
    reach_hi = const[0] + spec.gamma2 * spec.max_power if spec.sign > 0 else const[0]
    if reach_lo > spec.temp_high:
        raise InfeasibleSpecError(
            "hvac", f"temperature at t=1 is at least {reach_lo:.3f}, above the band"
        )
    if reach_hi < spec.temp_low:
        raise InfeasibleSpecError(
            "hvac", f"temperature at t=1 is at most {reach_hi:.3f}, below the band"
        )

    signed = spec.sign * weights
    eye = np.eye(k)
    matrix = np.vstack([signed, -signed, eye, -eye])
    rhs = np.concatenate(
        [
            spec.temp_high - const,
            const - spec.temp_low,
            np.full(k, spec.max_power),
            np.zeros(k),
        ]
    )
    labels = (
        [f"temp_le_high[t={t}]" for t in range(1, k + 1)]
        + [f"temp_ge_low[t={t}]" for t in range(1, k + 1)]
        + [f"power_le_max[t={t}]" for t in range(k)]
        + [f"power_ge_0[t={t}]" for t in range(k)]
    )
    return ConstraintBlock(matrix, rhs, labels)


# ---------------------------------------------------------------------------
# electric water heater
# ---------------------------------------------------------------------------


def ewh_tank_trajectory(
    spec: EwhSpec, schedule: np.ndarray, slot_seconds: float = DEFAULT_SLOT_SECONDS
) -> np.ndarray:
    """Hot-water level x(1..K) in liters: x(t+1) = x(t) + z(t) - y(t)."""
    schedule = np.asarray(schedule, dtype=float)
    lpk = spec.liters_per_kw_slot(slot_seconds)
    heated = lpk * schedule
    return spec.init_level + np.cumsum(heated - np.asarray(spec.demand, dtype=float))


def build_ewh_block(
    spec: EwhSpec, slot_seconds: float = DEFAULT_SLOT_SECONDS
) -> ConstraintBlock:
    """Tank-level and power-bound rows for one water heater.

    The level ``x(t) = x(0) + sum_{a<t} (lpk * p(a) - y(a))`` must stay
    under capacity and above the slot's draw.  Nonnegativity rows are
    emitted only for slots with positive draw: elsewhere they would
    duplicate the demand rows exactly (identical coefficients and rhs).
    """
    spec.validate()
    demand = np.asarray(spec.demand, dtype=float)
    k = demand.shape[0]
    lpk = spec.liters_per_kw_slot(slot_seconds)

    if spec.init_level < demand[0]:
        raise InfeasibleSpecError(
            "ewh", f"initial level {spec.init_level:.1f} L cannot cover the first draw"
        )
    cum_demand = np.cumsum(demand)  # cum_demand[t-1] = sum_{a<t} y(a)
    for t in range(1, k):
        best = spec.init_level + t * lpk * spec.max_power - cum_demand[t - 1]
        if best < demand[t]:
            raise InfeasibleSpecError(
                "ewh",
                f"demand at t={t} unreachable even at full power "
                f"(attainable level {best:.1f} L < draw {demand[t]:.1f} L)",
            )

    rows, rhs, labels = [], [], []
    tril = np.tril(np.full((k - 1, k), lpk), k=-1) if k > 1 else np.zeros((0, k))
    for t in range(1, k):
        coeffs = tril[t - 1]
        base = spec.init_level - cum_demand[t - 1]
        rows.append(coeffs)
        rhs.append(spec.capacity - base)
        labels.append(f"level_le_capacity[t={t}]")
        rows.append(-coeffs)
        rhs.append(base - demand[t])
        labels.append(f"level_ge_demand[t={t}]")
        if demand[t] > 0.0:
            rows.append(-coeffs)
            rhs.append(base)
            labels.append(f"level_ge_0[t={t}]")

    eye = np.eye(k)
    matrix = np.vstack([np.array(rows).reshape(-1, k), eye, -eye])
    rhs = np.concatenate([rhs, np.full(k, spec.max_power), np.zeros(k)])
    labels += [f"power_le_max[t={t}]" for t in range(k)]
    labels += [f"power_ge_0[t={t}]" for t in range(k)]
    return ConstraintBlock(matrix, rhs, labels)


# ---------------------------------------------------------------------------
# electric vehicle
# ---------------------------------------------------------------------------


def ev_charge_trajectory(
    spec: EvSpec, schedule: np.ndarray, slot_hours: float = DEFAULT_SLOT_HOURS
) -> np.ndarray:
    """Battery charge x(1..K) in kWh; charge gained only off the usage set."""
    schedule = np.asarray(schedule, dtype=float)
    demand = np.asarray(spec.demand, dtype=float)
    gained = slot_hours * schedule.copy()
    gained[demand > 0.0] = 0.0
    return spec.init_charge + np.cumsum(gained - demand)


def build_ev_block(
    spec: EvSpec, slot_hours: float = DEFAULT_SLOT_HOURS
) -> ConstraintBlock:
    """Battery-balance and charging rows for one vehicle.

    Charging during usage slots is pinned by an extra ``p(t) <= 0`` row on
    top of the global ``p(t) >= 0``; the balance rows give those slots zero
    coefficient (energy drawn while away comes from the battery alone).
    """
    spec.validate()
    demand = np.asarray(spec.demand, dtype=float)
    k = demand.shape[0]
    in_use = demand > 0.0

    if spec.init_charge < demand[0] - 1e-12 and in_use[0]:
        raise InfeasibleSpecError(
            "ev", f"initial charge {spec.init_charge:.2f} kWh cannot cover the first trip slot"
        )
    cum_demand = np.cumsum(demand)
    chargeable = np.cumsum(~in_use) * slot_hours * spec.max_power
    for t in range(1, k):
        best = spec.init_charge + chargeable[t - 1] - cum_demand[t - 1]
        if in_use[t] and best < demand[t] - 1e-12:
            raise InfeasibleSpecError(
                "ev",
                f"trip demand at t={t} unreachable even charging at full power "
                f"(attainable charge {best:.2f} kWh < demand {demand[t]:.2f} kWh)",
            )

    gain = np.full(k, slot_hours)
    gain[in_use] = 0.0
    rows, rhs, labels = [], [], []
    for t in range(1, k):
        coeffs = np.zeros(k)
        coeffs[:t] = gain[:t]
        base = spec.init_charge - cum_demand[t - 1]
        rows.append(coeffs)
        rhs.append(spec.capacity - base)
        labels.append(f"charge_le_capacity[t={t}]")
        rows.append(-coeffs)
        rhs.append(base - demand[t])
        labels.append(f"charge_ge_demand[t={t}]")

    eye = np.eye(k)
    matrix_parts = [np.array(rows).reshape(-1, k), eye, -eye]
    rhs_parts = [np.asarray(rhs), np.full(k, spec.max_power), np.zeros(k)]
    labels += [f"charge_le_max[t={t}]" for t in range(k)]
    labels += [f"charge_ge_0[t={t}]" for t in range(k)]
    use_idx = np.flatnonzero(in_use)
    if use_idx.size:
        pin = np.zeros((use_idx.size, k))
        pin[np.arange(use_idx.size), use_idx] = 1.0
        matrix_parts.append(pin)
        rhs_parts.append(np.zeros(use_idx.size))
        labels += [f"no_charge_in_use[t={t}]" for t in use_idx]
    return ConstraintBlock(np.vstack(matrix_parts), np.concatenate(rhs_parts), labels)


# ---------------------------------------------------------------------------
# basic window appliance
# ---------------------------------------------------------------------------


def build_basic_block(spec: BasicApplianceSpec, n_slots: int) -> ConstraintBlock:
    """Exact-energy window rows for a washer/dryer class appliance."""
    spec.validate()
    if spec.window_end > n_slots:
        raise ValueError("window extends past the horizon")
    if spec.total_energy > spec.max_power * spec.window_length + 1e-12:
        raise InfeasibleSpecError(
            "basic",
            f"window of {spec.window_length} slots at {spec.max_power} kW cannot "
            f"deliver {spec.total_energy} kW-slots",
        )

    k = n_slots
    window = np.zeros(k)
    window[spec.window_start : spec.window_end] = 1.0
    inside = np.flatnonzero(window)
    outside = np.flatnonzero(window == 0.0)

    rows = [window, -window]
    rhs = [spec.total_energy, -spec.total_energy]
    labels = ["energy_le_total", "energy_ge_total"]
    for t in inside:
        row = np.zeros(k)
        row[t] = 1.0
        rows.append(row)
        rhs.append(spec.max_power)
        labels.append(f"power_le_max[t={t}]")
        rows.append(-row)
        rhs.append(0.0)
        labels.append(f"power_ge_0[t={t}]")
    for t in outside:
        row = np.zeros(k)
        row[t] = 1.0
        rows.append(row)
        rhs.append(0.0)
        labels.append(f"off_le_0[t={t}]")
        rows.append(-row)
        rhs.append(0.0)
        labels.append(f"off_ge_0[t={t}]")
    return ConstraintBlock(np.array(rows), np.array(rhs), labels)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def assemble_home_polyhedron(
    blocks: list[ConstraintBlock], names: list[str] | None = None
) -> ConstraintPolyhedron:
    """Stack appliance blocks into one block-diagonal home polyhedron."""
    if not blocks:
        raise ValueError("at least one block required")
    k = blocks[0].n_slots
    if any(b.n_slots != k for b in blocks):
        raise ValueError("all blocks must share the slot count")
    if names is None:
        names = [f"appliance{j}" for j in range(len(blocks))]
    if len(names) != len(blocks):
        raise ValueError("one name per block required")

    matrix = sp.block_diag([sp.csr_matrix(b.matrix) for b in blocks], format="csr")
    matrix.sort_indices()
    rhs = np.concatenate([b.rhs for b in blocks])
    labels: list[str] = []
    block_rows: list[tuple[int, int]] = []
    row = 0
    for name, block in zip(names, blocks):
        labels.extend(f"{name}:{lab}" for lab in block.labels)
        block_rows.append((row, row + block.n_rows))
        row += block.n_rows
    return ConstraintPolyhedron(
        matrix=matrix,
        rhs=rhs,
        labels=labels,
        appliances=list(names),
        n_slots=k,
        block_rows=block_rows,
    )
