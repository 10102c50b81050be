"""Price coordination loop: stochastic descent of the leader objective.

Each iteration samples a mini-batch of homes, assembles a stochastic
gradient of

    f(pi) = sum_t (Q(t) - aggregate(t))^2 + sum_ijt c_ij (p_ij(t) - pbar_ij(t))^2

from the homes' schedule sensitivities, steps an online optimizer (Adam
or scaled SGD), projects the price back onto the box, re-solves every
home at the new price and evaluates the full objective z_k.  The loop
stops on relative improvement ``|z_k - z_{k-1}| / z_{k-1} <= epsilon``,
at ``k_max``, or when a wall-clock budget runs out.

Per-home work (QP solve, sensitivity, contribution) can be farmed to a
thread pool; results are always reduced in ascending home order, so a
run is bit-identical for any worker count.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .qp import HomeQpSolver, PrimalDualSolution, QpSettings, SolverError
from .scenario import Scenario
from .sensitivity import (
    SingularSystemError,
    home_gradient_contribution,
    price_jacobian,
)

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "scaled_sgd")
GRADIENT_SCALINGS = ("sum", "unbiased")
STOP_REASONS = ("converged", "k_max", "time_budget")


class CoordinationError(RuntimeError):
    """A per-home solve broke down inside the coordination loop."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class PriceBox:
    """Admissible per-slot price interval (the projection set)."""

    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("price box must have low < high")

    def sample(self, rng: np.random.Generator, n_slots: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=n_slots)


@dataclass
class CoordinatorConfig:
    """Loop parameters; defaults follow the standard experiment setup."""

    batch_size: int
    optimizer: str = "adam"
    learning_rate: float = 0.1
    k_max: int = 50
    epsilon: float = 1e-3
    seed: int = 0
    gradient_scaling: str = "unbiased"

    def validate(self, n_homes: int) -> None:
        if not 1 <= self.batch_size <= n_homes:
            raise ValueError(
                f"batch_size must lie in [1, {n_homes}], got {self.batch_size}"
            )
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.gradient_scaling not in GRADIENT_SCALINGS:
            raise ValueError(f"gradient_scaling must be one of {GRADIENT_SCALINGS}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")


@dataclass
class AdamState:
    """First/second moment accumulators with bias correction."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def fresh(cls, n_slots: int) -> "AdamState":
        return cls(m=np.zeros(n_slots), v=np.zeros(n_slots))


@dataclass
class ScaledSgdState:
    step: int = 0


@dataclass
class IterationRecord:
    k: int
    objective: float
    gradient_norm: float
    batch: tuple[int, ...]
    skipped: tuple[int, ...] = ()
    wall_ms: float = 0.0


@dataclass
class RunResult:
    final_price: np.ndarray
    initial_price: np.ndarray
    initial_objective: float
    trace: list[IterationRecord] = field(default_factory=list)
    stop_reason: str = "k_max"

    @property
    def final_objective(self) -> float:
        return self.trace[-1].objective if self.trace else self.initial_objective


# ---------------------------------------------------------------------------
# objective pieces
# ---------------------------------------------------------------------------


def aggregate_load(schedules) -> np.ndarray:
    """Total neighborhood consumption per slot: sum over homes and appliances."""
    agg = None
    for sched in schedules:
        s = np.asarray(sched, dtype=float)
        part = s.sum(axis=0) if s.ndim == 2 else s
        agg = part.copy() if agg is None else agg + part
    if agg is None:
        raise ValueError("aggregate_load needs at least one schedule")
    return agg


def _target_series(target) -> np.ndarray:
    return np.asarray(getattr(target, "series", target), dtype=float)


def coordinator_objective(schedules, target, weights, desired) -> float:
    """Tracking error plus total discomfort at the given schedules."""
    q = _target_series(target)
    agg = aggregate_load(schedules)
    track = float(np.sum((q - agg) ** 2))
    discomfort = 0.0
    for sched, w, des in zip(schedules, weights, desired):
        s = np.atleast_2d(np.asarray(sched, dtype=float))
        d = np.atleast_2d(np.asarray(des, dtype=float))
        c = np.asarray(w, dtype=float)
        discomfort += float(np.sum(c[:, None] * (s - d) ** 2))
    return track + discomfort


def coordinator_partial_fp(schedules, target, weights, desired) -> np.ndarray:
    """Partial derivatives of the objective in every p_ij(t), concatenated.

    The price enters the leader objective only through the homes'
    responses, so the explicit price partial is zero and this vector is
    the whole direct derivative:

        d f / d p_ij(t) = -2 (Q(t) - aggregate(t)) + 2 c_ij (p_ij(t) - pbar_ij(t))
    """
    q = _target_series(target)
    agg = aggregate_load(schedules)
    common = -2.0 * (q - agg)
    parts = []
    for sched, w, des in zip(schedules, weights, desired):
        s = np.atleast_2d(np.asarray(sched, dtype=float))
        d = np.atleast_2d(np.asarray(des, dtype=float))
        c = np.asarray(w, dtype=float)
        parts.append((common[None, :] + 2.0 * c[:, None] * (s - d)).ravel())
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# stochastic gradient machinery
# ---------------------------------------------------------------------------


def sample_batch(n_homes: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw of ``batch_size`` distinct home indices, ascending."""
    if not 1 <= batch_size <= n_homes:
        raise ValueError("batch size out of range")
    return np.sort(rng.choice(n_homes, size=batch_size, replace=False))


def estimate_gradient(contributions, n_homes: int, batch_size: int, scaling: str) -> np.ndarray:
    """Combine per-home contributions into the price-gradient estimate.

    ``sum`` adds the batch contributions as-is; ``unbiased`` rescales by
    N/B so the expectation over batches equals the full-population
    gradient exactly.
    """
    contrib = np.atleast_2d(np.asarray(contributions, dtype=float))
    g = contrib.sum(axis=0)
    if scaling == "unbiased":
        g = g * (n_homes / batch_size)
    elif scaling != "sum":
        raise ValueError(f"gradient_scaling must be one of {GRADIENT_SCALINGS}")
    return g


def adam_step(state: AdamState, price, gradient, learning_rate: float) -> np.ndarray:
    """Bias-corrected Adam proposal (state is advanced in place)."""
    g = np.asarray(gradient, dtype=float)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return np.asarray(price, dtype=float) - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_hat)


def scaled_sgd_step(state: ScaledSgdState, price, gradient, learning_rate: float) -> np.ndarray:
    """SGD proposal with the step shrunk by 1/sqrt(iteration)."""
    state.step += 1
    scale = learning_rate / np.sqrt(float(state.step))
    return np.asarray(price, dtype=float) - scale * np.asarray(gradient, dtype=float)


def project_price(proposal, box: PriceBox) -> np.ndarray:
    """Euclidean projection onto the box: entrywise clamp."""
    return np.clip(np.asarray(proposal, dtype=float), box.low, box.high)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def _improvement_ratio(z: float, z_prev: float) -> float:
    if not np.isfinite(z_prev):
        return np.inf
    if z_prev == 0.0:
        return 0.0 if z == z_prev else np.inf
    return abs(z - z_prev) / z_prev


def run_coordination(
    scenario: Scenario,
    config: CoordinatorConfig,
    *,
    workers: int = 1,
    time_budget_s: float | None = None,
    qp_settings: QpSettings | None = None,
) -> RunResult:
    """Run the full coordination loop on a generated scenario.

    The initial price is drawn uniformly from the box using
    ``config.seed``; its full-population objective is recorded as
    ``initial_objective``.  Each iteration then: samples a batch,
    differentiates the batch homes' responses at the current price
    (reusing the solutions from the previous full evaluation), steps the
    optimizer, projects, re-solves every home at the new price and logs
    z_k.  Homes whose sensitivity system is singular are skipped for
    that iteration and recorded in the trace.  Solver breakdowns abort
    the run with the iteration index attached.
    """
    config.validate(scenario.n_homes)
    n = scenario.n_homes
    k_slots = scenario.horizon
    box = PriceBox(scenario.config.price_low, scenario.config.price_high)
    rng = np.random.default_rng(config.seed)

    homes = scenario.homes
    weights = [h.weights for h in homes]
    desired = [h.desired for h in homes]
    target = scenario.target.series
    sizes = [d.size for d in desired]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    solvers = [
        HomeQpSolver(h.polyhedron, h.weights, h.desired, qp_settings) for h in homes
    ]

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    t_start = time.perf_counter()

    def solve_one(i: int, price: np.ndarray) -> PrimalDualSolution:
        sol = solvers[i].solve(price)
        if sol.status == "infeasible":
            raise SolverError(f"home {i} reported an infeasible polyhedron")
        return sol

    def solve_all(price: np.ndarray, iteration: int) -> list[PrimalDualSolution]:
        try:
            if pool is not None:
                return list(pool.map(lambda i: solve_one(i, price), range(n)))
            return [solve_one(i, price) for i in range(n)]
        except SolverError as exc:
            raise CoordinationError(str(exc), iteration) from exc

    def contribution_one(i: int, solutions, fp: np.ndarray):
        fp_i = fp[offsets[i] : offsets[i + 1]]
        jac = price_jacobian(solutions[i], homes[i].polyhedron, homes[i].weights)
        return home_gradient_contribution(solutions[i], jac, fp_i)

    try:
        price = box.sample(rng, k_slots)
        initial_price = price.copy()
        solutions = solve_all(price, 0)
        schedules = [
            sol.p_star.reshape(des.shape) for sol, des in zip(solutions, desired)
        ]
        initial_objective = coordinator_objective(schedules, target, weights, desired)

        state = (
            AdamState.fresh(k_slots)
            if config.optimizer == "adam"
            else ScaledSgdState()
        )
        trace: list[IterationRecord] = []
        z_prev = np.inf
        stop_reason = "k_max"

        for k in range(1, config.k_max + 1):
            t_iter = time.perf_counter()
            batch = sample_batch(n, config.batch_size, rng)
            fp = coordinator_partial_fp(schedules, target, weights, desired)

            def one(i: int):
                try:
                    return i, contribution_one(i, solutions, fp), None
                except SingularSystemError as exc:
                    return i, None, exc

            if pool is not None:
                gathered = list(pool.map(one, batch.tolist()))
            else:
                gathered = [one(i) for i in batch.tolist()]

            contribs = []
            skipped = []
            for i, contrib, err in gathered:  # ascending batch order
                if err is not None:
                    skipped.append(i)
                    log.warning("iteration %d: skipping home %d: %s", k, i, err)
                else:
                    contribs.append(contrib)
            contrib_arr = (
                np.asarray(contribs) if contribs else np.zeros((0, k_slots))
            )
            g = estimate_gradient(
                contrib_arr, n, config.batch_size, config.gradient_scaling
            )

            if config.optimizer == "adam":
                proposal = adam_step(state, price, g, config.learning_rate)
            else:
                proposal = scaled_sgd_step(state, price, g, config.learning_rate)
            price = project_price(proposal, box)

            solutions = solve_all(price, k)
            schedules = [
                sol.p_star.reshape(des.shape) for sol, des in zip(solutions, desired)
            ]
            z = coordinator_objective(schedules, target, weights, desired)
            trace.append(
                IterationRecord(
                    k=k,
                    objective=z,
                    gradient_norm=float(np.linalg.norm(g)),
                    batch=tuple(int(i) for i in batch),
                    skipped=tuple(skipped),
                    wall_ms=1e3 * (time.perf_counter() - t_iter),
                )
            )

            if _improvement_ratio(z, z_prev) <= config.epsilon:
                stop_reason = "converged"
                break
            z_prev = z
            if (
                time_budget_s is not None
                and time.perf_counter() - t_start > time_budget_s
            ):
                stop_reason = "time_budget"
                break

        return RunResult(
            final_price=price,
            initial_price=initial_price,
            initial_objective=initial_objective,
            trace=trace,
            stop_reason=stop_reason,
        )
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
