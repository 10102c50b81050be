"""Independent verification machinery for the coordination stack.

Everything here is deliberately built from primitive ingredients only —
finite differences of the full pipeline, closed forms, exhaustive
enumeration, and a classical dense active-set solver — so each oracle
can vouch for a module without depending on it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .coordinator import coordinator_objective, estimate_gradient
from .qp import HomeQpSolver, QpSettings
from .scenario import Scenario
from .sensitivity import home_gradient_contribution, price_jacobian


@dataclass
class FdConfig:
    """Central-difference settings for the pipeline gradient."""

    step: float = 1e-5

    def __post_init__(self):
        if self.step <= 0.0:
            raise ValueError("finite-difference step must be positive")


def _pipeline_objective(solvers, scenario: Scenario, price: np.ndarray) -> float:
    desired = [h.desired for h in scenario.homes]
    schedules = [
        s.solve(price).p_star.reshape(d.shape) for s, d in zip(solvers, desired)
    ]
    weights = [h.weights for h in scenario.homes]
    return coordinator_objective(schedules, scenario.target, weights, desired)


def finite_difference_gradient(
    scenario: Scenario,
    price: np.ndarray,
    fd: FdConfig | None = None,
    qp_settings: QpSettings | None = None,
    slots=None,
) -> np.ndarray:
    """Central differences of the full pipeline objective in each slot price.

    Every probe re-solves all homes from scratch state at the perturbed
    price, so this uses nothing from the sensitivity machinery it
    checks.  ``slots`` restricts the probed coordinates (default: all).
    """
    fd = fd or FdConfig()
    price = np.asarray(price, dtype=float)
    k = price.shape[0]
    lo, hi = scenario.config.price_low, scenario.config.price_high
    idx = range(k) if slots is None else list(slots)
    for t in idx:
        if price[t] - fd.step < lo or price[t] + fd.step > hi:
            raise ValueError(
                f"slot {t}: price +/- step leaves the box; shrink the step"
            )
    solvers = [
        HomeQpSolver(h.polyhedron, h.weights, h.desired, qp_settings)
        for h in scenario.homes
    ]
    grad = np.zeros(k)
    for t in idx:
        probe = price.copy()
        probe[t] = price[t] + fd.step
        z_plus = _pipeline_objective(solvers, scenario, probe)
        probe[t] = price[t] - fd.step
        z_minus = _pipeline_objective(solvers, scenario, probe)
        grad[t] = (z_plus - z_minus) / (2.0 * fd.step)
    return grad


def implicit_gradient(
    scenario: Scenario, price: np.ndarray, qp_settings: QpSettings | None = None
) -> np.ndarray:
    """Full-population price gradient via the sensitivity machinery.

    Convenience counterpart of :func:`finite_difference_gradient` used
    by the cross checks: solves every home at ``price`` and sums the
    per-home contributions exactly (no batching).
    """
    from .coordinator import coordinator_partial_fp

    price = np.asarray(price, dtype=float)
    desired = [h.desired for h in scenario.homes]
    weights = [h.weights for h in scenario.homes]
    solutions = [
        HomeQpSolver(h.polyhedron, h.weights, h.desired, qp_settings).solve(price)
        for h in scenario.homes
    ]
    schedules = [s.p_star.reshape(d.shape) for s, d in zip(solutions, desired)]
    fp = coordinator_partial_fp(schedules, scenario.target, weights, desired)
    offsets = np.concatenate([[0], np.cumsum([d.size for d in desired])])
    grad = np.zeros(price.shape[0])
    for i, (sol, home) in enumerate(zip(solutions, scenario.homes)):
        jac = price_jacobian(sol, home.polyhedron, home.weights)
        grad += home_gradient_contribution(sol, jac, fp[offsets[i] : offsets[i + 1]])
    return grad


def scalar_qp_closed_form(c: float, pbar: float, price: float, lo: float, hi: float):
    """Exact solution of the one-variable schedule problem.

    Minimizes ``p*price + c*(p - pbar)^2`` over ``lo <= p <= hi`` and
    returns ``(p_star, lambda_lo, lambda_hi)``.
    """
    if c <= 0.0:
        raise ValueError("curvature must be positive")
    if lo > hi:
        raise ValueError("empty interval")
    p = min(max(pbar - price / (2.0 * c), lo), hi)
    g = 2.0 * c * (p - pbar) + price
    return p, max(g, 0.0), max(-g, 0.0)


def brute_force_price_search(
    scenario: Scenario, grid_step: float, qp_settings: QpSettings | None = None
):
    """Exhaustive grid minimization of the pipeline objective over the box.

    Guarded to desk scale (K <= 3 and at most 1e6 grid points).  Ties
    keep the lexicographically smallest price vector, which the
    strict-improvement comparison below gives for free since the grid is
    walked in lexicographic order.
    """
    k = scenario.horizon
    if k > 3:
        raise ValueError("grid search is limited to horizons of at most 3 slots")
    lo, hi = scenario.config.price_low, scenario.config.price_high
    n_pts = int(round((hi - lo) / grid_step)) + 1
    axis = lo + grid_step * np.arange(n_pts)
    axis[-1] = min(axis[-1], hi)
    if n_pts**k > 10**6:
        raise ValueError("price grid exceeds 1e6 points")
    solvers = [
        HomeQpSolver(h.polyhedron, h.weights, h.desired, qp_settings)
        for h in scenario.homes
    ]
    best_price = None
    best_z = np.inf
    for combo in itertools.product(axis, repeat=k):
        price = np.array(combo)
        z = _pipeline_objective(solvers, scenario, price)
        if z < best_z:
            best_z = z
            best_price = price
    return best_price, best_z


def enumerate_batch_estimator(
    scenario: Scenario,
    price: np.ndarray,
    batch_size: int,
    qp_settings: QpSettings | None = None,
) -> np.ndarray:
    """Exact expectation of the unbiased mini-batch gradient estimator.

    Averages the estimator over every one of the C(N, B) equally likely
    batches; by linearity this must reproduce the full gradient to
    floating-point roundoff.
    """
    from .coordinator import coordinator_partial_fp

    n = scenario.n_homes
    n_combos = math.comb(n, batch_size)
    if n_combos > 10**4:
        raise ValueError("too many batches to enumerate (limit 1e4)")
    price = np.asarray(price, dtype=float)
    desired = [h.desired for h in scenario.homes]
    weights = [h.weights for h in scenario.homes]
    solutions = [
        HomeQpSolver(h.polyhedron, h.weights, h.desired, qp_settings).solve(price)
        for h in scenario.homes
    ]
    schedules = [s.p_star.reshape(d.shape) for s, d in zip(solutions, desired)]
    fp = coordinator_partial_fp(schedules, scenario.target, weights, desired)
    offsets = np.concatenate([[0], np.cumsum([d.size for d in desired])])
    contribs = np.array(
        [
            home_gradient_contribution(
                sol,
                price_jacobian(sol, home.polyhedron, home.weights),
                fp[offsets[i] : offsets[i + 1]],
            )
            for i, (sol, home) in enumerate(zip(solutions, scenario.homes))
        ]
    )
    total = np.zeros(price.shape[0])
    for batch in itertools.combinations(range(n), batch_size):
        total += estimate_gradient(contribs[list(batch)], n, batch_size, "unbiased")
    return total / n_combos


# ---------------------------------------------------------------------------
# dense primal active-set re-solver
# ---------------------------------------------------------------------------

_AS_TOL = 1e-10


def _feasible_start(G: np.ndarray, h: np.ndarray) -> np.ndarray:
    res = linprog(
        c=np.zeros(G.shape[1]),
        A_ub=G,
        b_ub=h,
        bounds=[(None, None)] * G.shape[1],
        method="highs",
    )
    if not res.success:
        raise ValueError("no feasible start found for the active-set re-solve")
    return np.asarray(res.x, dtype=float)


def dense_active_set_qp(G, h, c, pbar, lin, start=None, max_iter=500):
    """Classical primal active-set solve of the schedule QP, dense and tiny.

    Minimizes ``p.lin + sum c_v (p_v - pbar_v)^2`` subject to
    ``G p <= h`` by walking active sets and solving the equality-
    constrained subproblem directly; a feasible start is computed with
    an LP when not supplied.  Intended for instances of a dozen
    variables — an independent cross-check, not a production path.
    """
    G = np.asarray(
        G.toarray() if sp.issparse(G) else G, dtype=float
    )
    h = np.asarray(h, dtype=float)
    c = np.asarray(c, dtype=float)
    pbar = np.asarray(pbar, dtype=float)
    lin = np.asarray(lin, dtype=float)
    m, n = G.shape
    H = np.diag(2.0 * c)
    q = lin - 2.0 * c * pbar

    p = _feasible_start(G, h) if start is None else np.asarray(start, dtype=float)
    if np.any(G @ p - h > 1e-8):
        raise ValueError("supplied start is infeasible")
    work = list(np.flatnonzero(np.abs(G @ p - h) <= _AS_TOL * max(1.0, np.max(np.abs(h)))))

    for _ in range(max_iter):
        na = len(work)
        kkt = np.zeros((n + na, n + na))
        kkt[:n, :n] = H
        rhs = np.zeros(n + na)
        rhs[:n] = -q
        if na:
            A = G[work]
            kkt[:n, n:] = A.T
            kkt[n:, :n] = A
            rhs[n:] = h[work]
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        p_eq, nu = sol[:n], sol[n:]

        if np.max(np.abs(p_eq - p)) <= _AS_TOL:
            if na == 0 or np.min(nu) >= -_AS_TOL:
                lam = np.zeros(m)
                if na:
                    lam[work] = np.maximum(nu, 0.0)
                return p, lam
            work.pop(int(np.argmin(nu)))
            continue

        d = p_eq - p
        gd = G @ d
        blocking = [
            (float((h[r] - G[r] @ p) / gd[r]), r)
            for r in range(m)
            if r not in work and gd[r] > _AS_TOL
        ]
        alpha, block = min(blocking, default=(1.0, -1))
        if alpha >= 1.0:
            p = p_eq
        else:
            p = p + alpha * d
            work.append(block)
            work.sort()
    raise RuntimeError("active-set iteration limit reached")
