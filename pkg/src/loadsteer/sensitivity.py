"""Differentiating optimal home schedules with respect to the price.

At a solved home QP the KKT conditions pin the optimal schedule; perturbing
the price and keeping the strongly active rows tight gives the linear system

    [ H   Ga^T ] [ dp  ]   [ -dq/dprice ]
    [ Ga  0    ] [ dla ] = [ 0          ]

with ``H = 2 diag(c)`` and ``Ga`` the active rows.  ``dq/dprice`` is the
selector that links variable (appliance j, slot t) to price slot t, so the
solve yields the full Jacobian dp*/dprice in one factorization.  Weakly
active rows (tiny slack, tiny multiplier) are the nondifferentiable edge:
they are dropped and the caller is expected to treat the result as a
one-sided derivative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve

from .appliances import ConstraintPolyhedron
from .qp import PrimalDualSolution

log = logging.getLogger(__name__)

DEFAULT_ACTIVE_TOL = 1e-6
DEFAULT_TIKHONOV = 1e-10


class SingularSystemError(RuntimeError):
    """The reduced KKT system stayed rank-deficient after regularization."""

    def __init__(self, message: str, active_labels: list[str] | None = None):
        super().__init__(message)
        self.active_labels = active_labels or []


@dataclass
class ActiveSetInfo:
    """Classification of constraint rows at a solved QP."""

    active: np.ndarray            # rows with slack <= tol
    strongly_active: np.ndarray   # active rows with multiplier > tol
    weakly_active: np.ndarray     # active rows on the nondifferentiable edge
    tol: float

    @property
    def is_clean(self) -> bool:
        """True when no row sits on the nondifferentiable edge."""
        return self.weakly_active.size == 0


def _negation_pairs(G: sp.csr_matrix, h: np.ndarray, rows: np.ndarray):
    """Pairs (i, j) among ``rows`` that are exact negations of each other."""
    G = G.tocsr()
    seen: dict[tuple, list[int]] = {}
    pairs = []
    for r in rows.tolist():
        sl = slice(G.indptr[r], G.indptr[r + 1])
        key = (tuple(G.indices[sl].tolist()), tuple(np.abs(G.data[sl]).tolist()))
        for other in seen.get(key, []):
            slo = slice(G.indptr[other], G.indptr[other + 1])
            if np.array_equal(G.data[sl], -G.data[slo]) and abs(h[r] + h[other]) <= 1e-12:
                pairs.append((other, r))
        seen.setdefault(key, []).append(r)
    return pairs


def active_set(
    solution: PrimalDualSolution,
    polyhedron: ConstraintPolyhedron,
    tol: float = DEFAULT_ACTIVE_TOL,
) -> ActiveSetInfo:
    """Split rows into strongly / weakly active at the given solution.

    A zero multiplier on an active row normally marks the
    nondifferentiable edge, but two structural cases are exempt because
    they come from writing equalities as inequality pairs, not from
    genuine degeneracy: rows pinning one variable from both sides (the
    variable is eliminated from the sensitivity system anyway), and
    either side of an exact equality pair whose *net* multiplier is
    decisive (the strong side carries the equality in the tangent
    space).
    """
    G = polyhedron.matrix.tocsr()
    slack = polyhedron.rhs - G @ solution.p_star
    lam_all = solution.lambda_star
    act = np.flatnonzero(slack <= tol)
    lam = lam_all[act]
    strong = act[lam > tol]
    weak = set(act[lam <= tol].tolist())
    if weak:
        counts = np.diff(G.indptr)
        for i, j in _negation_pairs(G, polyhedron.rhs, act):
            pin = counts[i] == 1
            decided = abs(lam_all[i] - lam_all[j]) > tol
            if pin or decided:
                weak.discard(i)
                weak.discard(j)
    weak_arr = np.array(sorted(weak), dtype=int)
    return ActiveSetInfo(active=act, strongly_active=strong, weakly_active=weak_arr, tol=tol)


def _pinned_variables(Ga: sp.csr_matrix) -> np.ndarray:
    """Variables held by active single-entry rows of both signs.

    Such a variable cannot move in any feasible direction, so its Jacobian
    row is identically zero and it is eliminated before the solve (keeping
    both rows would make the saddle system structurally singular).
    """
    Ga = Ga.tocsr()
    counts = np.diff(Ga.indptr)
    single = np.flatnonzero(counts == 1)
    if single.size == 0:
        return np.zeros(0, dtype=int)
    cols = Ga.indices[Ga.indptr[single]]
    vals = Ga.data[Ga.indptr[single]]
    up = set(cols[vals > 0].tolist())
    lo = set(cols[vals < 0].tolist())
    return np.array(sorted(up & lo), dtype=int)


def price_jacobian(
    solution: PrimalDualSolution,
    polyhedron: ConstraintPolyhedron,
    weights,
    tol: float = DEFAULT_ACTIVE_TOL,
    tikhonov: float = DEFAULT_TIKHONOV,
) -> np.ndarray:
    """Jacobian of the optimal stacked schedule w.r.t. the price vector.

    Returns an ``(M*K, K)`` array.  Raises :class:`SingularSystemError` when
    the regularized reduced system cannot be factored reliably.
    """
    k = polyhedron.n_slots
    m_app = len(polyhedron.appliances)
    n = m_app * k
    weights = np.asarray(weights, dtype=float)
    h_diag = 2.0 * np.repeat(weights, k)

    info = active_set(solution, polyhedron, tol)
    act = info.strongly_active
    Ga_full = polyhedron.matrix[act] if act.size else sp.csr_matrix((0, n))

    pinned = _pinned_variables(Ga_full)
    keep = np.setdiff1d(np.arange(n), pinned, assume_unique=True)
    if act.size:
        Ga_kept = Ga_full[:, keep]
        nonzero_rows = np.flatnonzero(np.diff(Ga_kept.tocsr().indptr) > 0)
        Ga_red = Ga_kept[nonzero_rows].toarray()
    else:
        Ga_red = np.zeros((0, keep.size))
    na = Ga_red.shape[0]
    nk = keep.size

    # right-hand side: the price enters each variable's gradient through its
    # own slot, so -d(grad)/d(price) restricted to kept variables
    rhs_top = np.zeros((nk, k))
    rhs_top[np.arange(nk), keep % k] = -1.0

    saddle = np.zeros((nk + na, nk + na))
    saddle[np.arange(nk), np.arange(nk)] = h_diag[keep]
    if na:
        saddle[:nk, nk:] = Ga_red.T
        saddle[nk:, :nk] = Ga_red
        saddle[nk + np.arange(na), nk + np.arange(na)] = -tikhonov

    try:
        lu, piv = lu_factor(saddle)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "reduced KKT system could not be factored",
            [polyhedron.labels[r] for r in act],
        ) from exc
    udiag = np.abs(np.diag(lu))
    if udiag.size and np.min(udiag) <= 1e-12 * max(np.max(udiag), 1.0):
        raise SingularSystemError(
            "reduced KKT system is rank deficient after regularization",
            [polyhedron.labels[r] for r in act],
        )

    rhs = np.zeros((nk + na, k))
    rhs[:nk] = rhs_top
    sol = lu_solve((lu, piv), rhs)
    jac = np.zeros((n, k))
    jac[keep] = sol[:nk]
    return jac


def home_gradient_contribution(
    solution: PrimalDualSolution, jacobian: np.ndarray, fp_home: np.ndarray
) -> np.ndarray:
    """One home's term of the price gradient: (dp*/dprice)^T fp."""
    fp_home = np.asarray(fp_home, dtype=float).ravel()
    if fp_home.shape[0] != jacobian.shape[0]:
        raise ValueError("partial-derivative vector does not match the Jacobian")
    return jacobian.T @ fp_home
