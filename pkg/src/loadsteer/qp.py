"""Per-home schedule optimization under an announced price vector.

Each home minimizes a strictly convex quadratic

    f(p) = sum_jt p_j(t) price(t) + sum_jt c_j (p_j(t) - pbar_j(t))^2

over its constraint polyhedron ``G p <= h``.  The solver is an
operator-splitting (ADMM) iteration on the slack reformulation with a
direct "polish" step that solves the KKT system on the detected active
set, recovering residuals near machine precision.  The splitting runs in
a compiled kernel when available (:mod:`loadsteer._kernel`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from . import _kernel
from .appliances import ConstraintPolyhedron

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Numerical breakdown inside the QP solver (NaN iterates, bad factor)."""


@dataclass
class QpSettings:
    """Tolerances and splitting parameters; defaults suit the home QPs."""

    tol: float = 1e-8            # target for the polished KKT residuals
    eps_admm: float = 1e-5       # abs/rel stopping tolerance of the splitting
    max_iter: int = 20000
    rho_init: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6           # over-relaxation
    check_every: int = 25
    rho_adapt_every: int = 50
    rho_min: float = 1e-6
    rho_max: float = 1e6
    polish: bool = True


@dataclass
class KktResiduals:
    """Inf-norm optimality measures of a primal/dual pair."""

    stationarity: float
    primal: float
    complementarity: float
    dual_min: float              # most negative multiplier (>= 0 when clean)

    def within(self, tol: float) -> bool:
        return (
            self.stationarity <= tol
            and self.primal <= tol
            and self.complementarity <= tol
            and self.dual_min >= -tol
        )


@dataclass
class PrimalDualSolution:
    p_star: np.ndarray
    lambda_star: np.ndarray
    objective_value: float
    residuals: KktResiduals
    status: str                  # "optimal" | "max_iter" | "infeasible"
    iterations: int = 0


def home_objective(schedule, price, weights, desired) -> float:
    """Electricity cost plus comfort penalty of one home's schedule."""
    price = np.asarray(price, dtype=float)
    k = price.shape[0]
    p = np.asarray(schedule, dtype=float).reshape(-1, k)
    pbar = np.asarray(desired, dtype=float).reshape(-1, k)
    c = np.asarray(weights, dtype=float)
    cost = float(p.sum(axis=0) @ price)
    comfort = float(np.sum(c[:, None] * (p - pbar) ** 2))
    return cost + comfort


def _residual_norms(p, lam, G, h, c2, q_int) -> KktResiduals:
    grad = c2 * p + q_int + G.T @ lam
    slack = G @ p - h
    return KktResiduals(
        stationarity=float(np.max(np.abs(grad))) if grad.size else 0.0,
        primal=float(np.max(np.maximum(slack, 0.0))) if slack.size else 0.0,
        complementarity=float(np.max(np.abs(lam * slack))) if slack.size else 0.0,
        dual_min=float(np.min(lam)) if lam.size else 0.0,
    )


def kkt_residuals(solution: PrimalDualSolution, polyhedron, weights, desired, price) -> KktResiduals:
    """Recompute the optimality measures of a solution from scratch."""
    price = np.asarray(price, dtype=float)
    c = np.asarray(weights, dtype=float)
    c_vec = np.repeat(c, price.shape[0])
    c2 = 2.0 * c_vec
    pbar = np.asarray(desired, dtype=float).ravel()
    lin = np.tile(price, c.shape[0])
    q_int = lin - c2 * pbar
    G = polyhedron.matrix if sp.issparse(polyhedron.matrix) else sp.csr_matrix(polyhedron.matrix)
    return _residual_norms(solution.p_star, solution.lambda_star, G, polyhedron.rhs, c2, q_int)


# ---------------------------------------------------------------------------
# direct active-set polish
# ---------------------------------------------------------------------------

_POLISH_DELTA = 1e-9
_POLISH_REFINE = 3


def _polish(G, GT, h, q_int, c2, y, tol):
    """Solve the KKT system on the active set guessed from the duals.

    Rows with negative recovered multipliers are dropped and rows found
    violated are added, for a few passes.  Returns ``(p, lam)`` or ``None``.
    """
    n = q_int.shape[0]
    act = np.flatnonzero(y > 0.0)
    if act.size > 2 * n:
        order = np.argsort(y[act])[::-1]
        act = np.sort(act[order[: 2 * n]])
    for _ in range(12):
        if act.size == 0:
            p = -q_int / c2
            lam = np.zeros(h.shape[0])
        else:
            A = G[act]
            ha = h[act]
            d = c2 + _POLISH_DELTA
            K = (A.multiply(1.0 / d) @ A.T).toarray()
            K[np.diag_indices_from(K)] += _POLISH_DELTA

            try:
                kf = cho_factor(K, lower=True)
            except np.linalg.LinAlgError:
                return None

            def sub_solve(r1, r2):
                la = cho_solve(kf, A @ (r1 / d) - r2)
                return (r1 - A.T @ la) / d, la

            p, la = sub_solve(-q_int, ha)
            for _ in range(_POLISH_REFINE):
                r1 = -q_int - (c2 * p + A.T @ la)
                r2 = ha - A @ p
                dp, dla = sub_solve(r1, r2)
                p += dp
                la += dla
            lam = np.zeros(h.shape[0])
            lam[act] = la

        neg = lam[act] < -tol if act.size else np.zeros(0, dtype=bool)
        slack = h - G @ p
        violated = np.flatnonzero(slack < -tol)
        violated = np.setdiff1d(violated, act, assume_unique=False)
        if not neg.any() and violated.size == 0:
            np.maximum(lam, 0.0, out=lam)
            return p, lam
        keep = act[~neg] if act.size else act
        act = np.union1d(keep, violated)
    return None


# ---------------------------------------------------------------------------
# solver core
# ---------------------------------------------------------------------------


class _Workspace:
    """CSR views, row scaling, factor cache and warm state for one QP.

    Constraint rows are equilibrated to unit max-norm before the splitting
    (their norms span orders of magnitude: plain bounds vs cumulative state
    rows); primal iterates are unaffected and true multipliers are
    recovered as ``row_scale * y_scaled``.
    """

    def __init__(self, G: sp.csr_matrix, h: np.ndarray, c2: np.ndarray, settings: QpSettings):
        G0 = G.tocsr().astype(np.float64)
        G0.sort_indices()
        self.G0 = G0
        self.h0 = np.asarray(h, dtype=float)
        self.m = G0.shape[0]
        self.n = G0.shape[1]

        row_max = np.zeros(self.m)
        if G0.nnz:
            absG = abs(G0)
            row_max = np.asarray(absG.max(axis=1).todense()).ravel()
        self.row_scale = 1.0 / np.where(row_max > 0.0, row_max, 1.0)
        D = sp.diags(self.row_scale)
        self.G = (D @ G0).tocsr()
        self.G.sort_indices()
        self.GT = self.G.T.tocsr()
        self.GT.sort_indices()
        for mat in (self.G, self.GT):
            if mat.indptr.dtype != np.int32:
                mat.indptr = mat.indptr.astype(np.int32)
                mat.indices = mat.indices.astype(np.int32)
            if mat.data.dtype != np.float64:
                mat.data = mat.data.astype(np.float64)
        self.h = self.row_scale * self.h0
        self.GT0 = G0.T.tocsr()
        self.c2 = np.asarray(c2, dtype=float)
        self.settings = settings
        self._gtg = None
        self._rho = None
        self._lfac = None
        self.x = np.zeros(self.n)
        self.z = np.minimum(0.0, self.h)
        self.y = np.zeros(self.m)

    def factor(self, rho: float) -> np.ndarray:
        if self._rho == rho and self._lfac is not None:
            return self._lfac
        if self._gtg is None:
            self._gtg = (self.GT @ self.G).toarray()
        mat = rho * self._gtg
        mat[np.diag_indices_from(mat)] += self.c2 + self.settings.sigma
        try:
            lfac = np.linalg.cholesky(mat)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"normal matrix not positive definite (rho={rho})") from exc
        self._lfac = np.asfortranarray(lfac)
        self._rho = rho
        return self._lfac


def _infeasibility_certificate(G, GT, h, dy) -> bool:
    nrm = np.max(np.abs(dy)) if dy.size else 0.0
    if nrm <= 0.0:
        return False
    ray = dy / nrm
    if np.max(np.abs(GT @ ray)) > 1e-8:
        return False
    return float(h @ ray) < -1e-8


def _run(ws: _Workspace, q_int: np.ndarray, settings: QpSettings):
    """Drive the splitting kernel in chunks with rho adaptation, then polish."""
    rho = ws._rho if ws._rho is not None else settings.rho_init
    lfac = ws.factor(rho)
    eps = settings.eps_admm
    left = settings.max_iter
    total = 0
    G, GT, h, c2 = ws.G, ws.GT, ws.h, ws.c2
    G0, GT0, h0 = ws.G0, ws.GT0, ws.h0
    x, z, y = ws.x, ws.z, ws.y
    csr = (G.indptr, G.indices, G.data, GT.indptr, GT.indices, GT.data)

    best = None
    while left > 0:
        chunk = min(settings.rho_adapt_every, left)
        y_before = y.copy()
        it, rp, rd, conv = _kernel.admm_run(
            *csr, lfac, h, q_int, c2,
            settings.sigma, rho, settings.alpha, x, z, y,
            chunk, min(settings.check_every, chunk), eps, eps,
        )
        total += it
        left -= it
        if not np.isfinite(x).all():
            raise SolverError("splitting iterates diverged (NaN/inf)")
        if conv:
            if settings.polish:
                pol = _polish(G0, GT0, h0, q_int, c2, y, tol=1e-9)
                if pol is not None:
                    p, lam = pol
                    res = _residual_norms(p, lam, G0, h0, c2, q_int)
                    if res.within(settings.tol):
                        return p, lam, res, "optimal", total
                    if best is None or res.stationarity < best[2].stationarity:
                        best = (p, lam, res)
            else:
                lam = np.maximum(ws.row_scale * y, 0.0)
                res = _residual_norms(x, lam, G0, h0, c2, q_int)
                if res.within(max(settings.tol, eps * 10)):
                    return x.copy(), lam, res, "optimal", total
            if eps <= 1e-12:
                break
            eps *= 1e-2
            continue
        dy = y - y_before
        if _infeasibility_certificate(G, GT, h, dy):
            lam = np.maximum(ws.row_scale * y, 0.0)
            res = _residual_norms(x, lam, G0, h0, c2, q_int)
            return x.copy(), lam, res, "infeasible", total
        gx = G @ x
        hty = GT @ y
        sp_scale = max(np.max(np.abs(gx)), np.max(np.abs(z)), 1e-12)
        sd_scale = max(np.max(np.abs(c2 * x)), np.max(np.abs(q_int)), np.max(np.abs(hty)), 1e-12)
        ratio = np.sqrt((rp / sp_scale) / max(rd / sd_scale, 1e-16))
        rho_new = float(np.clip(rho * ratio, settings.rho_min, settings.rho_max))
        if rho_new / rho > 5.0 or rho / rho_new > 5.0:
            rho = rho_new
            lfac = ws.factor(rho)

    # out of iterations (or polish kept failing): report the best pair seen
    lam = np.maximum(ws.row_scale * y, 0.0)
    res = _residual_norms(x, lam, G0, h0, c2, q_int)
    cand = (x.copy(), lam, res)
    if best is not None and best[2].stationarity < res.stationarity:
        cand = best
    p, lam, res = cand
    status = "optimal" if res.within(settings.tol) else "max_iter"
    if status == "max_iter":
        log.warning("splitting hit the iteration cap: residuals %s", res)
    return p, lam, res, status, total


def solve_qp(G, h, c, pbar, lin, settings: QpSettings | None = None, warm=None) -> PrimalDualSolution:
    """One-shot solve of ``min p.lin + sum c_v (p_v - pbar_v)^2  s.t.  G p <= h``.

    ``c`` is a per-variable weight vector here (the home-level wrapper
    expands per-appliance weights).
    """
    settings = settings or QpSettings()
    G = G if sp.issparse(G) else sp.csr_matrix(np.atleast_2d(np.asarray(G, dtype=float)))
    h = np.asarray(h, dtype=float)
    c = np.asarray(c, dtype=float)
    pbar = np.asarray(pbar, dtype=float)
    lin = np.asarray(lin, dtype=float)
    if np.any(c <= 0.0):
        raise ValueError("comfort weights must be strictly positive")
    c2 = 2.0 * c
    ws = _Workspace(G, h, c2, settings)
    if warm is not None:
        ws.x = np.array(warm, dtype=float)
        ws.z = np.minimum(ws.G @ ws.x, ws.h)
    q_int = lin - c2 * pbar
    p, lam, res, status, iters = _run(ws, q_int, settings)
    obj = float(p @ lin + np.sum(c * (p - pbar) ** 2))
    return PrimalDualSolution(p, lam, obj, res, status, iters)


class HomeQpSolver:
    """Repeated solves of one home's QP across changing prices.

    Owns the cached normal-matrix factor and warm-start state, so a
    coordinator run pays one factorization per home (plus refactors on
    rho adaptation) and each new price warm-starts from the last solve.
    """

    def __init__(
        self,
        polyhedron: ConstraintPolyhedron,
        weights,
        desired,
        settings: QpSettings | None = None,
    ):
        self.polyhedron = polyhedron
        self.settings = settings or QpSettings()
        self.weights = np.asarray(weights, dtype=float)
        if np.any(self.weights <= 0.0):
            raise ValueError("comfort weights must be strictly positive")
        self.n_slots = polyhedron.n_slots
        self.n_appliances = len(polyhedron.appliances)
        self.desired = np.asarray(desired, dtype=float).reshape(self.n_appliances, self.n_slots)
        self.pbar = self.desired.ravel()
        c_vec = np.repeat(self.weights, self.n_slots)
        self.c2 = 2.0 * c_vec
        self.c_vec = c_vec
        self._ws = _Workspace(polyhedron.matrix, polyhedron.rhs, self.c2, self.settings)

    def solve(self, price: np.ndarray) -> PrimalDualSolution:
        price = np.asarray(price, dtype=float)
        if price.shape[0] != self.n_slots:
            raise ValueError("price length must equal the horizon")
        lin = np.tile(price, self.n_appliances)
        q_int = lin - self.c2 * self.pbar
        p, lam, res, status, iters = _run(self._ws, q_int, self.settings)
        obj = float(p @ lin + np.sum(self.c_vec * (p - self.pbar) ** 2))
        return PrimalDualSolution(p, lam, obj, res, status, iters)


def solve_home_qp(
    polyhedron: ConstraintPolyhedron,
    weights,
    desired,
    price,
    settings: QpSettings | None = None,
) -> PrimalDualSolution:
    """Solve one home's schedule QP for a given price vector."""
    return HomeQpSolver(polyhedron, weights, desired, settings).solve(price)
