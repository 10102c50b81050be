"""Pure numpy/scipy reference implementation of the ADMM inner loop.

Mirrors the compiled kernel operation for operation; used when the
extension is unavailable or ``LOADSTEER_PURE_PYTHON`` is set.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve


def admm_run(
    gp, gi, gx, gtp, gti, gtx, lfac, h, q, c2,
    sigma, rho, alpha, x, z, y,
    max_iter, check_every, eps_abs, eps_rel,
):
    """Run up to ``max_iter`` splitting iterations in place on (x, z, y).

    ``lfac`` is the lower Cholesky factor of ``diag(c2) + sigma I + rho G^T G``.
    Returns ``(iterations, r_prim, r_dual, converged)`` with residuals from
    the last convergence check (inf if never checked).
    """
    n = q.shape[0]
    m = h.shape[0]
    G = sp.csr_matrix((gx, gi, gp), shape=(m, n))
    GT = sp.csr_matrix((gtx, gti, gtp), shape=(n, m))

    r_prim = np.inf
    r_dual = np.inf
    done = 0
    for it in range(1, max_iter + 1):
        rhs = sigma * x - q + GT @ (rho * z - y)
        xt = cho_solve((lfac, True), rhs, overwrite_b=True)
        v = G @ xt
        x *= 1.0 - alpha
        x += alpha * xt
        w = alpha * v + (1.0 - alpha) * z + y / rho
        np.minimum(w, h, out=z)
        y[:] = rho * (w - z)
        done = it
        if it % check_every == 0 or it == max_iter:
            gx_vec = G @ x
            hty = GT @ y
            r_prim = np.max(np.abs(gx_vec - z)) if m else 0.0
            r_dual = np.max(np.abs(c2 * x + q + hty))
            eps_pri = eps_abs + eps_rel * max(
                np.max(np.abs(gx_vec)) if m else 0.0, np.max(np.abs(z)) if m else 0.0
            )
            eps_dua = eps_abs + eps_rel * max(
                np.max(np.abs(c2 * x)), np.max(np.abs(q)),
                np.max(np.abs(hty)) if m else 0.0,
            )
            if r_prim <= eps_pri and r_dual <= eps_dua:
                return done, r_prim, r_dual, True
    return done, r_prim, r_dual, False
