# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ADMM inner loop; mirrors fallback.py operation for operation.

The hot path is two CSR mat-vecs and two triangular solves per iteration,
all done without the GIL so coordinator worker threads overlap.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs
from scipy.linalg.cython_blas cimport dtrsv

cnp.import_array()


cdef void _spmv(const int[::1] indptr, const int[::1] indices, const double[::1] data,
                const double[::1] v, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, jj
    cdef double acc
    for i in range(out.shape[0]):
        acc = 0.0
        for jj in range(indptr[i], indptr[i + 1]):
            acc += data[jj] * v[indices[jj]]
        out[i] = acc


def admm_run(const int[::1] gp, const int[::1] gi, const double[::1] gx,
             const int[::1] gtp, const int[::1] gti, const double[::1] gtx,
             const double[::1, :] lfac,
             const double[::1] h, const double[::1] q, const double[::1] c2,
             double sigma, double rho, double alpha,
             double[::1] x, double[::1] z, double[::1] y,
             int max_iter, int check_every, double eps_abs, double eps_rel):
    """Run up to ``max_iter`` splitting iterations in place on (x, z, y)."""
    cdef int n = <int> q.shape[0]
    cdef int m = <int> h.shape[0]
    cdef int one = 1
    cdef char lo = b'L'
    cdef char no = b'N'
    cdef char tr = b'T'
    cdef double beta = 1.0 - alpha

    xt_arr = np.empty(n)
    v_arr = np.empty(m)
    tn_arr = np.empty(n)
    cdef double[::1] xt = xt_arr
    cdef double[::1] v = v_arr
    cdef double[::1] tn = tn_arr

    cdef double r_prim = np.inf
    cdef double r_dual = np.inf
    cdef double eps_pri, eps_dua, w, zr, acc, ngx, nz, ndx, nq, nty, d
    cdef Py_ssize_t i, r
    cdef int it = 0
    cdef bint converged = False

    with nogil:
        for it in range(1, max_iter + 1):
            # rhs = sigma*x - q + GT @ (rho*z - y), reusing v for rho*z - y
            for r in range(m):
                v[r] = rho * z[r] - y[r]
            _spmv(gtp, gti, gtx, v, xt)
            for i in range(n):
                xt[i] += sigma * x[i] - q[i]
            dtrsv(&lo, &no, &no, &n, &lfac[0, 0], &n, &xt[0], &one)
            dtrsv(&lo, &tr, &no, &n, &lfac[0, 0], &n, &xt[0], &one)
            _spmv(gp, gi, gx, xt, v)
            for i in range(n):
                x[i] = alpha * xt[i] + beta * x[i]
            for r in range(m):
                w = alpha * v[r] + beta * z[r] + y[r] / rho
                zr = w if w < h[r] else h[r]
                z[r] = zr
                y[r] = rho * (w - zr)

            if it % check_every == 0 or it == max_iter:
                _spmv(gp, gi, gx, x, v)      # v = G x
                _spmv(gtp, gti, gtx, y, tn)  # tn = GT y
                r_prim = 0.0
                ngx = 0.0
                nz = 0.0
                for r in range(m):
                    d = fabs(v[r] - z[r])
                    if d > r_prim:
                        r_prim = d
                    d = fabs(v[r])
                    if d > ngx:
                        ngx = d
                    d = fabs(z[r])
                    if d > nz:
                        nz = d
                r_dual = 0.0
                ndx = 0.0
                nq = 0.0
                nty = 0.0
                for i in range(n):
                    acc = c2[i] * x[i]
                    d = fabs(acc + q[i] + tn[i])
                    if d > r_dual:
                        r_dual = d
                    if fabs(acc) > ndx:
                        ndx = fabs(acc)
                    if fabs(q[i]) > nq:
                        nq = fabs(q[i])
                    if fabs(tn[i]) > nty:
                        nty = fabs(tn[i])
                eps_pri = eps_abs + eps_rel * (ngx if ngx > nz else nz)
                eps_dua = ndx
                if nq > eps_dua:
                    eps_dua = nq
                if nty > eps_dua:
                    eps_dua = nty
                eps_dua = eps_abs + eps_rel * eps_dua
                if r_prim <= eps_pri and r_dual <= eps_dua:
                    converged = True
                    break

    return it, r_prim, r_dual, converged
