# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Sinkhorn kernel; mirrors ``_kernels_py.sinkhorn_scaling``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, INFINITY
from libc.float cimport DBL_MIN
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()

cdef double ABSORB_LOG = 30.0


cdef void _row_half_step(const double[:, ::1] C, const double[::1] log_mu, const double[::1] g,
                         double[::1] f, double inv, double eps) noexcept nogil:
    cdef Py_ssize_t m = C.shape[0], n = C.shape[1], i, j
    cdef double mx, s, a
    for i in range(m):
        mx = -INFINITY
        for j in range(n):
            a = (g[j] - C[i, j]) * inv
            if a > mx:
                mx = a
        s = 0.0
        for j in range(n):
            s += exp((g[j] - C[i, j]) * inv - mx)
        f[i] = eps * (log_mu[i] - mx - log(s))


cdef void _col_half_step(const double[:, ::1] C, const double[::1] log_nu, const double[::1] f,
                         double[::1] g, double[::1] mx, double[::1] s,
                         double inv, double eps) noexcept nogil:
    cdef Py_ssize_t m = C.shape[0], n = C.shape[1], i, j
    cdef double a
    for j in range(n):
        mx[j] = -INFINITY
        s[j] = 0.0
    for i in range(m):
        for j in range(n):
            a = (f[i] - C[i, j]) * inv
            if a > mx[j]:
                mx[j] = a
    for i in range(m):
        for j in range(n):
            s[j] += exp((f[i] - C[i, j]) * inv - mx[j])
    for j in range(n):
        g[j] = eps * (log_nu[j] - mx[j] - log(s[j]))


cdef double _fill_kernel(const double[:, ::1] C, const double[::1] f, const double[::1] g,
                         double[:, ::1] K, double inv) noexcept nogil:
    """Fill ``K`` and return the largest exponent seen."""
    cdef Py_ssize_t m = C.shape[0], n = C.shape[1], i, j
    cdef double a, x, top = -INFINITY
    for i in range(m):
        for j in range(n):
            a = (f[i] + g[j] - C[i, j]) * inv
            if a > top:
                top = a
            x = exp(a)
            # subnormals make every later matvec several times slower
            K[i, j] = x if x >= DBL_MIN else 0.0
    return top


cdef void _restart(const double[:, ::1] C, const double[::1] log_mu, const double[::1] log_nu,
                   double[::1] f, double[::1] g, double[::1] u, double[::1] v, double[:, ::1] K,
                   double[::1] bufa, double[::1] bufb, double inv, double eps) noexcept nogil:
    """Absorb the scalings, take exact log-domain half-steps and refill ``K``."""
    cdef Py_ssize_t i, j
    for i in range(f.shape[0]):
        f[i] += eps * log(u[i])
        u[i] = 1.0
    for j in range(g.shape[0]):
        g[j] += eps * log(v[j])
        v[j] = 1.0
    _row_half_step(C, log_mu, g, f, inv, eps)
    _col_half_step(C, log_nu, f, g, bufa, bufb, inv, eps)
    _fill_kernel(C, f, g, K, inv)


def sinkhorn_scaling(C_in, log_mu_in, log_nu_in, double eps, double tol, long max_iter,
                     f0, g0, bint trace=False):
    cdef double[:, ::1] C = np.ascontiguousarray(C_in, dtype=np.float64)
    cdef double[::1] log_mu = np.ascontiguousarray(log_mu_in, dtype=np.float64)
    cdef double[::1] log_nu = np.ascontiguousarray(log_nu_in, dtype=np.float64)
    cdef Py_ssize_t m = C.shape[0], n = C.shape[1], i, j
    f_arr = np.array(f0, dtype=np.float64)
    g_arr = np.array(g0, dtype=np.float64)
    K_arr = np.empty((m, n), dtype=np.float64)
    u_arr = np.ones(m, dtype=np.float64)
    v_arr = np.ones(n, dtype=np.float64)
    cdef double[::1] f = f_arr, g = g_arr, u = u_arr, v = v_arr
    cdef double[:, ::1] K = K_arr
    cdef double[::1] mu = np.exp(np.asarray(log_mu))
    cdef double[::1] nu = np.exp(np.asarray(log_nu))
    cdef double[::1] Kv = np.empty(m), KTu = np.empty(n)
    cdef double[::1] bufa = np.empty(n), bufb = np.empty(n)
    cdef double inv = 1.0 / eps
    cdef double err = INFINITY, d, acc, big, cost
    cdef int bm = <int>m, bn = <int>n, one = 1
    cdef double alpha = 1.0, beta = 0.0
    cdef char trans_t = b'T', trans_n = b'N'
    cdef long it = 0
    cdef bint degenerate, cols_exact = False
    costs = []

    with nogil:
        # a warm start is used as is unless its kernel would overflow
        if _fill_kernel(C, f, g, K, inv) > ABSORB_LOG:
            _restart(C, log_mu, log_nu, f, g, u, v, K, bufa, bufb, inv, eps)
            cols_exact = True
    while True:
        with nogil:
            err = 0.0
            degenerate = False
            # row-major K is column-major K^T for BLAS: Kv = (K^T)^T v
            dgemv(&trans_t, &bn, &bm, &alpha, &K[0, 0], &bn, &v[0], &one, &beta, &Kv[0], &one)
            for i in range(m):
                acc = Kv[i]
                if acc <= 0.0:
                    degenerate = True
                d = fabs(u[i] * acc - mu[i])
                if d > err:
                    err = d
        # the row error only measures convergence once the columns are exact
        if (err < tol and cols_exact) or it >= max_iter:
            break
        with nogil:
            if not degenerate:
                for i in range(m):
                    u[i] = mu[i] / Kv[i]
                dgemv(&trans_n, &bn, &bm, &alpha, &K[0, 0], &bn, &u[0], &one, &beta, &KTu[0], &one)
                for j in range(n):
                    if KTu[j] <= 0.0:
                        degenerate = True
            if degenerate:
                _restart(C, log_mu, log_nu, f, g, u, v, K, bufa, bufb, inv, eps)
            else:
                big = 0.0
                for j in range(n):
                    v[j] = nu[j] / KTu[j]
                    d = fabs(log(v[j]))
                    if d > big:
                        big = d
                for i in range(m):
                    d = fabs(log(u[i]))
                    if d > big:
                        big = d
                if trace:
                    cost = 0.0
                    for i in range(m):
                        acc = 0.0
                        for j in range(n):
                            acc += K[i, j] * C[i, j] * v[j]
                        cost += u[i] * acc
                if big > ABSORB_LOG:
                    for i in range(m):
                        f[i] += eps * log(u[i])
                        u[i] = 1.0
                    for j in range(n):
                        g[j] += eps * log(v[j])
                        v[j] = 1.0
                    _fill_kernel(C, f, g, K, inv)
        it += 1
        cols_exact = True
        if trace and not degenerate:
            costs.append(cost)

    with nogil:
        for i in range(m):
            for j in range(n):
                K[i, j] = u[i] * K[i, j] * v[j]
        for i in range(m):
            f[i] += eps * log(u[i])
        for j in range(n):
            g[j] += eps * log(v[j])
    return K_arr, f_arr, g_arr, it, err, np.array(costs)
