# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``.

Same call signatures and return values; results agree with the numpy
reference to round-off.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF SINGULAR = 1


def simulate_side(const long[:] order, const long[:] inj_col, const double[:] inj_flow,
                  const long[:] in_ptr, const long[:] in_pipe, const long[:] pipe_from,
                  const long[:] pipe_gamma, const double[:] pipe_c0, const double[:] pipe_c1,
                  const double[:] pipe_flow, const double[:] pipe_loss,
                  const double[:, :] injections, double init):
    cdef Py_ssize_t T = injections.shape[0]
    cdef Py_ssize_t n_nodes = order.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((T, n_nodes))
    cdef double[:, :] temps = out
    cdef Py_ssize_t t, a, q, j, n, up, s0, s1
    cdef double acc, total, x0, x1
    for t in range(T):
        for a in range(n_nodes):
            n = order[a]
            acc = 0.0
            total = 0.0
            if inj_col[n] >= 0:
                acc += inj_flow[n] * injections[t, inj_col[n]]
                total += inj_flow[n]
            for q in range(in_ptr[n], in_ptr[n + 1]):
                j = in_pipe[q]
                up = pipe_from[j]
                s0 = t - pipe_gamma[j]
                s1 = s0 - 1
                x0 = temps[s0, up] if s0 >= 0 else init
                x1 = temps[s1, up] if s1 >= 0 else init
                acc += pipe_flow[j] * (pipe_c0[j] * x0 + pipe_c1[j] * x1 + pipe_loss[j])
                total += pipe_flow[j]
            temps[t, n] = acc / total
    return out


cdef double _select(double* a, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    """k-th smallest by Hoare quickselect; afterwards a[:k] <= a[k] <= a[k+1:]."""
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j
    cdef double pivot, tmp
    while lo < hi:
        pivot = a[lo + (hi - lo) // 2]
        i = lo
        j = hi
        while i <= j:
            while a[i] < pivot:
                i += 1
            while a[j] > pivot:
                j -= 1
            if i <= j:
                tmp = a[i]
                a[i] = a[j]
                a[j] = tmp
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            break
    return a[k]


cdef double _median(double* buf, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t h = n // 2, i
    cdef double upper = _select(buf, n, h)
    cdef double lower
    if n % 2:
        return upper
    lower = buf[0]
    for i in range(1, h):
        if buf[i] > lower:
            lower = buf[i]
    return 0.5 * (lower + upper)


cdef double _mad(const double[:] r, double* buf, double factor, double floor) noexcept nogil:
    cdef Py_ssize_t n = r.shape[0]
    cdef Py_ssize_t i
    for i in range(n):
        buf[i] = r[i]
    cdef double m = _median(buf, n)
    for i in range(n):
        buf[i] = fabs(r[i] - m)
    cdef double s = factor * _median(buf, n)
    return s if s > floor else floor


cdef int _lu_solve(double* K, double* b, Py_ssize_t m) noexcept nogil:
    """Gaussian elimination with partial pivoting, in place; solution in b."""
    cdef Py_ssize_t i, k, col, piv
    cdef double best, v, f
    for col in range(m):
        piv = col
        best = fabs(K[col * m + col])
        for i in range(col + 1, m):
            v = fabs(K[i * m + col])
            if v > best:
                best = v
                piv = i
        if best == 0.0:
            return SINGULAR
        if piv != col:
            for k in range(m):
                v = K[col * m + k]
                K[col * m + k] = K[piv * m + k]
                K[piv * m + k] = v
            v = b[col]
            b[col] = b[piv]
            b[piv] = v
        for i in range(col + 1, m):
            f = K[i * m + col] / K[col * m + col]
            if f != 0.0:
                for k in range(col, m):
                    K[i * m + k] -= f * K[col * m + k]
                b[i] -= f * b[col]
    for i in range(m - 1, -1, -1):
        v = b[i]
        for k in range(i + 1, m):
            v -= K[i * m + k] * b[k]
        b[i] = v / K[i * m + i]
    return 0


cdef int _wls(const double[:, :] X, const double[:] y, const double[:] w,
              const double[:] c, bint use_constraint, bint ridge,
              double* K, double* rhs, double* theta) noexcept nogil:
    cdef Py_ssize_t T = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t m = p + 1 if use_constraint else p
    cdef Py_ssize_t t, i, k
    cdef double wt, xi, trace
    for i in range(m * m):
        K[i] = 0.0
    for i in range(m):
        rhs[i] = 0.0
    for t in range(T):
        wt = w[t]
        for i in range(p):
            xi = wt * X[t, i]
            rhs[i] += xi * y[t]
            for k in range(i, p):
                K[i * m + k] += xi * X[t, k]
    for i in range(p):
        for k in range(i + 1, p):
            K[k * m + i] = K[i * m + k]
    if ridge:
        trace = 0.0
        for i in range(p):
            trace += K[i * m + i]
        trace = 1e-10 * trace / p
        for i in range(p):
            K[i * m + i] += trace
    if use_constraint:
        for i in range(p):
            K[i * m + p] = c[i]
            K[p * m + i] = c[i]
        rhs[p] = 1.0
    if _lu_solve(K, rhs, m):
        return SINGULAR
    for i in range(p):
        theta[i] = rhs[i]
    return 0


def wls_solve(const double[:, :] X, const double[:] y, const double[:] w,
              const double[:] c, bint use_constraint, bint ridge):
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t m = p + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=1] theta = np.empty(p)
    cdef double* K = <double*>malloc(m * m * sizeof(double))
    cdef double* rhs = <double*>malloc(m * sizeof(double))
    cdef int status
    try:
        status = _wls(X, y, w, c, use_constraint, ridge, K, rhs, &theta[0])
    finally:
        free(K)
        free(rhs)
    if status:
        theta[:] = np.nan
    return theta, status


def irls_loop(const double[:, :] X, const double[:] y, const double[:] c,
              bint use_constraint, const double[:] theta0, double kappa,
              double mad_factor, double scale_floor, double tol, long max_iter,
              bint ridge):
    cdef Py_ssize_t T = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t m = p + 1
    cdef Py_ssize_t t, i
    cdef cnp.ndarray[cnp.float64_t, ndim=1] theta_a = np.array(theta0, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] r_a = np.empty(T)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] w_a = np.ones(T)
    cdef double[:] theta = theta_a
    cdef double[:] r = r_a
    cdef double[:] w = w_a
    cdef double* cand = <double*>malloc(p * sizeof(double))
    cdef double* K = <double*>malloc(m * m * sizeof(double))
    cdef double* rhs = <double*>malloc(m * sizeof(double))
    cdef double* buf = <double*>malloc(T * sizeof(double))
    cdef double scale, ratio, pred, rn, step
    cdef long it = 0
    cdef bint converged = False
    cdef int status = 0
    try:
        with nogil:
            for t in range(T):
                pred = 0.0
                for i in range(p):
                    pred += X[t, i] * theta[i]
                r[t] = y[t] - pred
            scale = _mad(r, buf, mad_factor, scale_floor)
            while it < max_iter:
                it += 1
                for t in range(T):
                    ratio = fabs(r[t]) / scale
                    w[t] = 1.0 if ratio <= kappa else kappa / ratio
                status = _wls(X, y, w, c, use_constraint, ridge, K, rhs, cand)
                if status:
                    break
                for i in range(p):
                    theta[i] = cand[i]
                step = 0.0
                for t in range(T):
                    pred = 0.0
                    for i in range(p):
                        pred += X[t, i] * theta[i]
                    rn = y[t] - pred
                    step += (rn - r[t]) * (rn - r[t])
                    r[t] = rn
                scale = _mad(r, buf, mad_factor, scale_floor)
                if sqrt(step) <= tol:
                    converged = True
                    break
    finally:
        free(cand)
        free(K)
        free(rhs)
        free(buf)
    return theta_a, r_a, scale, w_a, it, converged, status
