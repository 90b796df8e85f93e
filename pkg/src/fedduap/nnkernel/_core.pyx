# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Jacobi kernels.

Each routine performs exactly the same floating-point operations, in the
same order, as its counterpart in ``_pykernels``; the two backends agree
bit for bit.
"""

from libc.math cimport fabs, sqrt

import numpy as np


cdef double _offdiag_norm(double[:, ::1] a, Py_ssize_t n) nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(n):
            if i != j:
                s += a[i, j] * a[i, j]
    return sqrt(s)


def jacobi_eigenvalues(double[:, ::1] a, double tol, int max_sweeps):
    """Cyclic Jacobi on a private copy of ``a``; returns (diagonal, sweeps)."""
    cdef Py_ssize_t n = a.shape[0]
    cdef double[:, ::1] w = np.array(a, dtype=np.float64, copy=True)
    cdef Py_ssize_t p, q, k
    cdef double apq, theta, t, c, s, xp, xq, off
    cdef int sweep = 0
    cdef double skip = tol / n
    with nogil:
        while True:
            off = _offdiag_norm(w, n)
            if off < tol:
                break
            if sweep >= max_sweeps:
                sweep = -1
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = w[p, q]
                    # entries below tol/n cannot keep the off-norm above tol
                    if fabs(apq) < skip:
                        continue
                    theta = (w[q, q] - w[p, p]) / (2.0 * apq)
                    if fabs(theta) > 1e150:
                        t = 0.5 / theta
                    elif theta >= 0.0:
                        t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                    else:
                        t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    # rows p and q hold columns p and q by symmetry
                    for k in range(n):
                        if k == p or k == q:
                            continue
                        xp = w[p, k]
                        xq = w[q, k]
                        xp, xq = c * xp - s * xq, s * xp + c * xq
                        w[p, k] = xp
                        w[q, k] = xq
                        w[k, p] = xp
                        w[k, q] = xq
                    w[p, p] = w[p, p] - t * apq
                    w[q, q] = w[q, q] + t * apq
                    w[p, q] = 0.0
                    w[q, p] = 0.0
            sweep += 1
    diag = np.empty(n, dtype=np.float64)
    for k in range(n):
        diag[k] = w[k, k]
    return diag, sweep


def jacobi_singular_values(double[:, ::1] m, int max_sweeps):
    """One-sided (Hestenes) Jacobi on the columns of ``m``; returns (norms, sweeps)."""
    cdef Py_ssize_t rows = m.shape[0], cols = m.shape[1]
    cdef double[:, ::1] u = np.array(m, dtype=np.float64, copy=True)
    cdef Py_ssize_t p, q, k
    cdef double alpha, beta, gamma, zeta, t, c, s, xp, xq
    cdef int sweep = 0
    cdef bint rotated = True
    with nogil:
        while rotated:
            if sweep >= max_sweeps:
                sweep = -1
                break
            rotated = False
            for p in range(cols - 1):
                for q in range(p + 1, cols):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for k in range(rows):
                        alpha = alpha + u[k, p] * u[k, p]
                        beta = beta + u[k, q] * u[k, q]
                        gamma = gamma + u[k, p] * u[k, q]
                    # a column that is rounding noise next to its partner is treated as zero
                    if alpha <= 1e-30 * beta or beta <= 1e-30 * alpha:
                        continue
                    if fabs(gamma) <= 1e-15 * sqrt(alpha * beta):
                        continue
                    rotated = True
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if zeta >= 0.0:
                        t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                    else:
                        t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = c * t
                    for k in range(rows):
                        xp = u[k, p]
                        xq = u[k, q]
                        u[k, p] = c * xp - s * xq
                        u[k, q] = s * xp + c * xq
            sweep += 1
    norms = np.empty(cols, dtype=np.float64)
    cdef double acc
    for p in range(cols):
        acc = 0.0
        for k in range(rows):
            acc = acc + u[k, p] * u[k, p]
        norms[p] = sqrt(acc)
    return norms, sweep
