"""Finite-difference Hessians, symmetric eigenvalues and numerical rank."""

from __future__ import annotations

import numpy as np

from ._backend import kernels

DEFAULT_HESSIAN_CAP = 2000
EIG_TOL = 1e-10
SYMMETRY_TOL = 1e-8
MAX_SWEEPS = 100


class HessianTooLarge(ValueError):
    pass


class NotConverged(RuntimeError):
    pass


def hessian_fd(grad_fn, w, cap: int = DEFAULT_HESSIAN_CAP) -> np.ndarray:
    """Hessian of the loss behind ``grad_fn`` at ``w``.

    Column i is the central difference of the analytic gradient along
    coordinate i with step ``1e-4 * max(1, |w_i|)``. The result is
    symmetrized as ``(H + H.T) / 2`` and is exactly symmetric.
    """
    w = np.asarray(w, dtype=np.float64)
    m = w.size
    if m > cap:
        raise HessianTooLarge(
            f"model has {m} parameters, above the Hessian cap of {cap}; "
            "use a smaller rate-estimation model or raise the cap"
        )
    cols = np.empty((m, m))
    probe = w.copy()
    for i in range(m):
        h = 1e-4 * max(1.0, abs(w[i]))
        probe[i] = w[i] + h
        g_plus = grad_fn(probe)
        probe[i] = w[i] - h
        g_minus = grad_fn(probe)
        probe[i] = w[i]
        cols[:, i] = (g_plus - g_minus) / (2.0 * h)
    return (cols + cols.T) / 2.0


def sym_eigenvalues(h, tol: float = EIG_TOL) -> np.ndarray:
    """Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).

    Sweeps stop once the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||H||_F)``.
    """
    a = np.ascontiguousarray(h, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.size == 0:
        return np.zeros(0)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.abs(a).max()))
    asym = float(np.abs(a - a.T).max())
    if asym > SYMMETRY_TOL * scale:
        raise ValueError(f"matrix is not symmetric (max |H - H^T| = {asym:.3g})")
    a = np.ascontiguousarray((a + a.T) / 2.0)
    limit = tol * max(1.0, float(np.sqrt(np.sum(a * a))))
    diag, sweeps = kernels.jacobi_eigenvalues(a, limit, MAX_SWEEPS)
    if sweeps < 0:
        raise NotConverged(f"Jacobi did not converge in {MAX_SWEEPS} sweeps")
    return np.sort(np.asarray(diag))


def singular_values(m) -> np.ndarray:
    """Singular values (descending) by one-sided Jacobi."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if a.shape[1] > a.shape[0]:
        a = a.T
    if a.size == 0:
        return np.zeros(0)
    norms, sweeps = kernels.jacobi_singular_values(np.ascontiguousarray(a), MAX_SWEEPS)
    if sweeps < 0:
        raise NotConverged(f"one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps")
    return np.sort(np.asarray(norms))[::-1]


def matrix_rank(m, rel_tol: float = 1e-6) -> int:
    """Number of singular values above ``rel_tol * sigma_max``; 0 for a zero matrix."""
    a = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    sv = singular_values(a)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > rel_tol * sv[0]))
