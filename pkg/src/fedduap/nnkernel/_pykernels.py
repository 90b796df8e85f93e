"""Pure numpy fallback for the compiled Jacobi kernels.

Summations use ``np.cumsum`` (strict left-to-right accumulation) so the
results match the compiled loops bit for bit.
"""

import math

import numpy as np


def _seqsum(v) -> float:
    return float(np.cumsum(v)[-1]) if v.size else 0.0


def _offdiag_norm(a) -> float:
    sq = a * a
    np.fill_diagonal(sq, 0.0)
    return math.sqrt(_seqsum(sq.ravel()))


def jacobi_eigenvalues(a, tol, max_sweeps):
    w = np.array(a, dtype=np.float64, copy=True)
    n = w.shape[0]
    skip = tol / n
    sweep = 0
    while True:
        if _offdiag_norm(w) < tol:
            break
        if sweep >= max_sweeps:
            sweep = -1
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = w[p, q]
                if abs(apq) < skip:
                    continue
                theta = (w[q, q] - w[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                elif theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rows p and q hold columns p and q by symmetry
                xp = w[p, :].copy()
                xq = w[q, :].copy()
                np_ = c * xp - s * xq
                nq = s * xp + c * xq
                np_[[p, q]] = xp[[p, q]]
                nq[[p, q]] = xq[[p, q]]
                w[p, :] = np_
                w[q, :] = nq
                w[:, p] = np_
                w[:, q] = nq
                w[p, p] = w[p, p] - t * apq
                w[q, q] = w[q, q] + t * apq
                w[p, q] = 0.0
                w[q, p] = 0.0
        sweep += 1
    return np.diagonal(w).copy(), sweep


def jacobi_singular_values(m, max_sweeps):
    u = np.array(m, dtype=np.float64, copy=True)
    cols = u.shape[1]
    sweep = 0
    rotated = True
    while rotated:
        if sweep >= max_sweeps:
            sweep = -1
            break
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                up, uq = u[:, p], u[:, q]
                alpha = _seqsum(up * up)
                beta = _seqsum(uq * uq)
                gamma = _seqsum(up * uq)
                if alpha <= 1e-30 * beta or beta <= 1e-30 * alpha:
                    continue
                if abs(gamma) <= 1e-15 * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                xp = up.copy()
                xq = uq.copy()
                u[:, p] = c * xp - s * xq
                u[:, q] = s * xp + c * xq
        sweep += 1
    norms = np.array([math.sqrt(_seqsum(u[:, p] * u[:, p])) for p in range(cols)])
    return norms, sweep
