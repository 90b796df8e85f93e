"""Eigenvalues of a seeded symmetric 6x6 as roots of its characteristic polynomial.

The polynomial comes from the Faddeev-LeVerrier recursion in 60-digit
arithmetic; mpmath's polyroots then finds the roots.
"""

import mpmath as mp
import numpy as np

mp.mp.dps = 60


def matrix():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(6, 6))
    return (a + a.T) / 2


def charpoly(a):
    n = a.rows
    coeffs = [mp.mpf(1)]
    m = mp.zeros(n)
    eye = mp.eye(n)
    for k in range(1, n + 1):
        m = a * m + coeffs[-1] * eye
        c = -sum((a * m)[i, i] for i in range(n)) / k
        coeffs.append(c)
    return coeffs  # highest degree first


def main():
    a = mp.matrix(matrix().tolist())
    roots = mp.polyroots(charpoly(a), maxsteps=500, extraprec=200)
    vals = sorted(float(mp.re(r)) for r in roots)
    print([repr(v) for v in vals])


if __name__ == "__main__":
    main()
