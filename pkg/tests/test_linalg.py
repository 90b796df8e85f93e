import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedduap.nnkernel import (
    HessianTooLarge,
    QuadraticObjective,
    hessian_fd,
    matrix_rank,
    singular_values,
    sym_eigenvalues,
)
from fedduap.nnkernel import _pykernels

try:
    from fedduap.nnkernel import _core
except ImportError:  # extension not built
    _core = None

# tests/oracles/charpoly_eigen.py
CHARPOLY_EIGS = [
    -2.003711955496322,
    -0.9879988416722618,
    0.27610313426610683,
    0.4913369491518591,
    1.5001412187121936,
    1.8151400859302629,
]
# tests/oracles/elimination_rank.py
ELIMINATION_RANK = 2


def _seeded_symmetric():
    a = np.random.default_rng(0).normal(size=(6, 6))
    return (a + a.T) / 2


def _integer_rank_two():
    rng = np.random.default_rng(0)
    u = rng.integers(-5, 6, size=(2, 5))
    v = rng.integers(-5, 6, size=(2, 5))
    return (np.outer(u[0], v[0]) + np.outer(u[1], v[1])).astype(float)


# ---------------------------------------------------------------- Hessian


def test_hessian_of_quadratic_is_a():
    rng = np.random.default_rng(4)
    b = rng.normal(size=(7, 7))
    a = b + b.T
    obj = QuadraticObjective(a, rng.normal(size=7))
    h = hessian_fd(obj.gradient, rng.normal(size=7) * 3)
    np.testing.assert_allclose(h, a, rtol=0, atol=1e-6)
    assert (h == h.T).all()


def test_hessian_one_parameter_square():
    h = hessian_fd(lambda w: 2.0 * w, np.array([0.3]))
    assert h.shape == (1, 1) and h[0, 0] == pytest.approx(2.0, abs=1e-12)


def test_hessian_cap_names_the_remedy():
    with pytest.raises(HessianTooLarge, match="smaller rate-estimation model"):
        hessian_fd(lambda w: w, np.zeros(11), cap=10)


# ---------------------------------------------------------------- eigenvalues


def test_eigenvalues_trivial_cases():
    np.testing.assert_array_equal(sym_eigenvalues(np.eye(3)), [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(sym_eigenvalues(np.diag([3.0, -1.0, 2.0])), [-1.0, 2.0, 3.0])
    assert sym_eigenvalues(np.zeros((0, 0))).size == 0


def test_eigenvalues_match_characteristic_polynomial_oracle():
    np.testing.assert_allclose(sym_eigenvalues(_seeded_symmetric()), CHARPOLY_EIGS, rtol=0, atol=1e-8)


def test_eigenvalues_reject_asymmetric():
    a = np.eye(3)
    a[0, 1] = 1e-3
    with pytest.raises(ValueError, match="symmetric"):
        sym_eigenvalues(a)
    a[0, 1] = 1e-10  # inside the tolerance
    assert sym_eigenvalues(a).size == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 25), st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_eigen_sum_equals_trace(n, seed, scale):
    b = np.random.default_rng(seed).normal(size=(n, n)) * scale
    a = (b + b.T) / 2
    lam = sym_eigenvalues(a)
    assert lam.size == n and (np.diff(lam) >= 0).all()
    assert abs(lam.sum() - np.trace(a)) <= 1e-6 * max(1.0, np.abs(a).sum())
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(a), rtol=0, atol=1e-9 * max(1.0, np.linalg.norm(a)))


# ---------------------------------------------------------------- rank


def test_rank_trivial_cases():
    assert matrix_rank(np.eye(3)) == 3
    assert matrix_rank(np.ones((4, 4))) == 1
    assert matrix_rank(np.zeros((3, 5))) == 0
    assert matrix_rank(np.ones((1, 1))) == 1


def test_rank_matches_elimination_oracle():
    assert matrix_rank(_integer_rank_two()) == ELIMINATION_RANK


def test_rank_invariances():
    m = _integer_rank_two()
    perm = np.random.default_rng(1).permutation(5)
    assert matrix_rank(m[perm]) == 2
    scaled = m.copy()
    scaled[2] *= -3.5
    assert matrix_rank(scaled) == 2
    assert matrix_rank(m.T) == 2


def test_rank_rejects_nonfinite():
    with pytest.raises(ValueError):
        matrix_rank(np.array([[1.0, np.nan]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_singular_values_match_lapack(r, c, seed):
    m = np.random.default_rng(seed).normal(size=(r, c))
    np.testing.assert_allclose(singular_values(m), np.linalg.svd(m, compute_uv=False), rtol=0, atol=1e-10)


def test_rank_of_deficient_feature_like_maps():
    # products of low-rank factors plus exact zero columns, like post-ReLU maps
    rng = np.random.default_rng(3)
    for k in range(1, 6):
        m = rng.normal(size=(8, k)) @ rng.normal(size=(k, 8)) * 1e-2
        m[:, 0] = 0.0
        assert matrix_rank(m) == np.linalg.matrix_rank(m, tol=1e-6 * np.linalg.svd(m, compute_uv=False)[0])


# ---------------------------------------------------------------- backends


@pytest.mark.skipif(_core is None, reason="compiled kernels not built")
def test_backends_are_bit_identical():
    rng = np.random.default_rng(8)
    for n in (1, 2, 5, 17, 40):
        b = rng.normal(size=(n, n))
        a = np.ascontiguousarray((b + b.T) / 2)
        d1, s1 = _core.jacobi_eigenvalues(a.copy(), 1e-10, 100)
        d2, s2 = _pykernels.jacobi_eigenvalues(a.copy(), 1e-10, 100)
        assert s1 == s2
        assert np.asarray(d1).tobytes() == np.asarray(d2).tobytes()
        m = np.ascontiguousarray(rng.normal(size=(n + 3, n)))
        v1, t1 = _core.jacobi_singular_values(m.copy(), 100)
        v2, t2 = _pykernels.jacobi_singular_values(m.copy(), 100)
        assert t1 == t2
        assert np.asarray(v1).tobytes() == np.asarray(v2).tobytes()


def test_pure_python_switch_selects_fallback():
    import subprocess
    import sys

    code = "from fedduap.nnkernel import BACKEND; print(BACKEND)"
    env = {"FEDDUAP_PURE_PYTHON": "1", "PATH": "/usr/bin:/bin"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
