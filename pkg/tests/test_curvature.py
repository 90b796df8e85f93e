import numpy as np
import pytest

from fedduap.nnkernel import (
    CurvatureProbe,
    HessianTooLarge,
    flatten_params,
    hessian,
    init_model,
    loss_and_grad,
    unflatten_params,
)


@pytest.fixture
def net_and_data():
    m = init_model((1, 6, 6), [(2, 3, 2, 1), (2, 3, 1, 1)], 3, seed=2, hidden=(4,))
    rng = np.random.default_rng(5)
    return m, rng.normal(size=(7, 1, 6, 6)), rng.integers(0, 3, size=7)


def test_hvp_matches_gradient_differences(net_and_data):
    m, x, y = net_and_data
    probe = CurvatureProbe(m, x, y)
    w = flatten_params(m)
    rng = np.random.default_rng(0)
    for _ in range(5):
        v = rng.normal(size=w.size)
        h = 1e-6
        gp = loss_and_grad(unflatten_params(m, w + h * v), x, y)[1]
        gm = loss_and_grad(unflatten_params(m, w - h * v), x, y)[1]
        np.testing.assert_allclose(probe.hvp(v), (gp - gm) / (2 * h), rtol=0, atol=1e-7)


def test_batched_products_equal_single(net_and_data):
    m, x, y = net_and_data
    probe = CurvatureProbe(m, x, y)
    vs = np.random.default_rng(1).normal(size=(4, probe.size))
    many = probe.hvp_many(vs)
    for v, row in zip(vs, many):
        np.testing.assert_allclose(probe.hvp(v), row, rtol=0, atol=1e-14)


def test_exact_and_finite_difference_hessians_agree(net_and_data):
    m, x, y = net_and_data
    exact = hessian(m, x, y)
    fd = hessian(m, x, y, method="fd")
    assert (exact == exact.T).all()
    np.testing.assert_allclose(exact, fd, rtol=0, atol=1e-6)


def test_hessian_chunking_does_not_change_result(net_and_data):
    m, x, y = net_and_data
    probe = CurvatureProbe(m, x, y)
    a = probe.hessian(chunk=1)
    b = probe.hessian(chunk=64)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_hessian_cap(net_and_data):
    m, x, y = net_and_data
    with pytest.raises(HessianTooLarge):
        hessian(m, x, y, cap=10)
    with pytest.raises(ValueError):
        hessian(m, x, y, method="nope")
