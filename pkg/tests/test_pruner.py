import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedduap.datagen import Dataset, PartitionSpec, generate_synthetic, global_distribution, partition
from fedduap.fedcore import DeviceState
from fedduap.nnkernel import (
    Conv2D,
    CubicObjective,
    Dense,
    Flatten,
    Model,
    QuadraticObjective,
    ReLU,
    feature_maps,
    flatten_params,
    init_model,
    logits,
    model_to_dict,
    unflatten_params,
)
from fedduap.pruner import (
    PruneConfig,
    RateEstimate,
    SnapshotPair,
    aggregate_rate,
    calibration_batch,
    decentralized_ranks,
    eigen_gap_index,
    expected_rate_client,
    fedap,
    feature_map_ranks,
    filters_to_keep,
    fixed_rate_prune,
    flops_count,
    global_threshold,
    layer_params,
    layer_rates,
    lipschitz_estimate,
    prunable_layers,
    prune_model,
    rate_weights,
)


def _quadratic_with_spectrum(spectrum, seed=0):
    n = len(spectrum)
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(n, n)))
    return q @ np.diag(spectrum) @ q.T


def _snapshot(n, seed=0):
    rng = np.random.default_rng(seed)
    return SnapshotPair(rng.normal(size=n), rng.normal(size=n))


# ---------------------------------------------------------------- eigen-gap rate


def test_gap_index_rules():
    assert eigen_gap_index([0.0, 0.0, 5.0, 6.0], 0.0) == 2
    assert eigen_gap_index([0.0, 1.0, 2.0, 3.0], 0.25) == 0  # every gap equals 4L
    assert eigen_gap_index([0.0, 1.0, 2.0, 3.0], 0.2499) == 1
    assert eigen_gap_index([4.0], 0.0) == 0
    assert eigen_gap_index([1.0, 1.0 + 1e-12, 1.0 + 2e-12], 0.0) == 0  # rounding noise is no gap


def test_rate_from_constructed_spectrum():
    a = _quadratic_with_spectrum([0.0, 0.0, 5.0, 6.0])
    est = expected_rate_client(_snapshot(4), QuadraticObjective(a), PruneConfig())
    assert est.gap_index == 2 and est.rate == 0.5 and est.dim == 4
    assert est.lipschitz < 1e-6


def test_rate_fallbacks():
    flat = _quadratic_with_spectrum([1.0, 1.5, 2.0, 2.5])
    cubic = CubicObjective([5.0, 5.0, 5.0, 5.0], w0=np.zeros(4))
    # a curved residual makes 4L exceed every gap of 0.5
    snap = SnapshotPair(np.full(4, 1.0), np.zeros(4))
    est = expected_rate_client(snap, _Sum(QuadraticObjective(flat), cubic), PruneConfig(lipschitz_safety=1.0))
    assert est.gap_index == 0 and est.rate == 0.0
    one = expected_rate_client(_snapshot(1), QuadraticObjective([[3.0]]), PruneConfig())
    assert one.rate == 0.0 and one.dim == 1


def test_rate_is_clamped_by_p_max():
    a = _quadratic_with_spectrum([0.0] * 9 + [10.0])
    est = expected_rate_client(_snapshot(10), QuadraticObjective(a), PruneConfig(p_max=0.5))
    assert est.gap_index == 9 and est.rate == 0.5


class _Sum:
    def __init__(self, *parts):
        self.parts = parts

    def gradient(self, w):
        return sum(p.gradient(w) for p in self.parts)


# ---------------------------------------------------------------- Lipschitz estimate


def test_lipschitz_zero_on_quadratic():
    a = _quadratic_with_spectrum([1.0, -2.0, 3.0, 0.5, 7.0])
    assert lipschitz_estimate(_snapshot(5), QuadraticObjective(a), seed=1) < 1e-6


@pytest.mark.parametrize("c", [0.3, -2.0, 5.0])
def test_lipschitz_cubic_oracle(c):
    # residual of c*w^3 is 3c*d^2, whose Lipschitz constant on |d| <= r is 6|c|r
    w0, w1 = np.array([1.7]), np.array([0.4])
    snap = SnapshotPair(w0, w1)
    r = 2.0 * abs(w0[0] - w1[0])
    est = lipschitz_estimate(snap, CubicObjective([c]), samples=16, radius=2.0, safety=1.0, seed=3)
    bound = 6 * abs(c) * r
    assert bound / 2 <= est <= bound * (1 + 1e-9)


def test_lipschitz_linear_in_safety():
    snap = SnapshotPair(np.array([1.0, -1.0]), np.array([0.2, 0.3]))
    obj = CubicObjective([1.0, 2.0])
    one = lipschitz_estimate(snap, obj, safety=1.0, seed=5)
    assert lipschitz_estimate(snap, obj, safety=2.0, seed=5) == 2 * one
    with pytest.raises(ValueError):
        lipschitz_estimate(snap, obj, samples=1)


# ---------------------------------------------------------------- aggregation


def test_aggregate_rate_worked_example():
    p = aggregate_rate([0.5, 0.1], [100, 100], [0.0, 0.3], epsilon=0.01)
    assert p == pytest.approx(0.48750, abs=1e-5)


def test_aggregate_rate_special_cases():
    assert aggregate_rate([0.3], [12], [0.2]) == 0.3
    rates, sizes = [0.1, 0.7, 0.4], [10, 30, 60]
    assert aggregate_rate(rates, sizes, [0.2] * 3) == pytest.approx(
        sum(r * n for r, n in zip(rates, sizes)) / 100, abs=1e-12)
    est = [RateEstimate(0, 4, 2, 0.5, 0.0), RateEstimate(1, 4, 0, 0.0, 0.0)]
    assert aggregate_rate(est, [1, 1], [0.0, 0.0]) == 0.25
    with pytest.raises(ValueError):
        aggregate_rate([], [], [])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_rate_weights_and_bounds(k, seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 500, size=k)
    divs = rng.uniform(0, math.log(2), size=k)
    rates = rng.uniform(0, 0.9, size=k)
    assert abs(rate_weights(sizes, divs, 0.01).sum() - 1.0) <= 1e-12
    p = aggregate_rate(rates.tolist(), sizes, divs, 0.01)
    assert rates.min() <= p <= rates.max()


# ---------------------------------------------------------------- threshold and layer rates


def _brute_threshold(v, p):
    idx = math.floor(len(v) * p)
    if idx == 0:
        return 0.0
    mags = sorted((abs(x), i) for i, x in enumerate(v))
    return mags[idx - 1][0]


def test_threshold_examples():
    w = [0.5, -0.1, 0.3, -0.7, 0.2]
    assert global_threshold(w, 0.0) == 0.0
    assert global_threshold(w, 0.4) == 0.2
    assert global_threshold(w, 1.0) == 0.7
    with pytest.raises(ValueError):
        global_threshold([], 0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=60), st.floats(0, 1))
def test_threshold_matches_sort_oracle(v, p):
    assert global_threshold(v, p) == _brute_threshold(v, p)


def _conv_with(values, bias):
    values = np.asarray(values, dtype=float)
    return Conv2D(values.reshape(1, 1, 2, 2), np.array([bias]))


def _two_conv_model(rng, f1=3, f2=2):
    return Model(
        [
            Conv2D(rng.normal(size=(f1, 1, 3, 3)), rng.normal(size=f1), 1, 1),
            ReLU(),
            Conv2D(rng.normal(size=(f2, f1, 3, 3)), rng.normal(size=f2), 2, 1),
            ReLU(),
            Flatten(),
            Dense(rng.normal(size=(3, f2 * 3 * 3)), rng.normal(size=3)),
        ],
        (1, 6, 6),
    )


def test_layer_rate_example():
    conv = _conv_with([0.1, 0.3, 0.5, 0.05], 0.25)
    m = Model([conv, ReLU(), Flatten(), Dense(np.ones((2, 25)), np.zeros(2))], (1, 6, 6))
    assert layer_rates(m, 0.2) == {0: 0.4}
    assert layer_rates(m, 0.0) == {0: 0.0}
    assert layer_rates(m, 10.0) == {0: 1.0}


def test_layer_rates_are_monotone_and_globally_consistent():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = _two_conv_model(rng)
        w = flatten_params(m)
        p = rng.uniform()
        v = global_threshold(w, p)
        rates = layer_rates(m, v)
        below = sum(rates[i] * layer_params(m.layers[i]).size for i in rates)
        assert below <= math.floor(w.size * p) + len(rates)
        v2 = v + rng.uniform(0, 0.5)
        assert all(layer_rates(m, v2)[i] >= rates[i] for i in rates)


# ---------------------------------------------------------------- ranks and surgery


def test_filters_to_keep_example_and_floor():
    assert filters_to_keep([3, 0, 2, 1], 0.5).tolist() == [0, 2]
    assert filters_to_keep([1, 1, 1, 1], 0.5).tolist() == [2, 3]  # ties: lower index pruned first
    assert filters_to_keep([5, 4], 1.0).tolist() == [0]
    assert filters_to_keep([5, 4, 3], 0.0).tolist() == [0, 1, 2]


def test_feature_map_ranks_replay():
    rng = np.random.default_rng(0)
    m = _two_conv_model(rng)
    x = rng.normal(size=(8, 1, 6, 6))
    fm = feature_maps(m, x)
    for layer in (0, 2):
        got = feature_map_ranks(m, x, layer)
        expected = []
        for j in range(fm[layer].shape[1]):
            per = []
            for s in range(8):
                sv = np.linalg.svd(fm[layer][s, j], compute_uv=False)
                per.append(0 if sv[0] == 0 else int(np.sum(sv > 1e-6 * sv[0])))
            expected.append(sum(per) / 8)
        np.testing.assert_array_equal(got, expected)
    with pytest.raises(ValueError):
        feature_map_ranks(m, x, 1)


def test_rank_trivial_cases():
    rng = np.random.default_rng(1)
    m = _two_conv_model(rng)
    layers = list(m.layers)
    w = layers[0].weight.copy()
    b = layers[0].bias.copy()
    w[1], b[1] = 0.0, 0.0
    layers[0] = Conv2D(w, b, 1, 1)
    m = Model(layers, m.input_shape)
    x = rng.normal(size=(4, 1, 6, 6))
    assert feature_map_ranks(m, x, 0)[1] == 0.0
    # 1x1 maps: a positive bias keeps every map nonzero
    tiny = Model([Conv2D(np.zeros((2, 1, 3, 3)), np.array([1.0, 2.0])), ReLU(), Flatten(),
                  Dense(np.ones((2, 2)), np.zeros(2))], (1, 3, 3))
    np.testing.assert_array_equal(feature_map_ranks(tiny, x[:, :, :3, :3], 0), [1.0, 1.0])


def test_decentralized_ranks_match_server_on_same_data():
    rng = np.random.default_rng(2)
    m = _two_conv_model(rng)
    data = Dataset(rng.normal(size=(40, 1, 6, 6)), rng.integers(0, 3, size=40), 3)
    server = feature_map_ranks(m, calibration_batch(data, 16, seed=4), 0)
    np.testing.assert_array_equal(decentralized_ranks(data, m, 0, batch_size=16, seed=4), server)


def test_zero_rate_prune_is_identity():
    rng = np.random.default_rng(3)
    m = _two_conv_model(rng)
    x = rng.normal(size=(10, 1, 6, 6))
    pruned, plan = prune_model(m, {0: 0.0, 2: 0.0}, x)
    assert model_to_dict(pruned) == model_to_dict(m)
    assert logits(pruned, x).tobytes() == logits(m, x).tobytes()
    assert [lp.filters_after for lp in plan.layers] == [3, 2]


def test_pruning_zero_filters_preserves_outputs():
    rng = np.random.default_rng(4)
    m = _two_conv_model(rng, f1=4, f2=3)
    layers = list(m.layers)
    w0, b0 = layers[0].weight.copy(), layers[0].bias.copy()
    w0[[0, 2]], b0[[0, 2]] = 0.0, 0.0
    w2, b2 = layers[2].weight.copy(), layers[2].bias.copy()
    w2[1], b2[1] = 0.0, 0.0
    layers[0], layers[2] = Conv2D(w0, b0, 1, 1), Conv2D(w2, b2, 2, 1)
    m = Model(layers, m.input_shape)
    x = rng.normal(size=(100, 1, 6, 6))
    pruned, plan = prune_model(m, {0: 0.5, 2: 1 / 3}, x[:16])
    assert plan.layers[0].kept == [1, 3] and plan.layers[1].kept == [0, 2]
    np.testing.assert_allclose(logits(pruned, x), logits(m, x), rtol=0, atol=1e-12)


def test_surgery_counts_and_flops_are_analytic():
    rng = np.random.default_rng(5)
    m = _two_conv_model(rng, f1=4, f2=4)
    x = rng.normal(size=(8, 1, 6, 6))
    pruned, plan = prune_model(m, {0: 0.5, 2: 0.25}, x)
    a, b = plan.layers[0].filters_after, plan.layers[1].filters_after
    assert (a, b) == (2, 3)
    params = (a * 9 + a) + (b * a * 9 + b) + (3 * b * 9 + 3)
    assert pruned.parameter_count() == params
    flops = 2 * 9 * 1 * a * 36 + 2 * 9 * a * b * 9 + 2 * b * 9 * 3
    assert flops_count(pruned) == pytest.approx(flops / 1e6, rel=1e-15)
    assert flops_count(pruned) < flops_count(m)


def test_flops_examples():
    assert flops_count(Model([Flatten(), Dense(np.zeros((10, 10)), np.zeros(10))], (10, 1, 1))) == 0.0002
    assert flops_count(Model([], (1, 2, 2))) == 0.0
    m = Model([Conv2D(np.ones((4, 1, 3, 3)), np.zeros(4)), ReLU(), Flatten(), Dense(np.ones((2, 64)), np.zeros(2))],
              (1, 6, 6))
    half, _ = prune_model(m, {0: 0.5}, ranks={0: [1, 2, 3, 4]})
    conv = lambda mm: flops_count(mm) - 2 * mm.layers[3].in_dim * 2 / 1e6
    assert conv(half) == pytest.approx(conv(m) / 2, rel=1e-15)


def test_conv_without_follower_is_excluded(caplog):
    m = Model([Conv2D(np.ones((2, 1, 3, 3)), np.zeros(2)), ReLU()], (1, 4, 4))
    with caplog.at_level(logging.WARNING):
        assert prunable_layers(m) == []
    assert "excluded" in caplog.text
    with pytest.raises(ValueError):
        prune_model(m, {0: 0.5}, np.zeros((1, 1, 4, 4)))


# ---------------------------------------------------------------- full pipeline


@pytest.fixture(scope="module")
def federation():
    ds = generate_synthetic(3, (1, 6, 6), 30, 0.5, seed=2)
    part = partition(ds, PartitionSpec(4, server_fraction=0.2, seed=2))
    devices = [DeviceState(i, d) for i, d in enumerate(part.devices)]
    gd = global_distribution([d.dist for d in devices], [d.n for d in devices])
    initial = init_model((1, 6, 6), [(3, 3, 2, 1), (3, 3, 1, 1)], 3, seed=2)
    w = flatten_params(initial)
    current = unflatten_params(initial, w + 0.2 * np.random.default_rng(0).normal(size=w.size))
    return part, devices, gd, initial, current


def test_fedap_is_deterministic_across_workers(federation):
    part, devices, gd, initial, current = federation
    cfg = PruneConfig(lipschitz_safety=1.0, seed=1)
    a, pa = fedap(current, initial, part.server, devices, gd, cfg, workers=1)
    b, pb = fedap(current, initial, part.server, devices, gd, cfg, workers=3)
    assert pa.to_dict() == pb.to_dict()
    assert model_to_dict(a) == model_to_dict(b)
    assert [e.client_id for e in pa.estimates] == [0, 1, 2, 3, 4]
    assert 0.0 <= pa.p_star <= cfg.p_max
    for lp in pa.layers:
        assert lp.filters_after == lp.filters_before - math.floor(lp.rate * lp.filters_before) or lp.filters_after == 1


def test_fedap_without_server_data_uses_device_ranks(federation):
    part, devices, gd, initial, current = federation
    empty = Dataset.empty(part.server.sample_shape, 3)
    _, plan = fedap(current, initial, empty, devices, gd, PruneConfig(lipschitz_safety=1.0))
    assert [e.client_id for e in plan.estimates] == [1, 2, 3, 4]


def test_fixed_rate_baseline(federation):
    part, devices, _, _, current = federation
    pruned, plan = fixed_rate_prune(current, part.server, devices, PruneConfig(fixed_rate=0.4))
    assert [lp.filters_after for lp in plan.layers] == [2, 2]
    assert flops_count(pruned) < flops_count(current)
