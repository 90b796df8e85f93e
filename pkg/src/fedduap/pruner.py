"""Layer-adaptive structured filter pruning.

Every party (server and devices) proposes a pruning rate from the
eigen-gap of its loss Hessian; the proposals are blended with weights that
favour large, near-IID parties. The blended rate fixes a global magnitude
threshold, which sets a per-layer rate, and each conv layer then keeps its
filters with the highest feature-map rank.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset, label_distribution, noniid_degree
from .nnkernel import (
    Conv2D,
    Dense,
    Flatten,
    Model,
    ModelObjective,
    ReLU,
    feature_maps,
    flatten_params,
    hessian_fd,
    matrix_rank,
    sym_eigenvalues,
)
from .nnkernel.linalg import DEFAULT_HESSIAN_CAP

log = logging.getLogger(__name__)

SERVER_ID = 0  # devices are reported as client id = device id + 1


@dataclass
class PruneConfig:
    prune_at_round: int | None = None  # None: ceil(0.2 * rounds)
    hessian_cap: int = DEFAULT_HESSIAN_CAP
    p_max: float = 0.9
    epsilon: float = 0.01
    calib_batch: int = 32
    fixed_rate: float = 0.4
    lipschitz_samples: int = 16
    lipschitz_radius: float = 1.0
    lipschitz_safety: float = 2.0
    gap_floor: float = 1e-8
    rank_source: str = "server"  # "server" | "device"
    rank_device: int | None = None  # None: the device holding the most data
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.p_max <= 1.0:
            raise ValueError("p_max must lie in [0, 1]")
        if not 0.0 <= self.fixed_rate <= 1.0:
            raise ValueError("fixed_rate must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.lipschitz_samples < 2:
            raise ValueError("lipschitz_samples must be >= 2")
        if self.calib_batch < 1 or self.hessian_cap < 1:
            raise ValueError("calib_batch and hessian_cap must be >= 1")
        if self.rank_source not in ("server", "device"):
            raise ValueError(f"unknown rank_source {self.rank_source!r}")


@dataclass
class SnapshotPair:
    """Round-0 parameters and current parameters of the same architecture."""

    initial: np.ndarray
    current: np.ndarray
    model: Model | None = None  # architecture of ``current``, when it is a network

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.current = np.asarray(self.current, dtype=np.float64)
        if self.initial.shape != self.current.shape:
            raise ValueError("snapshots come from different architectures")

    @classmethod
    def from_models(cls, initial: Model, current: Model) -> "SnapshotPair":
        return cls(flatten_params(initial), flatten_params(current), current)

    @property
    def delta(self) -> np.ndarray:
        return self.initial - self.current


@dataclass
class RateEstimate:
    client_id: int
    dim: int
    gap_index: int
    rate: float
    lipschitz: float
    eigenvalues: np.ndarray = field(default=None, repr=False)


# ---------------------------------------------------------------- per-client rate


def objective_hessian(objective, w, cap):
    """Exact Hessian when the objective provides one, else finite differences of its gradient."""
    if hasattr(objective, "hessian"):
        return objective.hessian(w, cap)
    return hessian_fd(objective.gradient, w, cap)


def taylor_residual(objective, w, g0, hess, d) -> np.ndarray:
    """``grad(w + d) - grad(w) - H(w) d``."""
    return objective.gradient(w + d) - g0 - hess @ d


def lipschitz_estimate(snapshot: SnapshotPair, objective, samples: int = 16, radius: float = 1.0,
                       safety: float = 2.0, seed=0, hess=None) -> float:
    """Sampled Lipschitz constant of the second-order Taylor residual around ``snapshot.current``.

    Draws ``samples`` perturbations with norm at most ``radius * |delta|``
    and returns ``safety`` times the largest difference quotient over all
    pairs.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    w = snapshot.current
    r = radius * float(np.linalg.norm(snapshot.delta))
    if r == 0.0:
        return 0.0
    if hess is None:
        hess = objective_hessian(objective, w, max(w.size, 1))
    g0 = objective.gradient(w)
    rng = np.random.default_rng(seed)
    pts, res = [], []
    for _ in range(samples):
        d = rng.standard_normal(w.size)
        d *= r * rng.uniform() / np.linalg.norm(d)
        pts.append(d)
        res.append(taylor_residual(objective, w, g0, hess, d))
    best = 0.0
    for i in range(samples):
        for j in range(i + 1, samples):
            dist = np.linalg.norm(pts[i] - pts[j])
            if dist > 0:
                best = max(best, float(np.linalg.norm(res[i] - res[j]) / dist))
    return safety * best


def eigen_gap_index(eigenvalues, lipschitz: float, gap_floor: float = 1e-8) -> int:
    """First ``m`` (1-based) with ``lam[m+1] - lam[m] > 4 L``; 0 if none.

    Gaps must also exceed ``gap_floor`` scaled by the spectral magnitude, so
    rounding noise between repeated eigenvalues never counts as a gap.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if lam.size < 2:
        return 0
    limit = max(4.0 * lipschitz, gap_floor * max(1.0, float(np.abs(lam).max())))
    gaps = np.diff(lam)
    hits = np.flatnonzero(gaps > limit)
    return int(hits[0]) + 1 if hits.size else 0


def expected_rate_client(snapshot: SnapshotPair, objective, config: PruneConfig, client_id: int = 0,
                         seed=None) -> RateEstimate:
    """Pruning rate a single party would accept, from its Hessian eigen-gap.

    ``objective`` is a loss surface (``gradient(w)``) or a :class:`Dataset`
    evaluated with ``snapshot.model``.
    """
    if isinstance(objective, Dataset):
        if snapshot.model is None:
            raise ValueError("a dataset objective needs the snapshot's model")
        objective = ModelObjective(snapshot.model, objective.x, objective.y)
    w = snapshot.current
    hess = objective_hessian(objective, w, config.hessian_cap)
    lam = sym_eigenvalues(hess)
    lip = lipschitz_estimate(
        snapshot,
        objective,
        samples=config.lipschitz_samples,
        radius=config.lipschitz_radius,
        safety=config.lipschitz_safety,
        seed=[config.seed, client_id] if seed is None else seed,
        hess=hess,
    )
    d = lam.size
    m = eigen_gap_index(lam, lip, config.gap_floor)
    rate = min(m / d, config.p_max) if d else 0.0
    return RateEstimate(client_id, d, m, rate, lip, lam)


# ---------------------------------------------------------------- aggregation and threshold


def rate_weights(sizes, divergences, epsilon: float) -> np.ndarray:
    raw = np.array([n / (d + epsilon) for n, d in zip(sizes, divergences)], dtype=np.float64)
    total = raw.sum()
    if total <= 0:
        raise ValueError("rate weights sum to zero")
    return raw / total


def aggregate_rate(estimates, sizes, divergences, epsilon: float = 0.01) -> float:
    """Divergence-discounted, sample-weighted mean of the per-party rates."""
    if not estimates:
        raise ValueError("no rate estimates to aggregate")
    if not len(estimates) == len(sizes) == len(divergences):
        raise ValueError("estimates, sizes and divergences must align")
    rates = [e.rate if isinstance(e, RateEstimate) else float(e) for e in estimates]
    weights = rate_weights(sizes, divergences, epsilon)
    total = 0.0
    for w, p in zip(weights, rates):
        total += w * p
    return min(max(total, min(rates)), max(rates))


def global_threshold(params, p_star: float) -> float:
    """Magnitude of the ``floor(R * p*)``-th smallest parameter (1-based); 0 when that index is 0."""
    v = np.abs(np.asarray(params, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("empty parameter vector")
    if not 0.0 <= p_star <= 1.0:
        raise ValueError("p* must lie in [0, 1]")
    idx = math.floor(v.size * p_star)
    if idx == 0:
        return 0.0
    order = np.argsort(v, kind="stable")  # equal magnitudes keep their original order
    return float(v[order[idx - 1]])


def layer_params(layer) -> np.ndarray:
    return np.concatenate([layer.weight.ravel(), layer.bias.ravel()])


def layer_rates(model: Model, threshold: float, layers=None) -> dict:
    """Fraction of each conv layer's parameters strictly below ``threshold`` in magnitude."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if layers is None:
        layers = prunable_layers(model)
    out = {}
    for i in layers:
        v = layer_params(model.layers[i])
        out[i] = int(np.count_nonzero(np.abs(v) < threshold)) / v.size
    return out


# ---------------------------------------------------------------- surgery


def _surgery_target(model: Model, i: int):
    """Layer whose inputs mirror conv ``i``'s filters: ``("conv", j)``, ``("dense", j)`` or None."""
    j = i + 1
    while j < len(model.layers) and isinstance(model.layers[j], ReLU):
        j += 1
    if j >= len(model.layers):
        return None
    nxt = model.layers[j]
    if isinstance(nxt, Conv2D):
        return ("conv", j)
    if isinstance(nxt, Flatten) and j + 1 < len(model.layers) and isinstance(model.layers[j + 1], Dense):
        return ("dense", j + 1)
    return None


def prunable_layers(model: Model) -> list:
    out = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2D):
            if _surgery_target(model, i) is None:
                log.warning("conv layer %d has no layer to shrink after it; excluded from pruning", i)
            else:
                out.append(i)
    return out


def feature_map_ranks(model: Model, x, layer: int, rel_tol: float = 1e-6) -> np.ndarray:
    """Mean numerical rank of each filter's output map over the samples in ``x``."""
    if not isinstance(model.layers[layer], Conv2D):
        raise ValueError(f"layer {layer} is {model.layers[layer].kind}, not conv2d")
    fmap = feature_maps(model, x)[layer]
    n, filters = fmap.shape[:2]
    ranks = np.zeros(filters)
    for j in range(filters):
        ranks[j] = sum(matrix_rank(fmap[s, j], rel_tol) for s in range(n)) / n
    return ranks


def calibration_batch(data: Dataset, size: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = len(data)
    if n == 0:
        raise ValueError("calibration needs data")
    idx = np.sort(rng.choice(n, size=min(size, n), replace=False))
    return data.x[idx]


def decentralized_ranks(device_data: Dataset, model: Model, layer: int, batch_size: int = 32, seed=0):
    """Feature-map ranks computed on a device's own calibration batch."""
    return feature_map_ranks(model, calibration_batch(device_data, batch_size, seed), layer)


def filters_to_keep(ranks, rate: float) -> np.ndarray:
    """Indices (ascending) of the ``d - floor(rate * d)`` highest-rank filters, at least one.

    Filters are ordered by rank with ties broken by lower index first, and
    the tail of that order survives.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    d = ranks.size
    keep = max(1, d - math.floor(rate * d))
    order = np.lexsort((np.arange(d), ranks))
    return np.sort(order[d - keep :])


def _slice_model(model: Model, i: int, kept) -> Model:
    layers = list(model.layers)
    conv = layers[i]
    layers[i] = Conv2D(conv.weight[kept].copy(), conv.bias[kept].copy(), conv.stride, conv.padding)
    kind, j = _surgery_target(model, i)
    nxt = layers[j]
    if kind == "conv":
        layers[j] = Conv2D(nxt.weight[:, kept].copy(), nxt.bias.copy(), nxt.stride, nxt.padding)
    else:
        _, h, w = model.shapes[i + 1]
        cols = np.concatenate([np.arange(c * h * w, (c + 1) * h * w) for c in kept])
        layers[j] = Dense(nxt.weight[:, cols].copy(), nxt.bias.copy())
    return Model(layers, model.input_shape)


@dataclass
class LayerPlan:
    layer: int
    rate: float
    filters_before: int
    kept: list
    ranks: list

    @property
    def filters_after(self) -> int:
        return len(self.kept)


@dataclass
class PruningPlan:
    p_star: float | None  # None for rates that were not derived from a global threshold
    threshold: float | None
    layers: list
    estimates: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "p_star": self.p_star,
            "threshold": self.threshold,
            "layers": [
                {
                    "layer": lp.layer,
                    "rate": lp.rate,
                    "filters_before": lp.filters_before,
                    "filters_after": lp.filters_after,
                    "kept": [int(k) for k in lp.kept],
                    "ranks": [float(r) for r in lp.ranks],
                }
                for lp in self.layers
            ],
            "estimates": [
                {
                    "client": e.client_id,
                    "dim": e.dim,
                    "gap_index": e.gap_index,
                    "rate": e.rate,
                    "lipschitz": e.lipschitz,
                }
                for e in self.estimates
            ],
        }


def prune_model(model: Model, rates: dict, calib_x=None, ranks: dict | None = None,
                p_star: float | None = None, threshold: float | None = None):
    """Remove low-rank filters from each conv layer in ``rates``.

    Ranks are measured on the unpruned ``model`` (from ``calib_x`` unless
    supplied). Each pruned conv layer also loses the matching input slices
    of the next conv layer, or the matching columns of the dense layer after
    the flatten. Returns ``(pruned_model, PruningPlan)``.
    """
    ranks = dict(ranks or {})
    valid = set(prunable_layers(model))
    for i in rates:
        if i not in valid:
            raise ValueError(f"layer {i} cannot be pruned")
    for i in rates:
        if i not in ranks:
            if calib_x is None:
                raise ValueError("need a calibration batch or precomputed ranks")
            ranks[i] = feature_map_ranks(model, calib_x, i)
    plans = []
    pruned = model
    for i in sorted(rates):
        kept = filters_to_keep(ranks[i], rates[i])
        before = model.layers[i].out_channels
        if kept.size < before:
            pruned = _slice_model(pruned, i, kept)
        plans.append(LayerPlan(i, float(rates[i]), before, kept.tolist(), list(np.asarray(ranks[i]))))
    return pruned, PruningPlan(p_star, threshold, plans)


def flops_count(model: Model) -> float:
    """Forward-pass MFLOPs per sample: conv ``2 k^2 Cin Cout Ho Wo``, dense ``2 in out``."""
    total = 0
    shapes = model.shapes
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2D):
            _, ho, wo = shapes[i + 1]
            total += 2 * layer.kernel_size**2 * layer.in_channels * layer.out_channels * ho * wo
        elif isinstance(layer, Dense):
            total += 2 * layer.in_dim * layer.out_dim
    return total / 1e6


# ---------------------------------------------------------------- full pipeline


def _rank_source(server: Dataset, devices, config: PruneConfig):
    if config.rank_source == "server" and len(server):
        return server
    if config.rank_device is not None:
        return devices[config.rank_device].data
    return max(devices, key=lambda d: (d.n, -d.id)).data


def fedap(current: Model, initial: Model, server: Dataset, devices, global_dist, config: PruneConfig,
          workers: int = 1):
    """Adaptive pruning of ``current``; returns ``(pruned_model, PruningPlan)``.

    ``devices`` are objects with ``id``, ``data`` and ``dist`` (see
    :class:`fedduap.fedcore.DeviceState`). The server is client 0 and takes
    part only when it holds data.
    """
    config.validate()
    snapshot = SnapshotPair.from_models(initial, current)
    parties = []
    if len(server):
        parties.append((SERVER_ID, server, label_distribution(server)))
    parties += [(d.id + 1, d.data, d.dist) for d in devices]

    def estimate(party):
        cid, data, _ = party
        return expected_rate_client(snapshot, data, config, client_id=cid)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            estimates = list(pool.map(estimate, parties))
    else:
        estimates = [estimate(p) for p in parties]

    sizes = [len(data) for _, data, _ in parties]
    divs = [noniid_degree(dist, global_dist) for _, _, dist in parties]
    p_star = aggregate_rate(estimates, sizes, divs, config.epsilon)
    threshold = global_threshold(snapshot.current, p_star)
    rates = layer_rates(current, threshold)
    calib = calibration_batch(_rank_source(server, devices, config), config.calib_batch, [config.seed, 99])
    pruned, plan = prune_model(current, rates, calib, p_star=p_star, threshold=threshold)
    plan.estimates = estimates
    return pruned, plan


def fixed_rate_prune(current: Model, server: Dataset, devices, config: PruneConfig):
    """Baseline: prune every prunable conv layer at ``config.fixed_rate`` by feature-map rank."""
    config.validate()
    rates = {i: config.fixed_rate for i in prunable_layers(current)}
    calib = calibration_batch(_rank_source(server, devices, config), config.calib_batch, [config.seed, 99])
    return prune_model(current, rates, calib, p_star=config.fixed_rate)
