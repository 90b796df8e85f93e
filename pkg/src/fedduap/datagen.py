"""Synthetic image data, non-IID partitioning and label-distribution statistics."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (n, C, H, W) float64
    y: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y disagree on the number of samples")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    @classmethod
    def empty(cls, sample_shape, num_classes) -> "Dataset":
        return cls(np.zeros((0, *sample_shape)), np.zeros(0, dtype=np.int64), num_classes)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()[:16]


def generate_synthetic(num_classes, dim, per_class, noise_sigma, seed, noise_seed=None,
                       blob_width=2.5) -> Dataset:
    """Gaussian-blob images: one fixed template per class plus i.i.d. noise.

    Each template is a unit-height Gaussian bump (width ``blob_width`` pixels)
    at a seed-derived position in every channel. ``noise_seed`` lets a
    held-out split share the templates but draw fresh noise.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    c, h, w = dim
    trng = np.random.default_rng([seed, 0])
    rows, cols = np.mgrid[0:h, 0:w]
    templates = np.empty((num_classes, c, h, w))
    for ch in range(c):
        centers = []
        for k in range(num_classes):
            # keep bumps of different classes apart while the canvas allows it
            for attempt in range(200):
                cy, cx = trng.uniform(0, h - 1), trng.uniform(0, w - 1)
                if all((cy - a) ** 2 + (cx - b) ** 2 >= (2 * blob_width) ** 2 for a, b in centers):
                    break
            centers.append((cy, cx))
            templates[k, ch] = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * blob_width**2))
    nrng = np.random.default_rng([seed if noise_seed is None else noise_seed, 1])
    y = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    x = templates[y] + noise_sigma * nrng.standard_normal((y.size, c, h, w))
    return Dataset(x, y, num_classes)


# ---------------------------------------------------------------- partitioning


@dataclass(frozen=True)
class PartitionSpec:
    num_devices: int
    mode: str = "dirichlet"  # "dirichlet" | "shards"
    alpha: float = 0.5
    shards_per_device: int = 2
    server_fraction: float = 0.0
    server_mode: str = "iid"  # "iid" | "dirichlet"
    server_alpha: float = 0.5
    seed: int = 0
    max_retries: int = 100

    def validate(self) -> None:
        if self.num_devices < 1:
            raise ValueError("num_devices must be >= 1")
        if not 0.0 <= self.server_fraction < 1.0:
            raise ValueError("server_fraction must lie in [0, 1)")
        if self.mode not in ("dirichlet", "shards"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.mode == "dirichlet" and not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.mode == "shards" and self.shards_per_device < 1:
            raise ValueError("shards_per_device must be >= 1")
        if self.server_mode not in ("iid", "dirichlet"):
            raise ValueError(f"unknown server mode {self.server_mode!r}")
        if self.server_mode == "dirichlet" and not self.server_alpha > 0:
            raise ValueError("server_alpha must be > 0")


@dataclass
class Partition:
    server: Dataset
    devices: list
    server_indices: np.ndarray
    device_indices: list

    def manifest(self) -> dict:
        return {
            "server": [int(i) for i in self.server_indices],
            "devices": [[int(i) for i in idx] for idx in self.device_indices],
        }


def _largest_remainder(total, weights, caps):
    """Integer allocation of ``total`` proportional to ``weights`` without exceeding ``caps``."""
    weights = np.asarray(weights, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.int64)
    alloc = np.zeros(len(weights), dtype=np.int64)
    remaining = total
    active = caps > 0
    while remaining > 0 and active.any():
        wsum = weights[active].sum()
        share = np.where(active, weights / wsum if wsum > 0 else active / active.sum(), 0.0) * remaining
        base = np.minimum(np.floor(share).astype(np.int64), caps - alloc)
        leftover = remaining - int(base.sum())
        frac = share - np.floor(share)
        # ties go to the lowest class index
        for k in sorted(np.flatnonzero(active), key=lambda k: (-frac[k], k)):
            if leftover == 0:
                break
            if base[k] + alloc[k] < caps[k]:
                base[k] += 1
                leftover -= 1
        alloc += base
        remaining = total - int(alloc.sum())
        active = alloc < caps
        if base.sum() == 0:
            break
    return alloc


def _pick_server(y, n_server, spec, rng, num_classes):
    by_class = [np.flatnonzero(y == k) for k in range(num_classes)]
    counts = np.array([len(c) for c in by_class])
    if spec.server_mode == "iid":
        weights = counts / counts.sum()
    else:
        weights = rng.dirichlet(np.full(num_classes, spec.server_alpha))
    alloc = _largest_remainder(n_server, weights, counts)
    chosen = [rng.choice(by_class[k], size=alloc[k], replace=False) for k in range(num_classes)]
    return np.sort(np.concatenate(chosen)).astype(np.int64)


def _split_dirichlet(pool, y, spec, rng, num_classes):
    parts = [[] for _ in range(spec.num_devices)]
    for k in range(num_classes):
        idx = pool[y[pool] == k]
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(spec.num_devices, spec.alpha))
        cuts = (np.cumsum(props) * idx.size).astype(np.int64)[:-1]
        for dev, chunk in enumerate(np.split(idx, cuts)):
            parts[dev].append(chunk)
    return [np.sort(np.concatenate(p)).astype(np.int64) if p else np.zeros(0, dtype=np.int64) for p in parts]


def _split_shards(pool, y, spec, rng):
    order = pool[np.argsort(y[pool], kind="stable")]
    n_shards = spec.num_devices * spec.shards_per_device
    shards = np.array_split(order, n_shards)
    perm = rng.permutation(n_shards)
    s = spec.shards_per_device
    return [
        np.sort(np.concatenate([shards[j] for j in perm[d * s : (d + 1) * s]])).astype(np.int64)
        for d in range(spec.num_devices)
    ]


def partition(dataset: Dataset, spec: PartitionSpec) -> Partition:
    """Split ``dataset`` into server data and per-device data (a disjoint cover).

    The server receives ``floor(server_fraction * n)`` samples. Partitions
    with an empty device are redrawn with the next seed offset, up to
    ``spec.max_retries`` times.
    """
    spec.validate()
    n = len(dataset)
    n_server = int(math.floor(spec.server_fraction * n))
    if n - n_server < spec.num_devices:
        raise ValueError(f"{n - n_server} device samples cannot cover {spec.num_devices} devices")
    for attempt in range(spec.max_retries):
        rng = np.random.default_rng([spec.seed, attempt])
        server_idx = _pick_server(dataset.y, n_server, spec, rng, dataset.num_classes)
        pool = np.setdiff1d(np.arange(n), server_idx)
        if spec.mode == "dirichlet":
            dev_idx = _split_dirichlet(pool, dataset.y, spec, rng, dataset.num_classes)
        else:
            dev_idx = _split_shards(pool, dataset.y, spec, rng)
        if all(d.size > 0 for d in dev_idx):
            return Partition(
                server=dataset.subset(server_idx),
                devices=[dataset.subset(d) for d in dev_idx],
                server_indices=server_idx,
                device_indices=dev_idx,
            )
    raise ValueError(f"could not give every device data within {spec.max_retries} attempts")


# ---------------------------------------------------------------- distributions


def label_distribution(dataset: Dataset) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("label distribution of an empty dataset")
    counts = np.bincount(dataset.y, minlength=dataset.num_classes).astype(np.float64)
    return counts / len(dataset)


def global_distribution(dists, weights) -> np.ndarray:
    """Sample-count-weighted mean of label distributions."""
    dists = [np.asarray(d, dtype=np.float64) for d in dists]
    weights = [float(w) for w in weights]
    if len(dists) != len(weights) or not dists:
        raise ValueError("need one weight per distribution")
    total = sum(weights)
    if total <= 0:
        raise ValueError("total weight must be positive")
    acc = np.zeros_like(dists[0])
    for d, w in zip(dists, weights):
        acc = acc + w * d
    return acc / total


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; 0*log(0/q) = 0, and +inf where p > 0 = q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            if qi <= 0:
                return math.inf
            total += pi * math.log(pi / qi)
    return total


def noniid_degree(p_k, p_bar) -> float:
    """Jensen-Shannon divergence between a party's labels and the global mix, in [0, ln 2]."""
    p_k = np.asarray(p_k, dtype=np.float64)
    p_bar = np.asarray(p_bar, dtype=np.float64)
    p_m = 0.5 * (p_k + p_bar)
    d = 0.5 * kl_divergence(p_k, p_m) + 0.5 * kl_divergence(p_bar, p_m)
    return min(max(d, 0.0), math.log(2.0))


# ---------------------------------------------------------------- file formats


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for xi, yi in zip(dataset.x, dataset.y):
            fh.write(json.dumps({"label": int(yi), "data": [float(v) for v in xi.ravel()]}) + "\n")


def load_jsonl(path, sample_shape, num_classes=None) -> Dataset:
    xs, ys = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            data = np.asarray(rec["data"], dtype=np.float64)
            if data.size != int(np.prod(sample_shape)):
                raise ValueError(f"line {lineno}: expected {int(np.prod(sample_shape))} values, got {data.size}")
            xs.append(data.reshape(sample_shape))
            ys.append(int(rec["label"]))
    y = np.asarray(ys, dtype=np.int64)
    k = num_classes if num_classes is not None else (int(y.max()) + 1 if y.size else 0)
    x = np.stack(xs) if xs else np.zeros((0, *sample_shape))
    return Dataset(x, y, k)


def save_manifest(part: Partition, path, **meta) -> None:
    with open(path, "w") as fh:
        json.dump({**meta, **part.manifest()}, fh)
