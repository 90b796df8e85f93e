"""Federated round engine: FedAvg aggregation and the dynamic server update.

A round selects devices, trains them locally from the same global
snapshot, averages the results weighted by sample count and, in ``feddu``
mode, nudges the average with a normalized gradient computed on the
server's own data. The size of that nudge shrinks as the aggregated model
gets more accurate, as the server data drifts from the device mix, and
geometrically with the round number.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset, global_distribution, label_distribution, noniid_degree
from .nnkernel import Model, flatten_params, forward, logits, loss_and_grad, unflatten_params
from .pruner import flops_count

# tags that keep the RNG streams of different purposes independent
_SELECT, _LOCAL, _SERVER = 11, 12, 13

F_PRIME = {
    "one_minus_acc": lambda acc: min(max(1.0 - acc, 0.0), 1.0),
}


def register_f_prime(name, fn) -> None:
    """Make an accuracy-to-weight function selectable by name in FedConfig."""
    F_PRIME[name] = fn


@dataclass
class FedConfig:
    num_devices: int
    per_round: int = 5
    local_epochs: int = 2
    batch_size: int = 16
    lr: float = 0.05
    decay: float = 0.99
    server_coef: float = 1.0
    f_prime: str = "one_minus_acc"
    rounds: int = 60
    seed: int = 0
    device_flops_per_sec: float = 1e9
    workers: int = 1

    def validate(self) -> None:
        if not 1 <= self.per_round <= self.num_devices:
            raise ValueError("per_round must lie in 1..num_devices")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.server_coef < 0:
            raise ValueError("server_coef must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.f_prime not in F_PRIME:
            raise ValueError(f"unknown f_prime {self.f_prime!r}")
        if self.rounds < 0 or self.workers < 1:
            raise ValueError("rounds must be >= 0 and workers >= 1")


@dataclass
class DeviceState:
    id: int
    data: Dataset
    dist: np.ndarray = None

    def __post_init__(self):
        if len(self.data) == 0:
            raise ValueError(f"device {self.id} has no data")
        if self.dist is None:
            self.dist = label_distribution(self.data)

    @property
    def n(self) -> int:
        return len(self.data)


@dataclass
class ServerState:
    round: int
    model: Model
    data: Dataset
    global_dist: np.ndarray  # sample-weighted label mix over all devices
    dist: np.ndarray = None

    def __post_init__(self):
        if self.dist is None and len(self.data):
            self.dist = label_distribution(self.data)

    @property
    def n(self) -> int:
        return len(self.data)


@dataclass
class RoundRecord:
    round: int
    server_accuracy: float | None
    test_accuracy: float | None
    loss: float | None
    tau_eff: float
    selected: list
    device_mflops: float
    device_seconds: float
    mflops_per_sample: float
    wall_seconds: float = field(default=0.0, compare=False)

    def to_dict(self, wall=False) -> dict:
        d = {
            "round": self.round,
            "server_accuracy": self.server_accuracy,
            "test_accuracy": self.test_accuracy,
            "loss": self.loss,
            "tau_eff": self.tau_eff,
            "selected": list(self.selected),
            "device_mflops": self.device_mflops,
            "device_seconds": self.device_seconds,
            "mflops_per_sample": self.mflops_per_sample,
        }
        if wall:
            d["wall_seconds"] = self.wall_seconds
        return d


# ---------------------------------------------------------------- steps


def select_devices(t: int, config: FedConfig) -> list:
    """Uniform sample of ``per_round`` device ids without replacement, sorted."""
    rng = np.random.default_rng([config.seed, _SELECT, t])
    return sorted(int(k) for k in rng.choice(config.num_devices, size=config.per_round, replace=False))


def _batches(n, epochs, batch_size, rng):
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


@dataclass
class LocalResult:
    model: Model
    grad: np.ndarray  # (w_start - w_end) / lr


def local_update(model: Model, data: Dataset, epochs: int, batch_size: int, lr: float, seed) -> LocalResult:
    """Minibatch SGD for ``epochs`` passes; the last short batch of each pass is kept."""
    if len(data) == 0:
        raise ValueError("local update needs data")
    rng = np.random.default_rng(seed)
    w0 = flatten_params(model)
    w = w0.copy()
    for idx in _batches(len(data), epochs, batch_size, rng):
        _, g = loss_and_grad(unflatten_params(model, w), data.x[idx], data.y[idx])
        w = w - lr * g
    return LocalResult(unflatten_params(model, w), (w0 - w) / lr)


def aggregate(models, weights) -> Model:
    """Sample-weighted parameter mean, accumulated in the given order.

    Accumulates offsets from the first model so that identical inputs come
    back bit-exact; each coordinate is kept inside the inputs' range.
    """
    if not models:
        raise ValueError("nothing to aggregate")
    total = float(sum(weights))
    if total <= 0:
        raise ValueError("aggregation weights must sum to a positive value")
    flats = [flatten_params(m) for m in models]
    base = flats[0]
    acc = np.zeros_like(base)
    for f, n_k in zip(flats, weights):
        acc = acc + (n_k / total) * (f - base)
    stacked = np.stack(flats)
    out = np.clip(base + acc, stacked.min(axis=0), stacked.max(axis=0))
    return unflatten_params(models[0], out)


def server_probe_steps(n0: int, epochs: int, batch_size: int) -> int:
    return math.ceil(n0 * epochs / batch_size)


def normalized_server_gradient(model: Model, data: Dataset, epochs: int, batch_size: int, lr: float, seed):
    """Mean of the stochastic gradients met along a throwaway SGD probe on server data.

    Runs ``tau = ceil(n0 * epochs / batch_size)`` steps over a stream of
    ``epochs`` concatenated permutations; returns ``(mean_gradient, tau)``.
    """
    n0 = len(data)
    if n0 == 0:
        raise ValueError("server update needs server data")
    tau = server_probe_steps(n0, epochs, batch_size)
    rng = np.random.default_rng(seed)
    stream = np.concatenate([rng.permutation(n0) for _ in range(epochs)])
    w = flatten_params(model)
    total = np.zeros_like(w)
    for i in range(tau):
        idx = stream[i * batch_size : (i + 1) * batch_size]
        _, g = loss_and_grad(unflatten_params(model, w), data.x[idx], data.y[idx])
        total = total + g
        w = w - lr * g
    return total / tau, tau


def effective_step(acc, div_selected, div_server, n0, n_selected, coef, decay, t, tau,
                   f_prime="one_minus_acc") -> float:
    """Dynamic scale of the server update.

    ``f'(acc) * n0*D(P') / (n0*D(P') + n'*D(P0)) * coef * decay**t * tau``,
    with the fraction taken as ``n0 / (n0 + n')`` when both divergences vanish.
    """
    f = F_PRIME[f_prime](acc) if isinstance(f_prime, str) else f_prime(acc)
    num = n0 * div_selected
    den = num + n_selected * div_server
    if den > 0:
        frac = num / den
    else:
        frac = n0 / (n0 + n_selected) if n0 + n_selected > 0 else 0.0
    return f * frac * coef * decay**t * tau


def server_update(model: Model, grad, tau_eff: float, lr: float) -> Model:
    w = flatten_params(model)
    return unflatten_params(model, w - (tau_eff * lr) * np.asarray(grad))


@dataclass
class EvalResult:
    accuracy: float
    loss: float


def evaluate(model: Model, data: Dataset, chunk: int = 512) -> EvalResult:
    """Argmax accuracy (ties resolve to the lowest class index) and mean loss."""
    n = len(data)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, chunk):
        xb, yb = data.x[start : start + chunk], data.y[start : start + chunk]
        fwd = forward(model, xb, yb)
        correct += int(np.sum(np.argmax(fwd.logits, axis=1) == yb))
        loss_sum += fwd.loss * len(yb)
    return EvalResult(correct / n, loss_sum / n)


def predict(model: Model, x) -> np.ndarray:
    return np.argmax(logits(model, x), axis=1)


# ---------------------------------------------------------------- round


def training_flops_per_sample(model: Model) -> float:
    """Forward plus backward cost, taken as three forward passes."""
    return 3.0 * flops_count(model) * 1e6


def run_round(state: ServerState, devices: list, config: FedConfig, mode: str = "feddu",
              test: Dataset | None = None) -> tuple[ServerState, RoundRecord]:
    """One federated round; ``fedavg`` skips the server update entirely.

    ``feddu`` without server data also falls back to plain FedAvg.
    """
    if mode not in ("fedavg", "feddu"):
        raise ValueError(f"unknown round mode {mode!r}")
    started = time.perf_counter()
    t = state.round
    selected = select_devices(t, config)
    w_prev = state.model

    def train(k):
        dev = devices[k]
        return local_update(w_prev, dev.data, config.local_epochs, config.batch_size, config.lr,
                            [config.seed, _LOCAL, t, k])

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(train, selected))
    else:
        results = [train(k) for k in selected]

    sizes = [devices[k].n for k in selected]
    w_half = aggregate([r.model for r in results], sizes)

    server_acc = None
    tau_eff = 0.0
    if state.n > 0:
        server_acc = evaluate(w_half, state.data).accuracy
    new_model = w_half
    if mode == "feddu" and state.n > 0:
        n_sel = sum(sizes)
        p_sel = global_distribution([devices[k].dist for k in selected], sizes)
        g0, tau = normalized_server_gradient(w_half, state.data, config.local_epochs, config.batch_size,
                                             config.lr, [config.seed, _SERVER, t])
        tau_eff = effective_step(
            server_acc,
            noniid_degree(p_sel, state.global_dist),
            noniid_degree(state.dist, state.global_dist),
            state.n,
            n_sel,
            config.server_coef,
            config.decay,
            t,
            tau,
            config.f_prime,
        )
        new_model = server_update(w_half, g0, tau_eff, config.lr)

    per_sample = training_flops_per_sample(w_prev)
    work = [per_sample * n_k * config.local_epochs for n_k in sizes]
    test_acc = test_loss = None
    if test is not None and len(test):
        ev = evaluate(new_model, test)
        test_acc, test_loss = ev.accuracy, ev.loss
    record = RoundRecord(
        round=t,
        server_accuracy=server_acc,
        test_accuracy=test_acc,
        loss=test_loss,
        tau_eff=float(tau_eff),
        selected=selected,
        device_mflops=sum(work) / 1e6,
        # devices train in parallel, so the round lasts as long as the slowest one
        device_seconds=max(work) / config.device_flops_per_sec,
        mflops_per_sample=flops_count(w_prev),
        wall_seconds=time.perf_counter() - started,
    )
    new_state = ServerState(t + 1, new_model, state.data, state.global_dist, state.dist)
    return new_state, record
