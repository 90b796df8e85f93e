"""Experiment configuration: a nested YAML file merged over documented defaults."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import yaml

from ..datagen import PartitionSpec
from ..fedcore import FedConfig
from ..pruner import PruneConfig

MODES = ("fedavg", "feddu", "fedap", "fedduap", "fixed-rate-prune")
PRUNE_MODES = ("fedap", "fedduap", "fixed-rate-prune")

DEFAULTS = {
    "mode": "fedduap",
    "seed": 0,
    "out": "runs/latest",
    "target_accuracy": 0.9,
    "dataset": {
        "num_classes": 4,
        "dim": [1, 16, 16],
        "per_class": 500,
        "test_per_class": 250,
        "noise_sigma": 0.8,
        "blob_width": 2.5,
    },
    "model": {
        # (filters, kernel, stride, padding) per conv block, each followed by ReLU
        "conv": [[4, 3, 2, 1], [4, 3, 3, 1]],
        "hidden": [],
    },
    "partition": {
        "num_devices": 20,
        "mode": "dirichlet",
        "alpha": 0.5,
        "shards_per_device": 2,
        "server_fraction": 0.05,
        "server_mode": "iid",
        "server_alpha": 0.5,
        "max_retries": 100,
    },
    "federation": {
        "per_round": 5,
        "local_epochs": 2,
        "batch_size": 16,
        "lr": 0.05,
        "decay": 0.99,
        "server_coef": 1.0,
        "f_prime": "one_minus_acc",
        "rounds": 60,
        "device_flops_per_sec": 1e9,
        "workers": 1,
    },
    "pruning": {
        "enabled": True,
        "prune_at_round": None,  # null: ceil(0.2 * rounds)
        "hessian_cap": 2000,
        "p_max": 0.9,
        "epsilon": 0.01,
        "calib_batch": 32,
        "fixed_rate": 0.4,
        "lipschitz_samples": 16,
        "lipschitz_radius": 1.0,
        "lipschitz_safety": 2.0,
        "gap_floor": 1e-8,
        "rank_source": "server",
        "rank_device": None,
    },
}

# keys whose default is None but which take a number when set
_OPTIONAL_INT = {"pruning.prune_at_round", "pruning.rank_device"}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


def _coerce(value, default, key):
    if key in _OPTIONAL_INT:
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer or null, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return copy.deepcopy(value)
    return value


def _merge(defaults: dict, given: dict, prefix: str = "") -> dict:
    if not isinstance(given, dict):
        raise ConfigError(prefix.rstrip("."), "expected a mapping")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(path, "unknown key")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value if value is not None else {}, path + ".")
        else:
            out[key] = _coerce(value, defaults[key], path)
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment settings; ``raw`` keeps the resolved nested mapping."""

    raw: dict

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out(self) -> str:
        return self.raw["out"]

    @property
    def rounds(self) -> int:
        return self.raw["federation"]["rounds"]

    @property
    def target_accuracy(self) -> float:
        return self.raw["target_accuracy"]

    @property
    def prune_at_round(self) -> int | None:
        p = self.raw["pruning"]
        if self.mode not in PRUNE_MODES or not p["enabled"]:
            return None
        if p["prune_at_round"] is None:
            return math.ceil(0.2 * self.rounds)
        return p["prune_at_round"]

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(seed=self.seed, **self.raw["partition"])

    def fed_config(self) -> FedConfig:
        return FedConfig(num_devices=self.raw["partition"]["num_devices"], seed=self.seed,
                         **self.raw["federation"])

    def prune_config(self) -> PruneConfig:
        p = {k: v for k, v in self.raw["pruning"].items() if k != "enabled"}
        p["prune_at_round"] = self.prune_at_round
        return PruneConfig(seed=self.seed, **p)

    def conv_specs(self) -> list:
        return [tuple(c) for c in self.raw["model"]["conv"]]

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with top-level fields (mode, seed, out) or ``workers`` replaced, re-validated."""
        raw = copy.deepcopy(self.raw)
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "workers":
                raw["federation"]["workers"] = value
            elif key in ("mode", "seed", "out"):
                raw[key] = value
            else:
                raise ConfigError(key, "cannot be overridden")
        return from_dict(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _check(cond, key, message):
    if not cond:
        raise ConfigError(key, message)


def _validate(raw: dict) -> None:
    _check(raw["mode"] in MODES, "mode", f"must be one of {', '.join(MODES)}")
    _check(0.0 <= raw["target_accuracy"] <= 1.0, "target_accuracy", "must lie in [0, 1]")
    d = raw["dataset"]
    _check(d["num_classes"] >= 2, "dataset.num_classes", "must be >= 2")
    _check(len(d["dim"]) == 3 and all(isinstance(v, int) and v > 0 for v in d["dim"]),
           "dataset.dim", "must be three positive integers [channels, height, width]")
    _check(d["per_class"] >= 1, "dataset.per_class", "must be >= 1")
    _check(d["test_per_class"] >= 0, "dataset.test_per_class", "must be >= 0")
    _check(d["noise_sigma"] >= 0, "dataset.noise_sigma", "must be >= 0")
    _check(d["blob_width"] > 0, "dataset.blob_width", "must be > 0")
    for i, spec in enumerate(raw["model"]["conv"]):
        _check(isinstance(spec, list) and len(spec) == 4 and all(isinstance(v, int) for v in spec),
               f"model.conv[{i}]", "must be [filters, kernel, stride, padding]")
    for i, width in enumerate(raw["model"]["hidden"]):
        _check(isinstance(width, int) and width > 0, f"model.hidden[{i}]", "must be a positive integer")

    for section, build in (("partition", lambda: PartitionSpec(seed=raw["seed"], **raw["partition"])),
                           ("federation", lambda: FedConfig(num_devices=raw["partition"]["num_devices"],
                                                            seed=raw["seed"], **raw["federation"]))):
        try:
            build().validate()
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from None

    p = raw["pruning"]
    rounds = raw["federation"]["rounds"]
    if raw["mode"] in PRUNE_MODES and p["enabled"]:
        at = p["prune_at_round"] if p["prune_at_round"] is not None else math.ceil(0.2 * rounds)
        _check(0 <= at < rounds, "pruning.prune_at_round",
               f"must lie in [0, rounds) for mode {raw['mode']} (got {at}, rounds={rounds})")
    try:
        PruneConfig(**{k: v for k, v in p.items() if k != "enabled"}).validate()
    except ValueError as exc:
        raise ConfigError("pruning", str(exc)) from None
    if p["rank_device"] is not None:
        _check(0 <= p["rank_device"] < raw["partition"]["num_devices"], "pruning.rank_device",
               "must name an existing device")


def from_dict(given: dict) -> ExperimentConfig:
    raw = _merge(DEFAULTS, given or {})
    _validate(raw)
    return ExperimentConfig(raw)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            given = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from None
    return from_dict(given or {})


def dump_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
