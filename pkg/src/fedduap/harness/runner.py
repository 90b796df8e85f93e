"""Seeded end-to-end experiments and their metrics files."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass

from ..datagen import generate_synthetic, global_distribution, partition, save_manifest
from ..fedcore import DeviceState, ServerState, evaluate, run_round
from ..nnkernel import init_model, save_model
from ..pruner import fedap, fixed_rate_prune, flops_count
from .config import ExperimentConfig, dump_config

ROUND_COLUMNS = ["round", "server_accuracy", "test_accuracy", "loss", "tau_eff", "selected",
                 "device_mflops", "device_seconds", "mflops_per_sample"]
NAN = "NaN"  # time-to-target when the target is never reached


@dataclass
class SummaryReport:
    mode: str
    seed: int
    rounds: int
    final_accuracy: float
    final_loss: float
    target_accuracy: float
    rounds_to_target: int | str
    seconds_to_target: float | str
    total_device_seconds: float
    mflops_pre: float
    mflops_post: float
    prune_round: int | None
    plan_digest: str | None
    dataset_digest: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_records(cls, records, *, mode, seed, final, target, mflops_pre, mflops_post, prune_round,
                     plan_digest, dataset_digest) -> "SummaryReport":
        """Summarize a RoundRecord stream; ``final`` is the EvalResult of the last model."""
        elapsed = 0.0
        hit_round, hit_secs = NAN, NAN
        for rec in records:
            elapsed += rec.device_seconds
            if hit_round == NAN and rec.test_accuracy is not None and rec.test_accuracy >= target:
                hit_round, hit_secs = rec.round + 1, elapsed
        return cls(mode=mode, seed=seed, rounds=len(records), final_accuracy=final.accuracy,
                   final_loss=final.loss, target_accuracy=target, rounds_to_target=hit_round,
                   seconds_to_target=hit_secs, total_device_seconds=elapsed, mflops_pre=mflops_pre,
                   mflops_post=mflops_post, prune_round=prune_round, plan_digest=plan_digest,
                   dataset_digest=dataset_digest)


@dataclass
class ExperimentResult:
    records: list
    summary: SummaryReport
    plan: object  # PruningPlan or None
    model: object


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=False, allow_nan=False)


def plan_digest(plan_dict: dict) -> str:
    return hashlib.sha256(json.dumps(plan_dict, sort_keys=True).encode()).hexdigest()[:16]


class MetricsWriter:
    """Ordered, flushed-as-you-go JSON-lines + CSV sink; wall clock goes to a separate file."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self._jsonl = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        self._csv_fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        self._csv = csv.writer(self._csv_fh, lineterminator="\n")
        self._csv.writerow(ROUND_COLUMNS)
        self._wall = open(os.path.join(out_dir, "wall_clock.jsonl"), "w")

    def _event(self, doc):
        self._jsonl.write(_dumps(doc) + "\n")
        self._jsonl.flush()

    def round(self, rec):
        d = rec.to_dict()
        self._event({"event": "round", **d})
        row = [d[c] for c in ROUND_COLUMNS]
        row[ROUND_COLUMNS.index("selected")] = " ".join(str(k) for k in d["selected"])
        self._csv.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
        self._csv_fh.flush()
        self._wall.write(_dumps({"round": rec.round, "wall_seconds": rec.wall_seconds}) + "\n")
        self._wall.flush()

    def plan(self, round_, plan_dict, digest, wall):
        self._event({"event": "pruning_plan", "round": round_, "digest": digest, **plan_dict})
        self._wall.write(_dumps({"pruning_round": round_, "wall_seconds": wall}) + "\n")

    def summary(self, summary: SummaryReport):
        self._event({"event": "summary", **summary.to_dict()})

    def error(self, exc):
        self._event({"event": "error", "type": type(exc).__name__, "message": str(exc)})

    def close(self):
        for fh in (self._jsonl, self._csv_fh, self._wall):
            fh.close()


def build_data(config: ExperimentConfig):
    d = config.raw["dataset"]
    common = dict(num_classes=d["num_classes"], dim=tuple(d["dim"]), noise_sigma=d["noise_sigma"],
                  seed=config.seed, blob_width=d["blob_width"])
    train = generate_synthetic(per_class=d["per_class"], **common)
    test = None
    if d["test_per_class"]:
        # same class templates, independent noise
        test = generate_synthetic(per_class=d["test_per_class"], noise_seed=config.seed + 1000, **common)
    return train, test


def run_experiment(config: ExperimentConfig, out_dir=None, write=True) -> ExperimentResult:
    """Run ``config.rounds`` rounds in ``config.mode``; prune once in the pruning modes.

    With ``write`` the output directory receives metrics.jsonl, metrics.csv,
    summary.json, effective_config.yaml, wall_clock.jsonl, the partition
    manifest, the final model and, when pruning ran, pruning_plan.json and
    pruned_model.json.
    """
    out_dir = out_dir or config.out
    train, test = build_data(config)
    part = partition(train, config.partition_spec())
    devices = [DeviceState(i, d) for i, d in enumerate(part.devices)]
    global_dist = global_distribution([d.dist for d in devices], [d.n for d in devices])
    d = config.raw["dataset"]
    initial = init_model(tuple(d["dim"]), config.conv_specs(), d["num_classes"], seed=config.seed,
                         hidden=tuple(config.raw["model"]["hidden"]))
    fed = config.fed_config()
    prune_cfg = config.prune_config()
    round_mode = "feddu" if config.mode in ("feddu", "fedduap") else "fedavg"
    prune_at = config.prune_at_round
    eval_set = test if test is not None else train

    writer = None
    if write:
        os.makedirs(out_dir, exist_ok=True)
        dump_config(config, os.path.join(out_dir, "effective_config.yaml"))
        save_manifest(part, os.path.join(out_dir, "partition.json"), seed=config.seed,
                      dataset_digest=train.digest())
        writer = MetricsWriter(out_dir)

    state = ServerState(0, initial, part.server, global_dist)
    records, plan, plan_dict, digest = [], None, None, None
    mflops_pre = mflops_post = flops_count(initial)
    try:
        for t in range(config.rounds):
            if t == prune_at:
                started = time.perf_counter()
                if config.mode == "fixed-rate-prune":
                    pruned, plan = fixed_rate_prune(state.model, part.server, devices, prune_cfg)
                else:
                    pruned, plan = fedap(state.model, initial, part.server, devices, global_dist, prune_cfg,
                                         workers=fed.workers)
                plan_dict = plan.to_dict()
                digest = plan_digest(plan_dict)
                mflops_post = flops_count(pruned)
                state = ServerState(state.round, pruned, state.data, state.global_dist, state.dist)
                if writer:
                    writer.plan(t, plan_dict, digest, time.perf_counter() - started)
                    save_model(pruned, os.path.join(out_dir, "pruned_model.json"))
                    with open(os.path.join(out_dir, "pruning_plan.json"), "w") as fh:
                        json.dump({"round": t, "digest": digest, **plan_dict}, fh, indent=1)
            state, rec = run_round(state, devices, fed, round_mode, test)
            records.append(rec)
            if writer:
                writer.round(rec)

        final = evaluate(state.model, eval_set)
        summary = SummaryReport.from_records(
            records, mode=config.mode, seed=config.seed, final=final, target=config.target_accuracy,
            mflops_pre=mflops_pre, mflops_post=mflops_post, prune_round=prune_at if plan else None,
            plan_digest=digest, dataset_digest=train.digest())
        if writer:
            writer.summary(summary)
            with open(os.path.join(out_dir, "summary.json"), "w") as fh:
                json.dump(summary.to_dict(), fh, indent=1)
            save_model(state.model, os.path.join(out_dir, "final_model.json"))
    except BaseException as exc:
        if writer:
            writer.error(exc)
        raise
    finally:
        if writer:
            writer.close()
    return ExperimentResult(records, summary, plan, state.model)


def seconds_to_target(summary: dict) -> float:
    s = summary["seconds_to_target"]
    return math.inf if s == NAN else float(s)
