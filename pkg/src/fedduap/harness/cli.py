"""Command line: ``fedduap run | compare | inspect-model``."""

from __future__ import annotations

import argparse
import json
import sys
import warnings

from ..nnkernel import load_model
from ..pruner import flops_count
from .config import ConfigError, load_config
from .report import compare_report
from .runner import run_experiment


def _error(exc, code) -> int:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        rec["key"] = exc.key
    print(json.dumps(rec), file=sys.stderr)
    return code


def _run(args) -> int:
    config = load_config(args.config).replace(seed=args.seed, mode=args.mode, out=args.out,
                                              workers=args.workers)
    result = run_experiment(config)
    print(json.dumps(result.summary.to_dict()))
    return 0


def _compare(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        text, table = compare_report(args.summaries)
    for w in caught:
        print(json.dumps({"warning": w.category.__name__, "message": str(w.message)}), file=sys.stderr)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(table)
    sys.stdout.write(text)
    return 0


def _inspect(args) -> int:
    model = load_model(args.path)
    layers = []
    for i, (layer, shape) in enumerate(zip(model.layers, model.shapes[1:])):
        layers.append({"index": i, "kind": layer.kind, **layer.dims(), "output_shape": list(shape)})
    print(json.dumps({
        "input_shape": list(model.input_shape),
        "parameters": model.parameter_count(),
        "mflops_per_sample": flops_count(model),
        "layers": layers,
    }, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedduap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--mode")
    run.add_argument("--out")
    run.add_argument("--workers", type=int)
    run.set_defaults(func=_run)

    cmp_ = sub.add_parser("compare", help="tabulate two or more summary.json files")
    cmp_.add_argument("summaries", nargs="+")
    cmp_.add_argument("--csv", help="also write the table as CSV")
    cmp_.set_defaults(func=_compare)

    insp = sub.add_parser("inspect-model", help="describe a saved model")
    insp.add_argument("path")
    insp.set_defaults(func=_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _error(exc, 2)
    except (OSError, ValueError, KeyError) as exc:
        return _error(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
