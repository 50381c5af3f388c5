"""Command line entry point: ``apgp {solve,train,predict,synth,check}``.

Every config key is also a flag of the same name (nested keys with a dot, e.g.
``--test_stop.tolerance 0.01``); flags override the JSON config given with ``--config``.
Errors go to stderr as one JSON object and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import experiments
from .experiments import ExperimentConfig, StopConfig

EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _optional_str(s: str):
    return None if s.lower() in ("", "none", "null") else s


def _str_list(s: str) -> list:
    return [p.strip() for p in s.split(",") if p.strip()]


_TYPES = {bool: _bool, int: int, float: float, str: str, list: _str_list}


def _flag_specs():
    """(key, parser) for every config key, nested stop criteria flattened with a dot."""
    defaults = ExperimentConfig()
    specs = []
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(defaults, f.name)
        if isinstance(value, StopConfig):
            for g in dataclasses.fields(StopConfig):
                specs.append((f"{f.name}.{g.name}", _TYPES[type(getattr(value, g.name))]))
        elif value is None:
            specs.append((f.name, _optional_str))
        else:
            specs.append((f.name, _TYPES[type(value)]))
    return specs


class _JsonErrorParser(argparse.ArgumentParser):
    """Usage errors are reported as JSON on stderr like every other failure."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message, "command": self.prog}),
              file=sys.stderr)
        self.exit(EXIT_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonErrorParser(prog="apgp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_JsonErrorParser)
    helps = {
        "solve": "AP (per selection rule) vs CG on K W = [y - mu, probes]; trace CSVs + summary",
        "train": "train hyperparameters, predict the test split, write model and metrics",
        "predict": "predict with a saved model.json (set --model_path)",
        "synth": "write a synthetic GP-prior dataset as CSV",
        "check": "dense-oracle invariant suite on the configured system",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="JSON config file")
        for key, typ in _flag_specs():
            p.add_argument(f"--{key}", dest=key, type=typ, default=argparse.SUPPRESS,
                           metavar=key.split(".")[-1].upper())
        if name == "check":
            p.add_argument("--max_n", type=int, default=400,
                           help="use at most this many training points (dense oracles)")
            p.add_argument("--epochs", type=int, default=5)
    return parser


def _run(args) -> tuple[int, dict]:
    ns = vars(args)
    overrides = {k: ns[k] for k, _ in _flag_specs() if k in ns}
    config = experiments.load_config(args.config, overrides)
    if args.command == "solve":
        return 0, experiments.run_solver_benchmark(config)
    if args.command == "train":
        return 0, experiments.run_training(config)
    if args.command == "predict":
        return 0, experiments.run_prediction(config)
    if args.command == "synth":
        return 0, {"path": str(experiments.run_synth(config))}
    report = experiments.run_check(config, max_n=args.max_n, epochs=args.epochs)
    return (0 if report["passed"] else EXIT_CHECK_FAILED), report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code, result = _run(args)
    except Exception as err:  # noqa: BLE001 - every failure becomes an error record
        record = {"error": type(err).__name__, "message": str(err), "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(experiments._jsonable(result), sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
