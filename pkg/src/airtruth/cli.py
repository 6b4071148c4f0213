"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 invalid configuration or input
file, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentConfig,
    dump_world,
    load_config,
    run_experiment,
    write_outputs,
)
from .metrics import read_truths_csv, write_tables
from .synth import DatasetError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="airtruth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write output tables")
    run.add_argument("--config", required=True, help="path to a flat key=value config file")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default=None, help="override the output directory")
    run.add_argument("--workers", type=int, default=1, help="vehicle-side thread count")

    gen = sub.add_parser("gen-world", help="dump the generated world as JSON lines")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True, help="output .jsonl path")

    met = sub.add_parser("metrics", help="recompute metric tables from truths.csv")
    met.add_argument("--in", dest="in_dir", required=True, help="run output directory")

    val = sub.add_parser("validate-config", help="check a config file and exit")
    val.add_argument("config", help="path to the config file")

    return parser


def _load(path, seed=None, out=None) -> ExperimentConfig:
    config = load_config(path)
    if seed is not None or out is not None:
        import dataclasses

        config = dataclasses.replace(
            config,
            **({"seed": seed} if seed is not None else {}),
            **({"output_dir": out} if out is not None else {}),
        )
    return config


def _cmd_run(args) -> int:
    config = _load(args.config, seed=args.seed, out=args.out)
    record = run_experiment(config, workers=args.workers)
    files = write_outputs(record, config, config.output_dir)
    print(f"wrote {', '.join(files)} to {config.output_dir}")
    print(f"config hash {record.config_hash}")
    return EXIT_OK


def _cmd_gen_world(args) -> int:
    config = _load(args.config)
    cycles = dump_world(config, args.out)
    print(f"wrote {cycles} cycles to {args.out}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    out = Path(args.in_dir)
    manifest_path = out / "manifest.json"
    truths_path = out / "truths.csv"
    if not manifest_path.is_file() or not truths_path.is_file():
        raise ConfigError(f"{args.in_dir}: missing manifest.json or truths.csv")
    manifest = json.loads(manifest_path.read_text())
    acc = read_truths_csv(truths_path, manifest["algorithms"], manifest["cycles"])
    files = write_tables(out, acc)
    print(f"recomputed {', '.join(files)} in {args.in_dir}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    config = load_config(args.config)
    print(f"ok: {len(config.algorithms)} algorithm(s), seed {config.seed}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit:  # --help
        return EXIT_OK
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gen-world":
            return _cmd_gen_world(args)
        if args.command == "metrics":
            return _cmd_metrics(args)
        if args.command == "validate-config":
            return _cmd_validate(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
