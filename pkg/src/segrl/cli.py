"""Command line entry point: ``segrl {train,simulate,clean,eval}``.

Exit status is 0 on success, 1 for configuration or input problems and 2 for
failures during a run (for example a non-finite update).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__, harness
from .config import RunConfig, load_config
from .errors import ConfigError, InputError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segrl", description="Segment-rollout RL harness on a toy policy.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file (defaults are used when omitted)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", required=True, help="output directory")
        return p

    common(sub.add_parser("train", help="warm start, then RL with segment rollouts"))
    common(sub.add_parser("simulate", help="throughput cost model over segment counts"))
    clean = common(sub.add_parser("clean", help="filter a JSONL dataset"))
    clean.add_argument("--input", help="JSONL file; overrides [pipeline] input")
    ev = common(sub.add_parser("eval", help="avg@k accuracy of a parameter snapshot"))
    ev.add_argument("--params", help=".npz snapshot; overrides [eval] params")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def run(args) -> dict:
    cfg = _config(args)
    if args.command == "train":
        return harness.cmd_train(cfg, args.out)
    if args.command == "simulate":
        return harness.cmd_simulate(cfg, args.out)
    if args.command == "clean":
        return harness.cmd_clean(cfg, args.out, args.input)
    return harness.cmd_eval(cfg, args.out, args.params)


def _brief(command: str, result: dict) -> str:
    if command == "train":
        return json.dumps({"eval_initial": result.get("eval_initial"), "eval_final": result.get("eval_final")})
    if command == "simulate":
        return json.dumps(result["speedups"])
    if command == "clean":
        return json.dumps({k: result[k] for k in ("input", "retained", "removed")})
    return json.dumps({"accuracy": result["accuracy"], "k": result["k"]})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except ConfigError as exc:
        problems = getattr(exc, "problems", None) or [str(exc)]
        print("config error:", file=sys.stderr)
        for p in problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a run failure
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{args.command}: wrote {Path(args.out)} {_brief(args.command, result)}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
