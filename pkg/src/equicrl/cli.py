"""Command-line entry points: run a schedule, score a run, plot a run."""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .harness import MethodNotImplementedError


def _parse_seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip() != ""]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="equicrl",
        description="Continual RL with group-symmetric task grouping")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a schedule for one method")
    p_run.add_argument("--config", required=True, help="JSON run configuration")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seeds", default=None,
                       help="comma-separated seed list overriding the config")

    p_score = sub.add_parser("score", help="summarize a completed run")
    p_score.add_argument("run_dir")

    p_plot = sub.add_parser("plot", help="render SVG charts for a run")
    p_plot.add_argument("run_dir")

    p_cfg = sub.add_parser("write-default-config",
                           help="write a template run configuration")
    p_cfg.add_argument("path")
    p_cfg.add_argument("--method", default="covers")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = harness.load_config(args.config)
            if args.seeds is not None:
                config.seeds = _parse_seeds(args.seeds)
            out = harness.run(config, args.out)
            print(f"run complete: {out}")
        elif args.command == "score":
            result = harness.score(args.run_dir)
            print(harness.format_score_table(result))
        elif args.command == "plot":
            for path in harness.plot(args.run_dir):
                print(f"wrote {path}")
        elif args.command == "write-default-config":
            cfg = {"method": args.method, "schedule": harness.default_schedule(),
                   "seeds": [0, 1, 2], "horizon": 100,
                   "controller": {}, "ppo": {}, "extractor": {}}
            with open(args.path, "w") as fh:
                json.dump(cfg, fh, indent=1)
            print(f"wrote {args.path}")
    except MethodNotImplementedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
