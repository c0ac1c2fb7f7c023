"""Command-line entry point: ``vmfer {run,toy,ablate,summarize}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .errors import ConfigurationError, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("vmfer")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmfer", description="vMF experience resampling laboratory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required: bool):
        sp.add_argument("config", nargs="+" if config_required else "*", type=Path,
                        help="INI config file(s); later files override earlier ones")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--output-dir", type=Path, help="output directory (default from config)")

    run = sub.add_parser("run", help="train every seed of an experiment")
    common(run, True)
    run.add_argument("--workers", type=int, default=1, help="parallel seed workers")

    toy = sub.add_parser("toy", help="reproduce the two-critic toy study")
    common(toy, False)

    abl = sub.add_parser("ablate", help="UTD-ratio or ensemble-size ablation")
    abl.add_argument("kind", type=str.upper, choices=sorted(harness.ABLATION_GRIDS))
    common(abl, True)
    abl.add_argument("--grid", type=lambda s: [int(v) for v in s.split(",")], help="comma-separated grid")
    abl.add_argument("--variants", type=lambda s: s.split(","), help="comma-separated sampler modes")

    summ = sub.add_parser("summarize", help="relative-improvement table over run directories")
    summ.add_argument("runs", nargs="+", type=Path)
    summ.add_argument("--baseline", default="uniform", help="baseline sampler mode (default uniform)")
    summ.add_argument("--output", type=Path, help="write the table as CSV")
    return p


def _dispatch(args) -> None:
    if args.command == "run":
        cfg = harness.load_experiment(args.config, args.overrides)
        out = harness.run_experiment(cfg, args.output_dir, workers=args.workers)
        print(out)
    elif args.command == "toy":
        cfg = harness.load_toy(args.config, args.overrides)
        summary = harness.run_toy_reproduction(cfg, args.output_dir)
        for name, s in summary["strategies"].items():
            print(f"{name:12s} final reward {s['final_reward_mean']:+.4f}  mean angle {s['mean_angle']:6.2f} deg")
    elif args.command == "ablate":
        cfg = harness.load_experiment(args.config, args.overrides)
        rows = harness.run_ablation(args.kind, cfg, args.grid, args.variants, args.output_dir)
        for r in rows:
            print(f"{r['variant']:18s} {r['kind']}={r['value']}: {r['final_return_mean']:.3f} "
                  f"(var {r['final_return_var']:.3f})")
    elif args.command == "summarize":
        table = harness.summarize(args.runs, args.baseline, args.output)
        print(json.dumps(table, indent=2))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (ConfigurationError, ValueError, KeyError) as exc:
        print(f"vmfer: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"vmfer: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"vmfer: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
