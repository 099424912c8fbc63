"""Command-line entry point.

    anchorinv simulate|invert|predict|run|select-anchors --config FILE [--seed S] [--out DIR]
              [--threads T] [--dry-run] [--dump-clouds]
    anchorinv diagnose [RUN_DIR | --out RUN_DIR]

``--config demo`` selects the bundled 16 x 16 Darcy benchmark.
Exit codes: 0 ok, 2 config error, 3 numerical error, 4 inference failure.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import experiment
from .config import ExperimentConfig, demo_config_path
from .errors import ConfigError, InferenceFailure, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INFERENCE = 4

RUN_COMMANDS = ("simulate", "invert", "predict", "run", "select-anchors")


def exit_code(exc):
    if isinstance(exc, experiment.StageError):
        exc = exc.error
    if isinstance(exc, InferenceFailure):
        return EXIT_INFERENCE
    if isinstance(exc, (NumericalError, ArithmeticError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (ConfigError, ValueError, OSError, KeyError, TypeError)):
        return EXIT_CONFIG
    return 1


def build_parser():
    parser = argparse.ArgumentParser(prog="anchorinv", description="Anchored stochastic inversion experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "generate the synthetic truth and data",
        "invert": "simulate, then sample and weight candidates",
        "predict": "posterior-predictive fields; reuses candidates.csv in --out when present",
        "run": "simulate, invert and predict in one go",
        "select-anchors": "choose the anchor count by predictive stability",
    }
    for name in RUN_COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="TOML experiment config, or 'demo'")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        p.add_argument("--dump-clouds", action="store_true", help="write each candidate's simulated z_b cloud")
    d = sub.add_parser("diagnose", help="report on a finished run directory")
    d.add_argument("run_dir", nargs="?", default=None)
    d.add_argument("--out", default=None, help="run directory (alternative to the positional argument)")
    return parser


def load_config(name):
    return ExperimentConfig.load(demo_config_path() if name == "demo" else name)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "diagnose":
            run_dir = args.run_dir or args.out
            if run_dir is None:
                raise ConfigError("diagnose needs a run directory")
            print(experiment.format_report(experiment.diagnose(run_dir)))
            return EXIT_OK
        config = load_config(args.config)
        seed = config.seed if args.seed is None else args.seed
        out = Path(args.out if args.out is not None else config.output_dir)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed must be >= 0")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.dry_run:
            print(experiment.plan(config, args.command, seed, args.threads, out))
            return EXIT_OK
        if args.command == "predict" and (out / "candidates.csv").is_file():
            run = experiment.predict_from_dir(out, config, seed, args.threads)
        else:
            run = experiment.execute(config, args.command, seed, out, args.threads, args.dump_clouds)
        summary = f"{args.command}: wrote {run.out}"
        if run.posterior is not None:
            summary += f" (ESS {run.posterior.ess:.1f} of {len(run.posterior)}, {run.posterior.n_degenerate} degenerate)"
        print(summary)
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = exit_code(exc)
        if code == 1:
            raise
        print(f"anchorinv: error: {exc}", file=sys.stderr)
        return code


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
