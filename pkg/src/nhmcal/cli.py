"""Command-line front end: ``nhmcal <subcommand> [options]``.

Exit codes are 0 on success, 2 when inputs, configuration or artifacts fail
validation and 3 when a numerical step fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import pipeline
from .emulator import EmulatorError
from .sampler import CalibrationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

DEFAULT_MANIFEST = "nhmcal-run/manifest.json"


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding the default configuration")
    common.add_argument("--manifest", default=DEFAULT_MANIFEST,
                        help=f"run manifest; artifacts live beside it (default {DEFAULT_MANIFEST})")
    common.add_argument("--seed", type=_seed, help="master seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="nhmcal", description="Calibrate a stochastic natural "
                                     "history model against aggregate target data.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synthesize-target", parents=[common], help="simulate target data at the truth")
    wave = sub.add_parser("wave", parents=[common], help="run one input-space reduction wave")
    wave.add_argument("--wave", type=int, required=True, help="wave index, starting at 0")
    sub.add_parser("emulate", parents=[common], help="fit the log-likelihood emulator")
    sub.add_parser("calibrate", parents=[common], help="iterate to a weighted calibrated sample")
    rw = sub.add_parser("reweight", parents=[common], help="calibrated sample under other fractions")
    rw.add_argument("--lambda", dest="lam", type=float, nargs=4, required=True,
                    metavar=("L1", "L2", "L3", "L4"), help="discrepancy fractions per data type")
    rw.add_argument("--resample-seed", type=_seed, nargs="+",
                    help="seed for resampling (default: the calibrate stage's)")
    sub.add_parser("report", parents=[common], help="write plot series and a summary")
    return parser


def _open_run(args) -> pipeline.Run:
    config = None
    if args.config is not None or args.seed is not None:
        config = pipeline.load_config(args.config, seed=args.seed)
    elif args.command == "synthesize-target" and not Path(args.manifest).exists():
        config = pipeline.load_config()
    if args.command != "synthesize-target" and not Path(args.manifest).exists():
        raise pipeline.ArtifactError(f"manifest not found: {args.manifest} (run synthesize-target first)")
    return pipeline.Run(args.manifest, config)


def _dispatch(args):
    run = _open_run(args)
    if args.command == "synthesize-target":
        return {"target": pipeline.cmd_synthesize_target(run)}
    if args.command == "wave":
        entry = pipeline.cmd_wave(run, args.wave)
        return {k: entry[k] for k in ("index", "n_points", "volume_fraction", "region_out")}
    if args.command == "emulate":
        return {"emulator": pipeline.cmd_emulate(run)}
    if args.command == "calibrate":
        return pipeline.cmd_calibrate(run)
    if args.command == "reweight":
        seed = tuple(args.resample_seed) if args.resample_seed else None
        return pipeline.cmd_reweight(run, args.lam, seed=seed)
    if args.command == "report":
        summary = pipeline.cmd_report(run)
        return {k: summary[k] for k in ("covers_truth", "ess", "n_unique", "min_fraction_within_bounds")}
    raise AssertionError(args.command)  # pragma: no cover


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(all="ignore"):
            result = _dispatch(args)
    except (EmulatorError, CalibrationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"nhmcal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError, jsonschema.ValidationError) as exc:
        print(f"nhmcal: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps(pipeline._to_jsonable(result), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
