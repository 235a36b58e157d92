"""Command line front end for the pipeline stages.

Exit codes: 0 success, 2 configuration problems, 3 numerical failures,
4 artifact problems (missing, stale, or corrupt files).
"""

import argparse
import sys

from .errors import (ArtifactError, ConfigError, ConvergenceRegimeError,
                     DegenerateDataError, MaterialDataError, StepFailureError)
from .pipeline import STAGES, RunConfig, run_pipeline, verify_artifacts

EXIT_CONFIG = 2
EXIT_NUMERICS = 3
EXIT_ARTIFACTS = 4

_STAGE_HELP = {
    "simulate": "run the thermal simulation (laser pass and quiet control)",
    "mechanics": "run the mechanical solve on the stored temperatures",
    "sample": "extract the read-out lattice dataset from the trajectories",
    "train": "train the temperature and stress surrogates",
    "predict": "write surrogate predictions for the stored scenario",
    "evaluate": "score the surrogates and write evaluation.txt",
    "report": "write probe traces, field snapshots, and loss curves",
    "bench": "time chained inference against the simulator",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dedrom",
        description="Laser DED thermo-mechanical simulation with a "
                    "latent-ODE surrogate.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=_STAGE_HELP[name])
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", default="run",
                       help="output directory (default: run)")
        p.add_argument("--force", action="store_true",
                       help="replace artifacts built under another config")
        p.add_argument("--seed", type=int,
                       help="override train.seed")
        p.add_argument("--latent", type=int,
                       help="override train.n_l")
        p.add_argument("--full-scale", action="store_true",
                       help="use the refined grid and the 1836-point lattice")
        p.add_argument("--quiet", action="store_true",
                       help="suppress progress output")
    v = sub.add_parser("verify",
                       help="recompute artifact hashes against the manifest")
    v.add_argument("--out", default="run")
    v.add_argument("--stage", help="verify one stage instead of all")
    return parser


def _progress_printer(stage):
    state = {"last": -1}

    def progress(*args):
        if len(args) == 3 and isinstance(args[0], int):
            k, last, _ = args
            percent = int(100 * k / max(last, 1))
            if percent // 10 > state["last"] // 10 or k == last:
                state["last"] = percent
                print(f"[{stage}] {percent:3d}%", file=sys.stderr)
        elif args and isinstance(args[0], dict):
            row = args[0]
            note = row.get("error", "")
            print(f"[{stage}] n_l={row.get('n_l')} {note}", file=sys.stderr)

    return progress


def _run_stage_command(args):
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.latent is not None:
        overrides["train.n_l"] = args.latent
    cfg = RunConfig.build(config_path=args.config, overrides=overrides,
                          full_scale=args.full_scale)
    progress = None if args.quiet else _progress_printer(args.command)
    results = run_pipeline(cfg, [args.command], args.out, force=args.force,
                           progress=progress)
    for stage, outcome in results.items():
        print(f"{stage}: {outcome}")
    return 0


def _run_verify(args):
    report = verify_artifacts(args.out, stage=args.stage)
    for stage, artifacts in report.items():
        for name, status in artifacts.items():
            print(f"{stage}: {name}: {status}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return _run_verify(args)
        return _run_stage_command(args)
    except (ConfigError, MaterialDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepFailureError, ConvergenceRegimeError,
            DegenerateDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACTS


if __name__ == "__main__":
    sys.exit(main())
