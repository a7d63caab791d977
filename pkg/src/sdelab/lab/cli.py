"""Command-line entry point.

Subcommands: one per canned experiment (certify, mollify, flow, density,
fpe), plus `run <config.json>` and `validate <config.json>`.  Output root
comes from --out or the SDELAB_OUTPUT environment variable (default
./sdelab-out).  Exit codes: 0 all PASS, 1 any FAIL, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import EXPERIMENTS, ExperimentConfig, default_config, validate
from .experiments import run
from .reporting import write_report

_SUBCOMMAND_TO_EXPERIMENT = {
    "certify": "osgood-certify",
    "mollify": "mollify-ladder",
    "flow": "flow-cauchy",
    "density": "density-bound",
    "fpe": "fpe-duality",
}

_QUICK_OVERRIDES = {
    "osgood-certify": {("certify", "n_pairs"): 5_000},
    "mollify-ladder": {},
    "flow-cauchy": {("n_particles",): 500, ("n_paths",): 16,
                    ("n_steps",): 128},
    "density-bound": {("contracting", "n_particles"): 2_000,
                      ("contracting", "n_paths"): 32,
                      ("rotation", "n_particles"): 2_000,
                      ("rotation", "n_paths"): 24},
    "fpe-duality": {("ou", "n_particles"): 2_000, ("ou", "n_paths"): 16,
                    ("vseries", "n_particles"): 2_000,
                    ("vseries", "n_paths"): 16},
}


def _apply_overrides(cfg: ExperimentConfig, overrides: dict) -> None:
    for keys, value in overrides.items():
        node = cfg.data
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value


def _output_dir(args, cfg: ExperimentConfig) -> Path:
    root = args.out or os.environ.get("SDELAB_OUTPUT") or "sdelab-out"
    return Path(root) / f"{cfg.experiment}-{cfg.hash()}"


def _execute(cfg: ExperimentConfig, args) -> int:
    findings = validate(cfg)
    if findings:
        print("configuration error:", file=sys.stderr)
        for f in findings:
            print(f"  - {f}", file=sys.stderr)
        return 2
    report = run(cfg)
    outdir = _output_dir(args, cfg)
    written = write_report(report, outdir, make_plots=not args.no_plots)
    for v in report.verdicts:
        status = "PASS" if v["passed"] else "FAIL"
        print(f"[{status}] {v['name']}: value={v['value']} tol={v['tolerance']}")
    print(f"report: {written['report']}")
    if report.failure:
        print(f"partial report, failure: {report.failure}", file=sys.stderr)
        return 1
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdelab",
        description="Numerical experiments on SDE flows with rough drift")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output root (default $SDELAB_OUTPUT or ./sdelab-out)")
    common.add_argument("--seed", type=int, default=20240901)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--quick", action="store_true",
                        help="scaled-down sizes for a fast smoke run")
    common.add_argument("--no-plots", action="store_true")

    for name, exp in _SUBCOMMAND_TO_EXPERIMENT.items():
        p = sub.add_parser(name, parents=[common],
                           help=f"run the {exp} experiment with defaults")
        p.set_defaults(experiment=exp)

    p_run = sub.add_parser("run", parents=[common],
                           help="run an experiment from a config file")
    p_run.add_argument("config", type=Path)

    p_val = sub.add_parser("validate", help="statically validate a config file")
    p_val.add_argument("config", type=Path)

    args = parser.parse_args(argv)

    if args.command == "validate":
        try:
            cfg = ExperimentConfig.from_file(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"configuration error: cannot read config: {exc}",
                  file=sys.stderr)
            return 2
        findings = validate(cfg)
        if findings:
            print("configuration error:", file=sys.stderr)
            for f in findings:
                print(f"  - {f}", file=sys.stderr)
            return 2
        print("config ok")
        return 0

    if args.command == "run":
        try:
            cfg = ExperimentConfig.from_file(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"configuration error: cannot read config: {exc}",
                  file=sys.stderr)
            return 2
        cfg.data.setdefault("workers", args.workers)
        return _execute(cfg, args)

    cfg = default_config(args.experiment, seed=args.seed, workers=args.workers)
    if args.quick:
        _apply_overrides(cfg, _QUICK_OVERRIDES[args.experiment])
    return _execute(cfg, args)


if __name__ == "__main__":
    sys.exit(main())
