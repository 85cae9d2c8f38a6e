#!/usr/bin/env python3
"""Reproduce the empirical convergence-rate table at desk scale.

Runs both gamma configurations through the CLI, then prints the fitted
slopes next to the reference targets.  Pass --paper-scale to switch to
r = 1000 and K = 10000 (hours of compute, not for CI), and --workers N to
parallelize across process workers.
"""

import argparse
import csv
import sys
from pathlib import Path

from noisysde.cli import main as cli_main

HERE = Path(__file__).resolve().parent

# (config file, schedule label, target slope or band description)
TARGETS = [
    ("table1_gamma02.toml", "d1=0.0,d2=0.0", "~ 0.55"),
    ("table1_gamma02.toml", "d1=0.1,d2=0.1", "< 0 (error grows)"),
    ("table1_gamma02.toml", "d1=n^-0.5,d2=n^-0.5", "~ 0.48"),
    ("table1_gamma02.toml", "d1=1.0,d2=0.0", "~ 0.54"),
    ("table1_gamma02.toml", "d1=0.0,d2=0.02", "~ 0.23 (degrading)"),
    ("table1_gamma01.toml", "d1=0.0,d2=0.0", "~ 0.54"),
    ("table1_gamma01.toml", "d1=0.1,d2=0.1", "< 0 (error grows)"),
    ("table1_gamma01.toml", "d1=n^-0.5,d2=n^-0.5", "~ 0.48"),
    ("table1_gamma01.toml", "d1=1.0,d2=0.0", "~ 0.52"),
]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--paper-scale", action="store_true")
    parser.add_argument("--outdir", default="out")
    args = parser.parse_args()

    rates = {}
    for config in ("table1_gamma02.toml", "table1_gamma01.toml"):
        outdir = Path(args.outdir) / config.removesuffix(".toml")
        argv = [
            "convergence", str(HERE / config),
            "--outdir", str(outdir),
            "--workers", str(args.workers),
            "--plot", "errors.svg",
            "-v",
        ]
        if args.paper_scale:
            argv.append("--paper-scale")
        code = cli_main(argv)
        if code != 0:
            return code
        with open(outdir / "rates.csv", newline="") as fh:
            for row in list(csv.DictReader(fh)):
                rates[(config, row["delta-schedule"])] = float(row["slope"])

    print()
    print(f"{'config':22s} {'schedule':22s} {'slope':>8s}   target")
    for config, label, target in TARGETS:
        slope = rates.get((config, label))
        shown = f"{slope:+.3f}" if slope is not None else "   -"
        print(f"{config:22s} {label:22s} {shown:>8s}   {target}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
