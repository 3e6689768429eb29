#!/usr/bin/env python3
"""KD and ensemble lambda sweeps, each next to ProReg at the default alpha.

    python scripts/lambda_sweeps.py --out-dir results
"""

import argparse
import sys
from pathlib import Path

from proreg import harness


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="0,0.25,0.5,0.75,1")
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--jobs", type=int, default=None)
    args = ap.parse_args(argv)

    grid = [float(v) for v in args.grid.split(",")]
    template = harness.default_config()
    proreg_rows = harness.run_experiment(template, args.jobs)
    pr = harness.aggregate(proreg_rows)[0]
    for param in ("kd_lambda", "ensemble_lambda"):
        rows = harness.sweep(template, param, grid, args.jobs) + proreg_rows
        out = harness.write_results(
            harness.resolve_output(str(Path(args.out_dir) / f"{param}_sweep.csv"), ""), rows)
        print(f"== {param} (ProReg alpha={pr.param_value:g}: HM {pr.mean['harmonic_mean']:.4f})")
        for s in harness.aggregate(rows):
            if s.method != "proreg":
                print(f"  lambda={s.param_value:<5g} ID {s.mean['id_accuracy']:.4f}  "
                      f"OOD {s.mean['ood_accuracy']:.4f}  HM {s.mean['harmonic_mean']:.4f}")
        print(f"  wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
