#!/usr/bin/env python3
"""Sweep ProReg's alpha and report the ID/OOD trade-off per grid point.

    python scripts/alpha_sweep.py --grid 0.5,1,2,4,8 --sigma 0.2
"""

import argparse
import sys

from proreg import harness


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="0.5,1,2,4,8")
    ap.add_argument("--sigma", type=float, default=harness.OracleConfig().sigma,
                    help="oracle embedding blur")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="results/alpha_sweep.csv")
    ap.add_argument("--jobs", type=int, default=None)
    args = ap.parse_args(argv)

    grid = [float(v) for v in args.grid.split(",")]
    template = harness.default_config(oracle=harness.OracleConfig(sigma=args.sigma),
                                      seeds=tuple(range(args.seeds)))
    rows = harness.sweep(template, "alpha", grid, args.jobs)
    out = harness.write_results(harness.resolve_output(args.out, "alpha_sweep.csv"), rows)
    print(f"{'alpha':>6}  {'ID':>7}  {'OOD':>7}  {'HM':>7}")
    for s in harness.aggregate(rows):
        m = s.mean
        print(f"{s.param_value:6g}  {m['id_accuracy']:.4f}  {m['ood_accuracy']:.4f}  {m['harmonic_mean']:.4f}")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
