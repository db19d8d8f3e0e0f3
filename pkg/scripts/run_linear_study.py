"""Convergence of Y_0 to e^{aT} E(xi) for the linear driver f0 = a y.

    python3 scripts/run_linear_study.py --a 1.0 --T 0.004 --K 4 8 16 32 --out linear_study.csv
"""

import argparse
import math

from bsdefpi.oracles import heat_kernel_expectation
from bsdefpi.studies import empirical_order, linear_refinement, write_study_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--a", type=float, default=1.0)
    ap.add_argument("--T", type=float, default=0.004)
    ap.add_argument("--K", type=int, nargs="+", default=[4, 8, 16, 32])
    ap.add_argument("--out", default="linear_study.csv")
    args = ap.parse_args()

    phi = lambda x: x**2
    exact = math.exp(args.a * args.T) * heat_kernel_expectation(phi, 0.0, 0.0, args.T)
    rows = linear_refinement(args.a, args.T, phi, exact, args.K)
    write_study_csv(rows, args.out)
    for r in rows:
        print(f"K={r.K:3d}  Y0={r.Y0:.12g}  error={r.error:.3e}  [{r.source}]")
    print(f"empirical order: {empirical_order(rows):.3f}")


if __name__ == "__main__":
    main()
