"""Self-convergence study: errors and EOCs of levels below the reference.

    python scripts/run_convergence.py --levels 0,1,2,3 --T 0.5 --out runs/conv
"""
import argparse
import logging
import sys
import time
from pathlib import Path

from chns.analysis import MODES, self_convergence_study
from chns.solver import NewtonSettings


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--levels", default="0,1,2,3")
    ap.add_argument("--reference", type=int, default=None)
    ap.add_argument("--T", type=float, default=0.5)
    ap.add_argument("--modes", default=",".join(MODES), help="time comparison modes")
    ap.add_argument("--full-newton", action="store_true", help="refactor the Jacobian every iteration")
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    levels = [int(v) for v in args.levels.split(",")]
    modes = tuple(args.modes.split(","))
    newton = NewtonSettings(reuse_jacobian=not args.full_newton)
    t0 = time.time()
    reports = self_convergence_study(levels, args.reference, T=args.T, newton=newton, modes=modes)
    for mode, rep in reports.items():
        sys.stdout.write(rep.to_text() + "\n")
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            rep.to_csv(out / f"eoc_{mode}.csv")
            (out / f"eoc_{mode}.txt").write_text(rep.to_text())
    print(f"wall time {time.time() - t0:.0f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
