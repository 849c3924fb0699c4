"""Bayes-factor cross-validation of a true calibration and a false one on synthetic data.

For each seed the first calibration is removed, one posterior chain and one
prior chain are run without it, and 2 log B is computed both for the true
interval and for a lower bound ``--shift-sd`` posterior standard deviations
above the true age.  Values above 5 flag conflict.
"""

import argparse
import json
import sys
from pathlib import Path

from sdollo.experiments import StudyConfig, XvalResult, xval_run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=StudyConfig.iterations)
    ap.add_argument("--prior-iterations", type=int, default=StudyConfig.prior_iterations)
    ap.add_argument("--thin", type=int, default=StudyConfig.thin)
    ap.add_argument("--shift-sd", type=float, default=4.0)
    ap.add_argument("--mu-bounds", type=float, nargs=2, default=StudyConfig.mu_bounds)
    ap.add_argument("--out", default="results/xval")
    args = ap.parse_args(argv)

    cfg = StudyConfig(
        iterations=args.iterations, prior_iterations=args.prior_iterations, thin=args.thin,
        mu_bounds=tuple(args.mu_bounds),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "shift_sd": args.shift_sd}, indent=2) + "\n")
    table = out / "xval.tsv"
    table.write_text(XvalResult.HEADER + "\n")
    results = []
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        r = xval_run(seed, cfg, args.shift_sd)
        results.append(r)
        with open(table, "a") as fh:
            fh.write(r.row() + "\n")
        print(r.row(), flush=True)
    n = len(results)
    quiet = sum(r.true_bf < 5 for r in results)
    loud = sum(r.false_bf > 5 for r in results)
    print(f"true constraint below 5 in {quiet}/{n}; displaced constraint above 5 in {loud}/{n}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
