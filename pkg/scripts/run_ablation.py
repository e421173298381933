"""Weight-initialization ablation: FC1 APoZ statistics with and without ancestor weights.

Both arms start from the same trained baseline.  Results land in runs/lenet and
the side-by-side table is also written to runs/lenet/ablation.csv
(ablation_full_schedule.csv with --scratch-full-schedule).
"""

import argparse
import logging

from nettrim.experiments import init_ablation, runs_dir
from nettrim.pipeline import ablation_report, table2


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iterations", type=int, default=3, help="iterations including the baseline")
    p.add_argument("--layer", default="fc1")
    p.add_argument("--scratch-full-schedule", action="store_true",
                   help="retrain the from-scratch arm with the baseline recipe (20 epochs)")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    root = runs_dir() / "lenet"
    with_init, without = init_ablation(root, args.iterations,
                                       scratch_full_schedule=args.scratch_full_schedule)
    print(table2(with_init.reports))
    print()
    table = ablation_report(with_init.reports, without.reports, args.layer)
    print(table.to_text())
    suffix = "_full_schedule" if args.scratch_full_schedule else ""
    (root / f"ablation{suffix}.csv").write_text(table.to_csv())


if __name__ == "__main__":
    main()
