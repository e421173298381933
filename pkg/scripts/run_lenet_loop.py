"""Iterative trimming of LeNet on MNIST with ancestor-weight initialization.

Writes checkpoints, APoZ reports and summary.csv under runs/lenet/ancestor_weights
and prints the compression/accuracy table.  Rerunning resumes finished iterations.
"""

import argparse
import logging

from nettrim.data import load_mnist
from nettrim.experiments import lenet_loop_config, mnist_dir, runs_dir
from nettrim.pipeline import run_loop, table2


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iterations", type=int, default=5, help="iterations including the baseline")
    p.add_argument("--out", default=None, help="default: runs/lenet/ancestor_weights")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = args.out or runs_dir() / "lenet" / "ancestor_weights"
    train, test = load_mnist(mnist_dir())
    result = run_loop(lenet_loop_config(out, args.iterations), train, test)
    print(table2(result.reports))
    print(f"stopped: {result.stopped}")


if __name__ == "__main__":
    main()
