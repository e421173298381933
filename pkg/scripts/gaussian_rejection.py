"""Fraction of neurons the mean + k*std rule rejects on synthetic APoZ samples."""

import argparse

import numpy as np

from nettrim.surgery import select_layer


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("-n", type=int, default=10_000, help="neurons per sample")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rng = np.random.default_rng(args.seed)
    samplers = {
        "normal": lambda: rng.normal(size=args.n),
        "uniform": lambda: rng.uniform(size=args.n),
        "beta(2,5)": lambda: rng.beta(2, 5, size=args.n),
    }
    print(f"{'distribution':<12}" + "".join(f"{'k=' + str(k):>10}" for k in (0.5, 1.0, 1.5, 2.0)))
    for name, draw in samplers.items():
        samples = [draw() for _ in range(args.trials)]
        row = []
        for k in (0.5, 1.0, 1.5, 2.0):
            frac = np.mean([len(select_layer(a, k)[0]) / args.n for a in samples])
            row.append(f"{100 * frac:>9.2f}%")
        print(f"{name:<12}" + "".join(row))


if __name__ == "__main__":
    main()
