"""Canned LeNet experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path

from .data import load_mnist
from .pipeline import LoopConfig, LoopResult, run_loop

REPO_ROOT = Path(__file__).resolve().parents[2]


def mnist_dir() -> Path:
    """``$NETTRIM_MNIST_DIR`` if set, else ``<repo>/data/mnist``."""
    return Path(os.environ.get("NETTRIM_MNIST_DIR", REPO_ROOT / "data" / "mnist"))


def runs_dir() -> Path:
    return Path(os.environ.get("NETTRIM_RUNS_DIR", REPO_ROOT / "runs"))


def lenet_loop_config(out_dir, iterations: int = 5, init_mode: str = "ancestor_weights",
                      **overrides) -> LoopConfig:
    return LoopConfig(iterations=iterations, init_mode=init_mode, out_dir=str(out_dir), **overrides)


def init_ablation(root=None, iterations: int = 3, data=None,
                  scratch_full_schedule: bool = False) -> tuple[LoopResult, LoopResult]:
    """Run the loop with and without ancestor-weight init from a shared baseline.

    Both runs resume from whatever is already on disk under ``root``.  The
    from-scratch run has no accuracy floor: it is a measurement, not a guard.
    With ``scratch_full_schedule`` the from-scratch arm retrains with the
    baseline recipe instead of the shorter retrain schedule, in its own directory.
    """
    root = Path(root or runs_dir() / "lenet")
    train_full, test = data if data is not None else load_mnist(mnist_dir())
    with_init = run_loop(lenet_loop_config(root / "ancestor_weights", iterations), train_full, test)
    base_ckpt = with_init.checkpoints[0]
    name, extra = "from_scratch", {}
    if scratch_full_schedule:
        name = "from_scratch_full_schedule"
        extra["retrain"] = dataclasses.replace(LoopConfig().train, seed=LoopConfig().retrain.seed)
    without = run_loop(
        lenet_loop_config(root / name, iterations, "from_scratch",
                          baseline_checkpoint=str(base_ckpt), accuracy_floor=100.0, **extra),
        train_full, test)
    return with_init, without
