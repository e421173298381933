"""``nettrim`` command line: train, stats, trim, loop, eval, report.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric fault.
Progress goes to stderr; results go to files or stdout.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

from .apoz import ApozReport, measure_apoz, resolve_target
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import find_mnist_files, load_mnist, split_stat_set
from .errors import CheckpointError, ConfigError, DataError, InputError, NumericFault, TrainingDiverged
from .nn import evaluate, init_network, train
from .pipeline import ablation_report, load_reports, run_loop, table2
from .surgery import prune, select_neurons

log = logging.getLogger("nettrim")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="TOML or JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config scalar, e.g. train.epochs=5 (repeatable)")
    p.add_argument("--seed", type=int, help="seed for network init and training shuffles")
    p.add_argument("--threads", type=int, help="BLAS thread count")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--mnist-dir", type=Path, help="directory with the four MNIST IDX files")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nettrim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the configured network on MNIST")
    _common(p)

    p = sub.add_parser("stats", help="measure APoZ of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--layers", help="comma-separated target layers (default: policy.target_layers)")
    p.add_argument("--dataset", choices=("stat", "train", "test"), default="stat")

    p = sub.add_parser("trim", help="select neurons from an APoZ report and prune a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True, help="apoz.json written by `stats`")

    p = sub.add_parser("loop", help="run the iterative trim-retrain loop")
    _common(p)

    p = sub.add_parser("eval", help="print test accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("report", help="print tables from loop output directories")
    _common(p)
    p.add_argument("run_dir", type=Path)
    p.add_argument("--compare", type=Path, help="second run (from_scratch) for the ablation table")
    p.add_argument("--layer", default="fc1")
    return parser


def _resolve(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"network.init_seed={args.seed}", f"train.seed={args.seed}",
                      f"retrain.seed={args.seed + 1}"]
    if args.mnist_dir is not None:
        overrides.append(f"data.mnist_dir={json.dumps(str(args.mnist_dir))}")
    return load_config(args.config, overrides)


def _datasets(rc: RunConfig):
    if not rc.mnist_dir:
        raise DataError("no MNIST directory given (use --mnist-dir or data.mnist_dir)")
    find_mnist_files(rc.mnist_dir)
    return load_mnist(rc.mnist_dir)


def _need_file(path: Path):
    if not Path(path).is_file():
        raise DataError(f"no such file: {path}")


def _out_dir(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    rc = _resolve(args)
    out = args.out or Path("runs/train")
    train_full, test = _datasets(rc)
    remainder, _ = split_stat_set(train_full, rc.loop.split)
    out.mkdir(parents=True, exist_ok=True)
    net = init_network(rc.loop.layers, rc.loop.input_shape, rc.loop.init_seed)
    net, history = train(net, remainder, rc.train,
                         lambda m: log.info("epoch %d loss=%.4f train_acc=%.4f", m.epoch, m.loss,
                                            m.train_accuracy))
    acc = evaluate(net, test)
    digest = save_checkpoint(net, {"epochs": rc.train.epochs, "accuracy": acc}, out / "model.ntrm")
    metrics = {"test_accuracy": acc, "checkpoint_digest": digest,
               "epochs": [dataclasses.asdict(m) for m in history]}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    print(f"test_accuracy={acc:.4f}")
    return EXIT_OK


def cmd_stats(args) -> int:
    rc = _resolve(args)
    _need_file(args.checkpoint)
    ck = load_checkpoint(args.checkpoint)
    layers = args.layers.split(",") if args.layers else list(rc.loop.policy.target_layers)
    for name in layers:
        resolve_target(ck.network, name)
    out = _out_dir(args, "runs/stats")
    train_full, test = _datasets(rc)
    remainder, stat = split_stat_set(train_full, rc.loop.split)
    data = {"stat": stat, "train": remainder, "test": test}[args.dataset]
    report = measure_apoz(ck.network, data, layers, rc.loop.stat_batch_size)
    report.write(out)
    for name, s in report.layers.items():
        log.info("%s: %d neurons, mean APoZ %.4f, std %.4f", name, s.width, s.mean, s.std)
    return EXIT_OK


def cmd_trim(args) -> int:
    rc = _resolve(args)
    _need_file(args.checkpoint)
    _need_file(args.report)
    ck = load_checkpoint(args.checkpoint)
    try:
        report = ApozReport.from_json(args.report.read_text())
    except (KeyError, ValueError) as exc:
        raise DataError(f"{args.report}: not an APoZ report ({exc})") from exc
    plan = select_neurons(report, rc.loop.policy)
    out = _out_dir(args, "runs/trim")
    (out / "plan.json").write_text(plan.to_json() + "\n")
    if plan.is_empty:
        log.warning("nothing pruned")
        shutil.copyfile(args.checkpoint, out / "trimmed.ntrm")
        return EXIT_OK
    trimmed = prune(ck.network, plan)
    meta = {"plan": plan.to_dict(), "parent": ck.digest}
    save_checkpoint(trimmed, meta, out / "trimmed.ntrm", ck.lineage + [ck.digest])
    log.info("trimmed %s -> %s", ck.network.config_string(), trimmed.config_string())
    return EXIT_OK


def cmd_loop(args) -> int:
    rc = _resolve(args)
    loop = rc.loop
    out = args.out or Path(loop.out_dir or "runs/loop")
    if loop.baseline_checkpoint:
        _need_file(loop.baseline_checkpoint)
    if not loop.policy.target_layers:
        raise ConfigError("policy.target_layers is empty")
    train_full, test = _datasets(rc)
    loop = dataclasses.replace(loop, out_dir=str(out))
    result = run_loop(loop, train_full, test)
    print(table2(result.reports))
    if result.stopped != "completed":
        log.warning("loop stopped early: %s", result.stopped)
    return EXIT_NUMERIC if result.stopped == "diverged" else EXIT_OK


def cmd_eval(args) -> int:
    rc = _resolve(args)
    _need_file(args.checkpoint)
    ck = load_checkpoint(args.checkpoint)
    _, test = _datasets(rc)
    print(f"test_accuracy={evaluate(ck.network, test):.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    if not (args.run_dir / "reports.jsonl").is_file():
        raise DataError(f"no reports.jsonl in {args.run_dir}")
    reports = load_reports(args.run_dir)
    print(table2(reports))
    if args.compare is not None:
        if not (args.compare / "reports.jsonl").is_file():
            raise DataError(f"no reports.jsonl in {args.compare}")
        table = ablation_report(reports, load_reports(args.compare), args.layer)
        print()
        print(table.to_text())
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "ablation.csv").write_text(table.to_csv())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "stats": cmd_stats, "trim": cmd_trim, "loop": cmd_loop,
            "eval": cmd_eval, "report": cmd_report}


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)
    try:
        with _threads(args.threads):
            return COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFault, TrainingDiverged) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
