"""Iterative trim-retrain loop and its reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .apoz import THRESHOLDS, ApozReport, measure_apoz
from .checkpoint import load_checkpoint, payload_digest, save_checkpoint
from .data import Dataset, SplitSpec, split_stat_set
from .errors import ConfigError, TrainingDiverged
from .nn import LayerSpec, Network, TrainConfig, LrDecay, evaluate, init_network, param_count, train
from .presets import MNIST_SHAPE, lenet
from .surgery import TrimPolicy, compression_rate, prune, select_neurons

log = logging.getLogger(__name__)

INIT_MODES = ("ancestor_weights", "from_scratch")


def default_retrain() -> TrainConfig:
    return TrainConfig(learning_rate=0.01, momentum=0.9, batch_size=64, epochs=10, seed=1,
                       lr_decay=LrDecay(0.1, 7), weight_decay=5e-4)


@dataclass
class LoopConfig:
    layers: tuple[LayerSpec, ...] = field(default_factory=lambda: tuple(lenet()))
    input_shape: tuple[int, int, int] = MNIST_SHAPE
    init_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    retrain: TrainConfig = field(default_factory=default_retrain)
    policy: TrimPolicy = field(default_factory=TrimPolicy)
    iterations: int = 5
    init_mode: str = "ancestor_weights"
    # percentage points below the baseline accuracy that end the loop
    accuracy_floor: float = 1.0
    split: SplitSpec = field(default_factory=SplitSpec)
    stat_batch_size: int = 500
    out_dir: str | None = None
    # reuse a trained iteration-0 network instead of training one
    baseline_checkpoint: str | None = None
    resume: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("loop.iterations must be >= 1")
        if self.accuracy_floor < 0:
            raise ConfigError("loop.accuracy_floor must be >= 0")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"loop.init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        self.layers = tuple(self.layers)
        self.input_shape = tuple(self.input_shape)


@dataclass
class IterationReport:
    iteration: int
    config: str
    params: int
    compression: float
    pre_accuracy: float
    post_accuracy: float
    mean_apoz: dict[str, float]
    threshold_counts: dict[str, dict[str, int]]
    widths: dict[str, int]
    pruned: dict[str, int]
    checkpoint_digest: str
    wall_time: float
    status: str = "ok"
    apoz: ApozReport | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("apoz")
        return d

    @classmethod
    def from_dict(cls, d: dict, apoz: ApozReport | None = None) -> "IterationReport":
        fields = {f.name for f in dataclasses.fields(cls)} - {"apoz"}
        return cls(**{k: v for k, v in d.items() if k in fields}, apoz=apoz)


@dataclass
class LoopResult:
    reports: list[IterationReport]
    networks: list[Network]
    checkpoints: list[Path] = field(default_factory=list)
    stopped: str = "completed"


def _widths(net: Network) -> dict[str, int]:
    return {s.name: s.width for s in net.layers if s.has_params}


def _summarize(k, net, base_net, pre, post, report: ApozReport, digest, t0, pruned, status="ok"):
    return IterationReport(
        iteration=k,
        config=net.config_string(),
        params=param_count(net),
        compression=compression_rate(base_net, net),
        pre_accuracy=pre,
        post_accuracy=post,
        mean_apoz={n: s.mean for n, s in report.layers.items()},
        threshold_counts={n: {f"{t:g}": c for t, c in s.threshold_counts.items()}
                          for n, s in report.layers.items()},
        widths=_widths(net),
        pruned=pruned,
        checkpoint_digest=digest,
        wall_time=time.time() - t0,
        status=status,
        apoz=report,
    )


def _epoch_logger(tag):
    def sink(m):
        log.info("%s epoch %d lr=%.4g loss=%.4f train_acc=%.4f", tag, m.epoch, m.learning_rate,
                 m.loss, m.train_accuracy)
    return sink


def _ckpt_name(k: int) -> str:
    return f"iter_{k:02d}.ntrm"


def config_fingerprint(cfg: LoopConfig) -> dict:
    """JSON-able description of everything that determines the loop's results."""
    d = dataclasses.asdict(cfg)
    for key in ("out_dir", "resume", "iterations"):
        d.pop(key)
    d["layers"] = [s.to_dict() for s in cfg.layers]
    return json.loads(json.dumps(d))


def _load_partial(out: Path, cfg: LoopConfig):
    """Completed iterations from an earlier, interrupted run with the same config."""
    path = out / "reports.jsonl"
    if not cfg.resume or not path.exists():
        return [], [], []
    fp = out / "loop_config.json"
    if not fp.exists() or json.loads(fp.read_text()) != config_fingerprint(cfg):
        log.warning("%s holds a run with a different config; starting over", out)
        return [], [], []
    reports, nets, lineage = [], [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        ck_path = out / _ckpt_name(d["iteration"])
        apoz_path = out / f"apoz_iter_{d['iteration']:02d}.json"
        if not ck_path.exists() or not apoz_path.exists():
            break
        ck = load_checkpoint(ck_path)
        if ck.digest != d["checkpoint_digest"]:
            break
        reports.append(IterationReport.from_dict(d, ApozReport.from_json(apoz_path.read_text())))
        nets.append(ck.network)
        lineage = ck.lineage + [ck.digest]
    return reports, nets, lineage


def run_loop(cfg: LoopConfig, train_full: Dataset, test: Dataset) -> LoopResult:
    """Train a baseline, then alternate APoZ measurement, pruning and retraining.

    ``train_full`` is split into a training remainder and a held-out stat set
    on which APoZ is measured; accuracies are on ``test``.
    """
    train_set, stat_set = split_stat_set(train_full, cfg.split)
    targets = cfg.policy.target_layers
    out = Path(cfg.out_dir) if cfg.out_dir else None

    reports, nets, lineage = _load_partial(out, cfg) if out else ([], [], [])
    if reports:
        log.info("resuming after iteration %d from %s", reports[-1].iteration, out)
    checkpoints = [out / _ckpt_name(r.iteration) for r in reports] if out else []
    if len(reports) >= cfg.iterations:
        n = cfg.iterations
        return LoopResult(reports[:n], nets[:n], checkpoints[:n], "completed")

    def persist(k, net, report, meta):
        nonlocal lineage
        if out is None:
            return payload_digest(net)
        digest = save_checkpoint(net, meta, out / _ckpt_name(k), lineage)
        lineage = lineage + [digest]
        checkpoints.append(out / _ckpt_name(k))
        return digest

    def append_record(rep):
        if out is not None:
            (out / f"apoz_iter_{rep.iteration:02d}.json").write_text(rep.apoz.to_json() + "\n")
            with open(out / "reports.jsonl", "a") as f:
                f.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if not reports and (out / "reports.jsonl").exists():
            (out / "reports.jsonl").unlink()
        (out / "loop_config.json").write_text(
            json.dumps(config_fingerprint(cfg), sort_keys=True, indent=1) + "\n")

    stopped = "completed"
    if not reports:
        t0 = time.time()
        init = init_network(cfg.layers, cfg.input_shape, cfg.init_seed)
        pre = evaluate(init, test)
        if cfg.baseline_checkpoint:
            ck = load_checkpoint(cfg.baseline_checkpoint)
            base, lineage = ck.network, list(ck.lineage)
            log.info("baseline loaded from %s", cfg.baseline_checkpoint)
        else:
            base, _ = train(init, train_set, cfg.train, _epoch_logger("baseline"))
        post = evaluate(base, test)
        report = measure_apoz(base, stat_set, targets, cfg.stat_batch_size)
        digest = persist(0, base, report, {"iteration": 0, "epochs": cfg.train.epochs,
                                           "accuracy": post})
        rep = _summarize(0, base, base, pre, post, report, digest, t0, {})
        log.info("iteration 0 %s acc=%.4f", rep.config, post)
        reports.append(rep)
        nets.append(base)
        append_record(rep)

    baseline_acc = reports[0].post_accuracy
    for k in range(len(reports), cfg.iterations):
        t0 = time.time()
        prev, prev_rep = nets[-1], reports[-1]
        plan = select_neurons(prev_rep.apoz, cfg.policy)
        if plan.is_empty:
            log.info("iteration %d: selection is empty, stopping", k)
            stopped = "empty_plan"
            break
        trimmed = prune(prev, plan)
        if cfg.init_mode == "from_scratch":
            trimmed = init_network(trimmed.layers, cfg.input_shape, cfg.init_seed + k)
        pre = evaluate(trimmed, test)
        retrain_cfg = dataclasses.replace(cfg.retrain, seed=cfg.retrain.seed + k)
        try:
            net, _ = train(trimmed, train_set, retrain_cfg, _epoch_logger(f"iteration {k}"))
        except TrainingDiverged as exc:
            log.error("iteration %d diverged: %s", k, exc)
            stopped = "diverged"
            break
        post = evaluate(net, test)
        report = measure_apoz(net, stat_set, targets, cfg.stat_batch_size)
        status = "ok"
        if post < baseline_acc - cfg.accuracy_floor / 100.0:
            status = "accuracy_floor"
        digest = persist(k, net, report, {"iteration": k, "epochs": retrain_cfg.epochs,
                                          "accuracy": post, "plan": plan.to_dict()})
        rep = _summarize(k, net, nets[0], pre, post, report, digest, t0, plan.counts(), status)
        log.info("iteration %d %s x%.2f pre=%.4f post=%.4f", k, rep.config, rep.compression,
                 pre, post)
        reports.append(rep)
        nets.append(net)
        append_record(rep)
        if status != "ok":
            stopped = status
            break

    result = LoopResult(reports, nets, checkpoints, stopped)
    if out is not None:
        emit_reports(reports, out, targets)
    return result


SUMMARY_COLUMNS = ["iteration", "config", "params", "compression", "pre_acc", "post_acc"]


def summary_csv(reports: list[IterationReport], targets) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS + [f"mean_apoz_{t}" for t in targets])
    for r in reports:
        w.writerow([r.iteration, r.config, r.params, f"{r.compression:.4f}",
                    f"{r.pre_accuracy:.4f}", f"{r.post_accuracy:.4f}"]
                   + [f"{r.mean_apoz[t]:.6f}" for t in targets])
    return buf.getvalue()


def emit_reports(reports: list[IterationReport], out_dir, targets=None) -> list[Path]:
    """Write ``reports.jsonl``, ``summary.csv`` and per-iteration APoZ histograms."""
    if not reports:
        raise ConfigError("no reports to emit")
    targets = list(targets) if targets is not None else list(reports[0].mean_apoz)
    if not targets:
        raise ConfigError("no target layers to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "reports.jsonl", out / "summary.csv"]
        paths[0].write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in reports))
        paths[1].write_text(summary_csv(reports, targets))
        for r in reports:
            if r.apoz is None:
                continue
            for t in targets:
                p = out / f"hist_iter_{r.iteration:02d}_{t}.csv"
                p.write_text(r.apoz.histogram_csv(t))
                paths.append(p)
    except OSError as exc:
        raise OSError(f"writing reports to {out}: {exc}") from exc
    return paths


def table2(reports: list[IterationReport]) -> str:
    """Text table with the columns of the iterative-trimming results."""
    lines = [f"{'Network Config':<22}{'Compression Rate':>18}{'Initial Accuracy (%)':>22}"
             f"{'Final Accuracy (%)':>20}"]
    for r in reports:
        lines.append(f"{'(' + r.config + ')':<22}{r.compression:>18.2f}"
                     f"{100 * r.pre_accuracy:>22.2f}{100 * r.post_accuracy:>20.2f}")
    return "\n".join(lines)


ABLATION_ROWS = ("Number of Neurons in {layer}", "Accuracy (%)", "Mean APoZ (%)") + tuple(
    f"#{{APoZ>{t:g}}}" for t in THRESHOLDS)


@dataclass
class AblationTable:
    layer: str
    row_labels: list[str]
    with_init: list[list]
    without_init: list[list]

    def to_text(self) -> str:
        n = len(self.with_init[0]) if self.with_init else 0
        head = f"{'':<28}" + "".join(f"{'with':>9}" for _ in range(n)) + " |" + \
            "".join(f"{'without':>9}" for _ in range(n))
        lines = [head]
        for i, label in enumerate(self.row_labels):
            fmt = (lambda v: f"{v:>9.2f}") if isinstance(self.with_init[i][0], float) else (lambda v: f"{v:>9}")
            lines.append(f"{label:<28}" + "".join(fmt(v) for v in self.with_init[i]) + " |"
                         + "".join(fmt(v) for v in self.without_init[i]))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(self.with_init[0]) if self.with_init else 0
        w.writerow(["row"] + [f"with_init_{k}" for k in range(n)] + [f"without_init_{k}" for k in range(n)])
        for label, a, b in zip(self.row_labels, self.with_init, self.without_init):
            w.writerow([label] + list(a) + list(b))
        return buf.getvalue()


def _ablation_column(r: IterationReport, layer: str) -> list:
    tc = r.threshold_counts[layer]
    return [r.widths[layer], round(100 * r.post_accuracy, 2), round(100 * r.mean_apoz[layer], 2)] + \
        [tc[f"{t:g}"] for t in THRESHOLDS]


def ablation_report(with_init: list[IterationReport], without_init: list[IterationReport],
                    layer: str = "fc1") -> AblationTable:
    """Side-by-side per-iteration statistics of ``layer`` under both init modes.

    Runs of different length are compared over their common prefix.
    """
    n = min(len(with_init), len(without_init))
    labels = [ABLATION_ROWS[0].format(layer=layer.upper())] + list(ABLATION_ROWS[1:])
    cols_a = [_ablation_column(r, layer) for r in with_init[:n]]
    cols_b = [_ablation_column(r, layer) for r in without_init[:n]]
    rows_a = [[c[i] for c in cols_a] for i in range(len(labels))]
    rows_b = [[c[i] for c in cols_b] for i in range(len(labels))]
    return AblationTable(layer, labels, rows_a, rows_b)


def load_reports(run_dir) -> list[IterationReport]:
    run = Path(run_dir)
    reports = []
    for line in (run / "reports.jsonl").read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            p = run / f"apoz_iter_{d['iteration']:02d}.json"
            reports.append(IterationReport.from_dict(
                d, ApozReport.from_json(p.read_text()) if p.exists() else None))
    return reports
