"""Average Percentage of Zeros (APoZ) statistics.

A neuron's APoZ is the fraction of its post-ReLU outputs that are exactly
zero, pooled over every example and every spatial position of its feature
map.  Counts are kept as exact integers so accumulation is order-free.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .nn import Network, forward

THRESHOLDS = (0.6, 0.7, 0.8, 0.9)
HIST_BINS = 20


def resolve_target(net: Network, name: str) -> tuple[str, int]:
    """Map a conv/dense layer name (or its ReLU) to ``(owner layer, relu index)``.

    The ReLU must follow the owner with only pooling in between.
    """
    i = net.index(name)
    spec = net.layers[i]
    if spec.kind == "relu":
        j = i - 1
        while j >= 0 and net.layers[j].kind in ("maxpool2d", "relu"):
            j -= 1
        if j < 0 or not net.layers[j].has_params:
            raise ConfigError(f"{name} has no conv/dense layer feeding it")
        return net.layers[j].name, i
    if not spec.has_params:
        raise ConfigError(f"{name} is a {spec.kind} layer, not a post-ReLU output")
    for j in range(i + 1, len(net.layers)):
        kind = net.layers[j].kind
        if kind == "relu":
            return name, j
        if kind != "maxpool2d":
            break
    raise ConfigError(f"{name} is not followed by a ReLU; APoZ needs post-ReLU outputs")


def zero_counts(output: np.ndarray) -> np.ndarray:
    """Per-channel count of exact zeros in an (N, C, ...) activation.

    Every spatial position counts, including border positions of padded convs.
    """
    return np.count_nonzero(output.reshape(output.shape[0], output.shape[1], -1) == 0,
                            axis=(0, 2)).astype(np.uint64)


@dataclass
class ApozAccumulator:
    """Zero counts per neuron plus the shared element total (N x M) per layer."""

    relu_index: dict[str, int]
    zero_counts: dict[str, np.ndarray] = field(default_factory=dict)
    elements: dict[str, int] = field(default_factory=dict)
    examples: int = 0

    @classmethod
    def for_network(cls, net: Network, targets) -> "ApozAccumulator":
        targets = list(targets)
        if not targets:
            raise ConfigError("no target layers given for APoZ")
        relu_index = dict(resolve_target(net, t) for t in targets)
        acc = cls(relu_index)
        for owner, j in relu_index.items():
            acc.zero_counts[owner] = np.zeros(net.shapes[j][0], dtype=np.uint64)
            acc.elements[owner] = 0
        return acc

    @property
    def layers(self) -> list[str]:
        return list(self.relu_index)

    def accumulate(self, trace) -> "ApozAccumulator":
        n = trace.outputs[0].shape[0]
        for owner, j in self.relu_index.items():
            out = trace.outputs[j]
            self.zero_counts[owner] += zero_counts(out)
            self.elements[owner] += n * int(np.prod(out.shape[2:], dtype=np.int64))
        self.examples += n
        return self

    def merge(self, other: "ApozAccumulator") -> "ApozAccumulator":
        if self.relu_index != other.relu_index:
            raise ConfigError("cannot merge accumulators over different layers")
        return ApozAccumulator(
            dict(self.relu_index),
            {k: self.zero_counts[k] + other.zero_counts[k] for k in self.zero_counts},
            {k: self.elements[k] + other.elements[k] for k in self.elements},
            self.examples + other.examples,
        )

    def apoz(self) -> dict[str, np.ndarray]:
        out = {}
        for k, counts in self.zero_counts.items():
            if self.elements[k] == 0:
                raise InputError(f"APoZ of {k} requested before any activations were accumulated")
            out[k] = counts.astype(np.float64) / float(self.elements[k])
        return out


def accumulate(acc: ApozAccumulator, trace) -> ApozAccumulator:
    return acc.accumulate(trace)


def apoz(acc: ApozAccumulator) -> dict[str, np.ndarray]:
    return acc.apoz()


@dataclass
class LayerSummary:
    apoz: np.ndarray
    mean: float
    std: float
    threshold_counts: dict[float, int]
    histogram: np.ndarray  # HIST_BINS counts over [0, 1]

    @property
    def width(self) -> int:
        return len(self.apoz)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "mean": self.mean,
            "std": self.std,
            "threshold_counts": {f"{t:g}": c for t, c in self.threshold_counts.items()},
            "histogram": self.histogram.tolist(),
            "apoz": self.apoz.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSummary":
        return cls(np.asarray(d["apoz"], dtype=np.float64), float(d["mean"]), float(d["std"]),
                   {float(t): int(c) for t, c in d["threshold_counts"].items()},
                   np.asarray(d["histogram"], dtype=np.int64))


def layer_summary(values, thresholds=THRESHOLDS, bins: int = HIST_BINS) -> LayerSummary:
    """Mean, population std, counts strictly above each threshold, and a histogram."""
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise InputError("layer_summary of an empty array")
    hist, _ = np.histogram(a, bins=bins, range=(0.0, 1.0))
    return LayerSummary(a, float(a.mean()), float(a.std()),
                        {t: int((a > t).sum()) for t in thresholds}, hist.astype(np.int64))


def histogram_edges(bins: int = HIST_BINS) -> np.ndarray:
    return np.linspace(0.0, 1.0, bins + 1)


@dataclass
class ApozReport:
    layers: dict[str, LayerSummary]
    examples: int = 0
    elements_per_neuron: dict[str, int] = field(default_factory=dict)

    def __getitem__(self, name: str) -> LayerSummary:
        return self.layers[name]

    def __contains__(self, name):
        return name in self.layers

    def to_dict(self) -> dict:
        return {
            "examples": self.examples,
            "elements_per_neuron": self.elements_per_neuron,
            "layers": {k: v.to_dict() for k, v in self.layers.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ApozReport":
        return cls({k: LayerSummary.from_dict(v) for k, v in d["layers"].items()},
                   int(d.get("examples", 0)), dict(d.get("elements_per_neuron", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ApozReport":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "neuron_index", "apoz"])
        for name, s in self.layers.items():
            for i, v in enumerate(s.apoz):
                w.writerow([name, i, repr(float(v))])
        return buf.getvalue()

    def histogram_csv(self, name: str) -> str:
        s = self.layers[name]
        edges = histogram_edges(len(s.histogram))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], s.histogram):
            w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(c)])
        return buf.getvalue()

    def write(self, out_dir, prefix: str = "apoz") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{prefix}.json", out / f"{prefix}.csv"]
        paths[0].write_text(self.to_json() + "\n")
        paths[1].write_text(self.to_csv())
        for name in self.layers:
            p = out / f"{prefix}_hist_{name}.csv"
            p.write_text(self.histogram_csv(name))
            paths.append(p)
        return paths


def report_from_accumulator(acc: ApozAccumulator) -> ApozReport:
    values = acc.apoz()
    return ApozReport({k: layer_summary(v) for k, v in values.items()}, acc.examples,
                      dict(acc.elements))


def measure_apoz(net: Network, dataset, targets, batch_size: int = 500) -> ApozReport:
    """Stream ``dataset`` through ``net`` and summarize APoZ of each target layer."""
    if len(dataset) == 0:
        raise InputError("cannot measure APoZ on an empty dataset")
    acc = ApozAccumulator.for_network(net, targets)
    for start in range(0, len(dataset), batch_size):
        acc.accumulate(forward(net, dataset.images[start:start + batch_size]))
    return report_from_accumulator(acc)
