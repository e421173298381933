"""Neuron selection by the mean + k*std APoZ rule, and structural pruning."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .apoz import ApozReport
from .errors import ConfigError
from .nn import Network, forward, param_count


@dataclass(frozen=True)
class TrimPolicy:
    target_layers: tuple[str, ...] = ("conv2", "fc1")
    sigma_multiplier: float = 1.0
    # int for every layer, or {layer: int}
    min_remaining: int | dict = 1
    max_prune_fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "target_layers", tuple(self.target_layers))
        if not self.target_layers:
            raise ConfigError("policy.target_layers is empty")
        if self.sigma_multiplier < 0:
            raise ConfigError("policy.sigma_multiplier must be >= 0")
        mins = self.min_remaining.values() if isinstance(self.min_remaining, dict) else [self.min_remaining]
        if any(m < 1 for m in mins):
            raise ConfigError("policy.min_remaining must be >= 1")
        if not 0 < self.max_prune_fraction <= 1:
            raise ConfigError("policy.max_prune_fraction must be in (0, 1]")

    def min_for(self, layer: str) -> int:
        if isinstance(self.min_remaining, dict):
            return int(self.min_remaining.get(layer, 1))
        return int(self.min_remaining)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["target_layers"] = list(self.target_layers)
        return d


@dataclass(frozen=True)
class TrimPlan:
    """Sorted neuron indices to remove, per layer."""

    remove: dict[str, tuple[int, ...]]
    policy: TrimPolicy | None = None
    source_digest: str = ""
    thresholds: dict[str, float] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not any(self.remove.values())

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.remove.items()}

    def keep_mask(self, layer: str, width: int) -> np.ndarray:
        keep = np.ones(width, dtype=bool)
        keep[list(self.remove.get(layer, ()))] = False
        return keep

    def to_dict(self) -> dict:
        return {
            "remove": {k: list(v) for k, v in self.remove.items()},
            "policy": self.policy.to_dict() if self.policy else None,
            "source_digest": self.source_digest,
            "thresholds": self.thresholds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "TrimPlan":
        pol = d.get("policy")
        return cls({k: tuple(sorted(int(i) for i in v)) for k, v in d["remove"].items()},
                   TrimPolicy(**pol) if pol else None, d.get("source_digest", ""),
                   {k: float(v) for k, v in d.get("thresholds", {}).items()})

    @classmethod
    def from_json(cls, text: str) -> "TrimPlan":
        return cls.from_dict(json.loads(text))


def select_layer(apoz: np.ndarray, sigma_multiplier: float = 1.0, min_remaining: int = 1,
                 max_prune_fraction: float = 1.0) -> tuple[tuple[int, ...], float]:
    """Indices with APoZ strictly above ``mean + sigma_multiplier * std``.

    When the guards cap the count, the highest-APoZ offenders are pruned; among
    equal APoZ the lower index is kept.
    """
    a = np.asarray(apoz, dtype=np.float64)
    threshold = float(a.mean() + sigma_multiplier * a.std())
    cand = np.flatnonzero(a > threshold)
    limit = min(math.floor(max_prune_fraction * len(a)), len(a) - min_remaining)
    limit = max(limit, 0)
    if len(cand) > limit:
        order = sorted(cand, key=lambda c: (-a[c], -c))
        cand = np.array(order[:limit], dtype=np.int64)
    return tuple(sorted(int(c) for c in cand)), threshold


def select_neurons(report: ApozReport, policy: TrimPolicy) -> TrimPlan:
    remove, thresholds = {}, {}
    for layer in policy.target_layers:
        if layer not in report:
            raise ConfigError(f"APoZ report has no entry for target layer {layer!r}")
        remove[layer], thresholds[layer] = select_layer(
            report[layer].apoz, policy.sigma_multiplier, policy.min_for(layer),
            policy.max_prune_fraction)
    return TrimPlan(remove, policy, report.digest(), thresholds)


def _check_plan(net: Network, plan: TrimPlan) -> dict[str, np.ndarray]:
    """Validate ``plan`` against ``net`` and return keep masks per pruned layer."""
    last = net.param_layers[-1]
    keeps = {}
    for layer, idx in plan.remove.items():
        spec = net.layer(layer)
        if not spec.has_params:
            raise ConfigError(f"{layer} is a {spec.kind} layer and has no neurons to prune")
        if not idx:
            continue
        if layer == last:
            raise ConfigError(f"refusing to prune the output layer {layer}")
        width = spec.width
        if min(idx) < 0 or max(idx) >= width:
            raise ConfigError(f"plan indices for {layer} fall outside [0, {width})")
        if len(set(idx)) >= width:
            raise ConfigError(f"plan would remove every neuron of {layer}")
        keeps[layer] = plan.keep_mask(layer, width)
    return keeps


def prune(net: Network, plan: TrimPlan) -> Network:
    """Remove planned neurons and every weight that reads their output.

    Surviving weights are copied bit-exactly.  A conv channel feeding a dense
    layer owns the contiguous block of H*W flattened inputs for that channel.
    """
    keeps = _check_plan(net, plan)
    if not keeps:
        return net.copy()
    specs, params = [], {}
    upstream_keep = None  # keep mask of the most recent parameterized layer
    for i, s in enumerate(net.layers):
        if not s.has_params:
            specs.append(s)
            continue
        w, b = net.params[s.name]
        if upstream_keep is not None:
            if s.kind == "conv2d":
                w = w[:, upstream_keep]
            else:
                ins = net.input_shape_of(i)
                if len(ins) == 3:
                    w = w.reshape(w.shape[0], ins[0], -1)[:, upstream_keep].reshape(w.shape[0], -1)
                else:
                    w = w[:, upstream_keep]
        keep = keeps.get(s.name)
        if keep is not None:
            w, b = w[keep], b[keep]
            width = int(keep.sum())
            s = dataclasses.replace(s, **({"out_channels": width} if s.kind == "conv2d"
                                          else {"out_features": width}))
        s = dataclasses.replace(s, in_channels=None, in_features=None)
        specs.append(s)
        params[s.name] = (np.ascontiguousarray(w), np.ascontiguousarray(b))
        upstream_keep = keep
    return Network(net.input_shape, tuple(specs), params)


def plan_mask(net: Network, plan: TrimPlan) -> dict[str, np.ndarray]:
    return _check_plan(net, plan)


def logits(net: Network, batch) -> np.ndarray:
    """Output of the final parameterized layer (pre-softmax scores)."""
    trace = forward(net, batch)
    return trace.outputs[net.index(net.param_layers[-1])]


def masked_forward(net: Network, plan: TrimPlan, batch) -> np.ndarray:
    """Logits of ``net`` with the planned neurons' outputs forced to zero."""
    trace = forward(net, batch, mask=_check_plan(net, plan))
    return trace.outputs[net.index(net.param_layers[-1])]


def compression_rate(original: Network, trimmed: Network) -> float:
    n = param_count(trimmed)
    if n == 0:
        raise ConfigError("trimmed network has no parameters")
    return param_count(original) / n
