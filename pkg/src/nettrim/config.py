"""TOML/JSON run configuration with dotted-key overrides.

Sections: ``network``, ``data``, ``train``, ``retrain``, ``policy``, ``loop``.
Unknown sections or keys are rejected with a ConfigError naming the key.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import tomli

from .data import SplitSpec
from .errors import ConfigError
from .nn import LayerSpec, LrDecay, TrainConfig
from .pipeline import LoopConfig, default_retrain
from .presets import MNIST_SHAPE, PRESETS
from .surgery import TrimPolicy

_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}

SCHEMA: dict[str, set[str]] = {
    "network": {"preset", "widths", "layers", "input_shape", "init_seed"},
    "data": {"mnist_dir", "stat_set_size", "split_seed"},
    "train": _TRAIN_KEYS,
    "retrain": _TRAIN_KEYS,
    "policy": {f.name for f in dataclasses.fields(TrimPolicy)},
    "loop": {"iterations", "init_mode", "accuracy_floor", "out_dir", "baseline_checkpoint",
             "stat_batch_size", "resume"},
}


@dataclass
class RunConfig:
    loop: LoopConfig
    mnist_dir: str | None = None

    @property
    def train(self) -> TrainConfig:
        return self.loop.train


def read_config_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
    try:
        if p.suffix.lower() == ".json":
            return json.loads(text)
        return tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _parse_value(value)
    return raw


def validate_keys(raw: dict) -> None:
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config key {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be a table")
        for key in body:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
        for tkey in ("train", "retrain"):
            decay = raw.get(tkey, {}).get("lr_decay")
            if isinstance(decay, dict):
                extra = set(decay) - {"gamma", "step_epochs"}
                if extra:
                    raise ConfigError(f"unknown config key {tkey}.lr_decay.{sorted(extra)[0]}")


def _train_config(body: dict, base: TrainConfig) -> TrainConfig:
    body = dict(body)
    if "lr_decay" in body:
        d = body["lr_decay"]
        body["lr_decay"] = None if d in (None, False, "none") else LrDecay(**d)
    try:
        return dataclasses.replace(base, **body)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _layers(net: dict):
    if "layers" in net:
        if "preset" in net or "widths" in net:
            raise ConfigError("network.layers cannot be combined with network.preset/widths")
        return tuple(LayerSpec.from_dict(d) for d in net["layers"])
    preset = net.get("preset", "lenet")
    if preset not in PRESETS:
        raise ConfigError(f"unknown network.preset {preset!r}; known: {sorted(PRESETS)}")
    widths = net.get("widths")
    return tuple(PRESETS[preset](*widths) if widths else PRESETS[preset]())


def build_config(raw: dict) -> RunConfig:
    validate_keys(raw)
    net = raw.get("network", {})
    data = raw.get("data", {})
    loop = raw.get("loop", {})
    policy = raw.get("policy", {})
    try:
        cfg = LoopConfig(
            layers=_layers(net),
            input_shape=tuple(net.get("input_shape", MNIST_SHAPE)),
            init_seed=int(net.get("init_seed", 0)),
            train=_train_config(raw.get("train", {}), TrainConfig()),
            retrain=_train_config(raw.get("retrain", {}), default_retrain()),
            policy=TrimPolicy(**policy),
            split=SplitSpec(int(data.get("stat_set_size", 10_000)), int(data.get("split_seed", 0))),
            **loop,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(cfg, data.get("mnist_dir"))


def load_config(path=None, overrides=()) -> RunConfig:
    raw = read_config_file(path) if path else {}
    return build_config(apply_overrides(raw, list(overrides)))
