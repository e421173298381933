"""Minimal numpy engine for LeNet-class chain networks.

Tensors are plain ``numpy.ndarray`` values (row-major, ``float32`` by default,
``float64`` for gradient verification).  Activations use NCHW layout and
flattening before a dense layer follows (channel, row, col) order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError, NumericFault, TrainingDiverged

KINDS = ("conv2d", "maxpool2d", "dense", "relu", "softmax_xent")
PARAM_KINDS = ("conv2d", "dense")

_NAME_PREFIX = {
    "conv2d": "conv",
    "maxpool2d": "pool",
    "dense": "fc",
    "relu": "relu",
    "softmax_xent": "loss",
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str | None = None
    out_channels: int | None = None
    kernel_h: int | None = None
    kernel_w: int | None = None
    stride: int = 1
    padding: int = 0
    window: int | None = None
    out_features: int | None = None
    # optional declared fan-in, checked against the upstream shape
    in_channels: int | None = None
    in_features: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if not self.out_channels or self.out_channels < 1:
                raise ConfigError("conv2d needs out_channels >= 1")
            if not self.kernel_h or not self.kernel_w or min(self.kernel_h, self.kernel_w) < 1:
                raise ConfigError("conv2d kernel extents must be >= 1")
            if self.stride < 1 or self.padding < 0:
                raise ConfigError("conv2d needs stride >= 1 and padding >= 0")
        elif self.kind == "maxpool2d":
            if not self.window or self.window < 1 or self.stride < 1:
                raise ConfigError("maxpool2d needs window >= 1 and stride >= 1")
        elif self.kind == "dense":
            if not self.out_features or self.out_features < 1:
                raise ConfigError("dense needs out_features >= 1")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    @property
    def width(self) -> int | None:
        """Number of neurons (output channels or features)."""
        if self.kind == "conv2d":
            return self.out_channels
        if self.kind == "dense":
            return self.out_features
        return None

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown layer field(s): {sorted(unknown)}")
        return cls(**d)


def conv2d(out_channels, kernel, stride=1, padding=0, name=None) -> LayerSpec:
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    return LayerSpec("conv2d", name, out_channels=out_channels, kernel_h=kh, kernel_w=kw,
                     stride=stride, padding=padding)


def maxpool2d(window, stride=None, name=None) -> LayerSpec:
    return LayerSpec("maxpool2d", name, window=window, stride=stride or window)


def dense(out_features, name=None) -> LayerSpec:
    return LayerSpec("dense", name, out_features=out_features)


def relu(name=None) -> LayerSpec:
    return LayerSpec("relu", name)


def softmax_xent(name=None) -> LayerSpec:
    return LayerSpec("softmax_xent", name)


def name_layers(specs: Sequence[LayerSpec]) -> tuple[LayerSpec, ...]:
    """Give every unnamed layer a name like ``conv2`` or ``fc1`` (1-based per kind)."""
    counts: dict[str, int] = {}
    out = []
    for s in specs:
        counts[s.kind] = counts.get(s.kind, 0) + 1
        if s.name is None:
            s = dataclasses.replace(s, name=f"{_NAME_PREFIX[s.kind]}{counts[s.kind]}")
        out.append(s)
    names = [s.name for s in out]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate layer names in {names}")
    return tuple(out)


def infer_shapes(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer; raises ConfigError on a bad chain."""
    shape = tuple(int(v) for v in input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"input_shape must be (channels, height, width), got {shape}")
    if not specs or specs[-1].kind != "softmax_xent":
        raise ConfigError("network must end in a softmax_xent layer")
    shapes = []
    prev_name = "input"
    for i, s in enumerate(specs):
        label = s.name or f"layer {i}"
        if s.kind == "softmax_xent" and i != len(specs) - 1:
            raise ConfigError(f"{label}: softmax_xent must be the final layer")
        if s.kind in ("conv2d", "maxpool2d"):
            if len(shape) != 3:
                raise ConfigError(f"{label} expects a (C,H,W) input but {prev_name} produces {shape}")
            c, h, w = shape
            if s.kind == "conv2d":
                if s.in_channels is not None and s.in_channels != c:
                    raise ConfigError(
                        f"{label} declares in_channels={s.in_channels} but {prev_name} produces {c}")
                ho = (h + 2 * s.padding - s.kernel_h) // s.stride + 1
                wo = (w + 2 * s.padding - s.kernel_w) // s.stride + 1
                c = s.out_channels
            else:
                ho = (h - s.window) // s.stride + 1
                wo = (w - s.window) // s.stride + 1
            if ho < 1 or wo < 1 or h + 2 * s.padding < (s.kernel_h or s.window):
                raise ConfigError(f"{label} window does not fit the {h}x{w} output of {prev_name}")
            shape = (c, ho, wo)
        elif s.kind == "dense":
            fan_in = math.prod(shape)
            if s.in_features is not None and s.in_features != fan_in:
                raise ConfigError(
                    f"{label} declares in_features={s.in_features} but {prev_name} "
                    f"flattens to {fan_in}")
            shape = (s.out_features,)
        elif s.kind == "softmax_xent":
            shape = (math.prod(shape),)
        shapes.append(shape)
        prev_name = label
    return shapes


@dataclass
class Network:
    """A chain of layers plus its parameters.

    ``params`` maps each conv/dense layer name to ``(weight, bias)``.  Conv
    weights are (out, in, kh, kw); dense weights are (out, in).
    """

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    params: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.layers = name_layers(self.layers)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        for name, (w, b) in self.params.items():
            want = self.param_shapes().get(name)
            if want is None:
                raise ConfigError(f"parameters given for unknown layer {name!r}")
            if w.shape != want[0] or b.shape != want[1]:
                raise ConfigError(
                    f"{name}: parameter shapes {w.shape}/{b.shape} do not match {want[0]}/{want[1]}")

    @property
    def dtype(self):
        for w, _ in self.params.values():
            return w.dtype
        return np.dtype(np.float32)

    def index(self, name: str) -> int:
        for i, s in enumerate(self.layers):
            if s.name == name:
                return i
        raise ConfigError(f"no layer named {name!r}")

    def layer(self, name: str) -> LayerSpec:
        return self.layers[self.index(name)]

    def input_shape_of(self, i: int) -> tuple[int, ...]:
        return self.input_shape if i == 0 else self.shapes[i - 1]

    def param_shapes(self) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
        out = {}
        for i, s in enumerate(self.layers):
            ins = self.input_shape_of(i)
            if s.kind == "conv2d":
                out[s.name] = ((s.out_channels, ins[0], s.kernel_h, s.kernel_w), (s.out_channels,))
            elif s.kind == "dense":
                out[s.name] = ((s.out_features, math.prod(ins)), (s.out_features,))
        return out

    @property
    def param_layers(self) -> list[str]:
        return [s.name for s in self.layers if s.has_params]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def widths(self) -> list[int]:
        return [s.width for s in self.layers if s.has_params]

    def config_string(self) -> str:
        """Layer widths as a dash-joined string, e.g. ``20-50-500-10``."""
        return "-".join(str(w) for w in self.widths())

    def copy(self) -> "Network":
        return Network(self.input_shape, self.layers,
                       {k: (w.copy(), b.copy()) for k, (w, b) in self.params.items()})

    def astype(self, dtype) -> "Network":
        return Network(self.input_shape, self.layers,
                       {k: (w.astype(dtype), b.astype(dtype)) for k, (w, b) in self.params.items()})

    def equals(self, other: "Network") -> bool:
        """Bit-exact comparison of structure and parameters."""
        if self.input_shape != other.input_shape or self.layers != other.layers:
            return False
        if self.params.keys() != other.params.keys():
            return False
        for k, (w, b) in self.params.items():
            w2, b2 = other.params[k]
            if w.dtype != w2.dtype or w.tobytes() != w2.tobytes() or b.tobytes() != b2.tobytes():
                return False
        return True


def init_network(specs: Sequence[LayerSpec], input_shape, seed: int, dtype=np.float32) -> Network:
    """Fan-in scaled uniform init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases.

    Layers draw from one ``numpy.random.default_rng(seed)`` stream in order.
    """
    net = Network(tuple(input_shape), tuple(specs))
    rng = np.random.default_rng(seed)
    params = {}
    for name, (wshape, bshape) in net.param_shapes().items():
        fan_in = math.prod(wshape[1:])
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        params[name] = (w, np.zeros(bshape, dtype=dtype))
    net.params = params
    return net


def param_count(net: Network) -> int:
    if net.params:
        return int(sum(w.size + b.size for w, b in net.params.values()))
    return int(sum(math.prod(w) + math.prod(b) for w, b in net.param_shapes().values()))


# ---------------------------------------------------------------------------
# kernels


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*kh*kw, Ho*Wo) patch stack, rows ordered (c, i, j)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c = x.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, xshape, kh, kw, stride, padding, ho, wo) -> np.ndarray:
    n, c, h, w = xshape
    d = dcols.reshape(n, c, kh, kw, ho, wo)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def _pool_windows(x: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Ho,Wo,k*k) view/copy of pooling windows, window entries row-major."""
    n, c = x.shape[:2]
    if k == s:
        xr = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
        return xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.reshape(n, c, ho, wo, k * k)


def _maxpool(x: np.ndarray, k: int, s: int, ho: int, wo: int):
    win = _pool_windows(x, k, s, ho, wo)
    # argmax picks the first maximum: lowest linear index within the window
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, arg


def _maxpool_backward(dy: np.ndarray, arg: np.ndarray, xshape, k: int, s: int) -> np.ndarray:
    n, c, ho, wo = dy.shape
    dx = np.zeros(xshape, dtype=dy.dtype)
    for di in range(k):
        for dj in range(k):
            routed = np.where(arg == di * k + dj, dy, 0)
            if k == s:
                dx[:, :, di:di + s * ho:s, dj:dj + s * wo:s] = routed
            else:
                dx[:, :, di:di + s * ho:s, dj:dj + s * wo:s] += routed
    return dx


@dataclass
class ActivationTrace:
    """Per-layer outputs of one forward pass; ``outputs[-1]`` are class probabilities."""

    inputs: np.ndarray
    outputs: list[np.ndarray]
    cache: dict[int, object] = field(default_factory=dict, repr=False)

    def __getitem__(self, i):
        return self.outputs[i]

    def __len__(self):
        return len(self.outputs)

    @property
    def probs(self) -> np.ndarray:
        return self.outputs[-1]


def forward(net: Network, batch: np.ndarray, mask: dict[str, np.ndarray] | None = None,
            check_finite: bool = True) -> ActivationTrace:
    """Run ``batch`` (N, C, H, W) through ``net`` and record every layer output.

    ``mask`` maps a conv/dense layer name to a boolean keep-vector; dropped
    neurons have their output forced to zero before the next layer sees it.
    """
    x = np.asarray(batch, dtype=net.dtype)
    if x.shape[1:] != net.input_shape:
        raise InputError(f"batch shape {x.shape} does not match input shape {net.input_shape}")
    trace = ActivationTrace(x, [])
    for i, s in enumerate(net.layers):
        if s.kind == "conv2d":
            w, b = net.params[s.name]
            n = x.shape[0]
            co, ho, wo = net.shapes[i]
            cols = _im2col(x, s.kernel_h, s.kernel_w, s.stride, s.padding, ho, wo)
            y = np.matmul(w.reshape(co, -1), cols)
            y += b[:, None]
            y = y.reshape(n, co, ho, wo)
            trace.cache[i] = cols
        elif s.kind == "dense":
            w, b = net.params[s.name]
            y = x.reshape(x.shape[0], -1) @ w.T
            y += b
        elif s.kind == "relu":
            y = np.maximum(x, 0)
        elif s.kind == "maxpool2d":
            _, ho, wo = net.shapes[i]
            y, arg = _maxpool(x, s.window, s.stride, ho, wo)
            trace.cache[i] = arg
        else:
            x = x.reshape(x.shape[0], -1)
            z = x - x.max(axis=1, keepdims=True)
            e = np.exp(z)
            y = e / e.sum(axis=1, keepdims=True)
        if mask is not None and s.name in mask:
            keep = np.asarray(mask[s.name], dtype=bool)
            y = y * keep.reshape((-1,) + (1,) * (y.ndim - 2)).astype(y.dtype)
        # a single reduction: any inf/nan in y makes the sum non-finite
        if check_finite:
            with np.errstate(invalid="ignore", over="ignore"):
                finite = math.isfinite(float(y.sum(dtype=np.float64)))
        if check_finite and not finite:
            raise NumericFault(i, s.name)
        y = np.ascontiguousarray(y)
        trace.outputs.append(y)
        x = y
    return trace


@dataclass
class Gradients:
    loss: float
    params: dict[str, tuple[np.ndarray, np.ndarray]]
    input_grad: np.ndarray | None = None


def xent_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(-np.log(np.maximum(p, np.finfo(probs.dtype).tiny)).mean())


def backward(net: Network, trace: ActivationTrace, labels, need_input_grad: bool = False) -> Gradients:
    """Batch-mean cross-entropy gradients for every parameter tensor."""
    labels = np.asarray(labels)
    probs = trace.probs
    n = probs.shape[0]
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise InputError(f"labels must lie in [0, {probs.shape[1]})")
    labels = labels.astype(np.int64)
    loss = xent_loss(probs, labels)

    dy = probs.copy()
    dy[np.arange(n), labels] -= 1
    dy /= n
    dy = dy.reshape(trace.outputs[-2].shape if len(trace.outputs) > 1 else trace.inputs.shape)
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for i in range(len(net.layers) - 2, -1, -1):
        s = net.layers[i]
        x = trace.outputs[i - 1] if i > 0 else trace.inputs
        need_dx = i > 0 or need_input_grad
        if s.kind == "dense":
            w, _ = net.params[s.name]
            xf = x.reshape(n, -1)
            grads[s.name] = ((dy.T @ xf), dy.sum(axis=0))
            dx = (dy @ w).reshape(x.shape) if need_dx else None
        elif s.kind == "conv2d":
            w, _ = net.params[s.name]
            co, ho, wo = net.shapes[i]
            cols = trace.cache.get(i)
            if cols is None:
                cols = _im2col(x, s.kernel_h, s.kernel_w, s.stride, s.padding, ho, wo)
            dmat = dy.reshape(n, co, ho * wo)
            dw = np.matmul(dmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            grads[s.name] = (dw, dmat.sum(axis=(0, 2)))
            if need_dx:
                dcols = np.matmul(w.reshape(co, -1).T, dmat)
                dx = _col2im(dcols, x.shape, s.kernel_h, s.kernel_w, s.stride, s.padding, ho, wo)
            else:
                dx = None
        elif s.kind == "relu":
            dx = dy * (trace.outputs[i] > 0)
        elif s.kind == "maxpool2d":
            arg = trace.cache.get(i)
            if arg is None:
                _, ho, wo = net.shapes[i]
                arg = _maxpool(x, s.window, s.stride, ho, wo)[1]
            dx = _maxpool_backward(dy, arg, x.shape, s.window, s.stride)
        else:
            raise ConfigError(f"{s.name}: softmax_xent is only valid as the final layer")
        dy = dx
        if dy is None:
            break
    return Gradients(loss, grads, dy if need_input_grad else None)


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class LrDecay:
    gamma: float = 0.1
    step_epochs: int = 15


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    lr_decay: LrDecay | None = LrDecay(0.1, 15)
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if isinstance(self.lr_decay, dict):
            object.__setattr__(self, "lr_decay", LrDecay(**self.lr_decay))
        if self.lr_decay is not None and self.lr_decay.step_epochs < 1:
            raise ConfigError("lr_decay.step_epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay is None:
            return self.learning_rate
        return self.learning_rate * self.lr_decay.gamma ** (epoch // self.lr_decay.step_epochs)


def sgd_step(net: Network, grads: Gradients | dict, config: TrainConfig,
             velocity: dict | None = None, lr: float | None = None):
    """One classic-momentum step, in place: ``v = m*v + g + wd*w; w -= lr*v``.

    Weight decay applies to weights only, not biases.  Returns ``(net, velocity)``.
    """
    g = grads.params if isinstance(grads, Gradients) else grads
    lr = config.learning_rate if lr is None else lr
    if velocity is None:
        velocity = {}
    for name, (w, b) in net.params.items():
        gw, gb = g[name]
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ConfigError(f"{name}: gradient shape does not match parameter shape")
        if config.weight_decay:
            gw = gw + w.dtype.type(config.weight_decay) * w
        for key, p, gp in ((name + ".weight", w, gw), (name + ".bias", b, gb)):
            gp = gp.astype(p.dtype, copy=False)
            if config.momentum:
                v = velocity.get(key)
                if v is None:
                    v = gp.copy()
                else:
                    v *= p.dtype.type(config.momentum)
                    v += gp
                velocity[key] = v
            else:
                v = gp
            p -= p.dtype.type(lr) * v
    return net, velocity


@dataclass
class EpochMetrics:
    epoch: int
    learning_rate: float
    loss: float
    train_accuracy: float
    eval_accuracy: float | None = None


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterable[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(net: Network, train_set, config: TrainConfig,
          progress: Callable[[EpochMetrics], None] | None = None,
          eval_set=None) -> tuple[Network, list[EpochMetrics]]:
    """Shuffled minibatch SGD; the input network is left untouched.

    The shuffle generator is ``default_rng(config.seed)``, drawn once per epoch.
    On a non-finite loss, raises ``TrainingDiverged`` carrying the last network
    that finished an epoch with finite loss.
    """
    images, labels = train_set.images, train_set.labels
    if len(labels) == 0:
        raise InputError("training set is empty")
    net = net.copy()
    rng = np.random.default_rng(config.seed)
    velocity: dict = {}
    history: list[EpochMetrics] = []
    last_good = net.copy()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total_loss, correct = 0.0, 0
        for idx in _batch_indices(len(labels), config.batch_size, rng):
            xb, yb = images[idx], labels[idx]
            try:
                trace = forward(net, xb)
            except NumericFault as exc:
                raise TrainingDiverged(epoch, last_good, str(exc)) from exc
            grads = backward(net, trace, yb)
            if not math.isfinite(grads.loss):
                raise TrainingDiverged(epoch, last_good, "loss is not finite")
            total_loss += grads.loss * len(idx)
            correct += int((trace.probs.argmax(axis=1) == yb).sum())
            sgd_step(net, grads, config, velocity, lr)
        m = EpochMetrics(epoch + 1, lr, total_loss / len(labels), correct / len(labels))
        if eval_set is not None:
            m.eval_accuracy = evaluate(net, eval_set)
        history.append(m)
        last_good = net.copy()
        if progress is not None:
            progress(m)
    return net, history


def predict(net: Network, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(net, images[start:start + batch_size]).probs.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net: Network, dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy in [0, 1]."""
    if len(dataset.labels) == 0:
        raise InputError("evaluation set is empty")
    pred = predict(net, dataset.images, batch_size)
    return float((pred == dataset.labels).mean())
