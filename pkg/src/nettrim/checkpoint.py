"""Binary checkpoint format.

Layout::

    b"NTRM" | u32 LE version | u64 LE header length | UTF-8 JSON header | payload

The payload is every parameterized layer's weight then bias, in layer order,
as little-endian float32, row-major.  The checkpoint digest is the SHA-256 of
the payload bytes; derived checkpoints list their ancestors' digests in
``lineage``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, ConfigError, ShapeMismatch, TruncatedPayload, VersionMismatch
from .nn import LayerSpec, Network

MAGIC = b"NTRM"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    network: Network
    lineage: list[str] = field(default_factory=list)
    train_meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    digest: str = ""


def _payload(net: Network) -> bytes:
    parts = []
    for name in net.param_layers:
        w, b = net.params[name]
        if w.dtype != np.float32 or b.dtype != np.float32:
            raise ConfigError(f"{name}: checkpoints store float32 only, got {w.dtype}")
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def payload_digest(net: Network) -> str:
    return hashlib.sha256(_payload(net)).hexdigest()


def encode(net: Network, meta: dict | None = None, lineage=()) -> tuple[bytes, str]:
    payload = _payload(net)
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "input_shape": list(net.input_shape),
        "layers": [s.to_dict() for s in net.layers],
        "params": [
            {"layer": name, "weight_shape": list(net.params[name][0].shape),
             "bias_shape": list(net.params[name][1].shape)}
            for name in net.param_layers
        ],
        "dtype": "float32",
        "meta": meta or {},
        "lineage": list(lineage),
        "payload_sha256": digest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload, digest


def save_checkpoint(net: Network, meta: dict | None, path, lineage=()) -> str:
    """Write ``net`` to ``path`` atomically and return its payload digest."""
    blob, digest = encode(net, meta, lineage)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return digest


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _PREFIX.size:
        raise TruncatedPayload("file ends inside the fixed header")
    _, version, hlen = _PREFIX.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this reader supports {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise TruncatedPayload("file ends inside the JSON header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ShapeMismatch(f"unreadable JSON header: {exc}") from exc
    payload = memoryview(blob)[start + hlen:]

    layers = tuple(LayerSpec.from_dict(d) for d in header["layers"])
    net = Network(tuple(header["input_shape"]), layers)
    want = net.param_shapes()
    entries = header["params"]
    if [e["layer"] for e in entries] != net.param_layers:
        raise ShapeMismatch("parameter table does not match the layer list")
    expected = 0
    for e in entries:
        ws, bs = tuple(e["weight_shape"]), tuple(e["bias_shape"])
        if (ws, bs) != want[e["layer"]]:
            raise ShapeMismatch(f"{e['layer']}: header shapes {ws}/{bs} disagree with layer specs")
        expected += 4 * (math.prod(ws) + math.prod(bs))
    if len(payload) < expected:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header needs {expected}")
    if len(payload) > expected:
        raise ShapeMismatch(f"payload has {len(payload)} bytes, header accounts for {expected}")

    params = {}
    off = 0
    for e in entries:
        arrays = []
        for shape in (e["weight_shape"], e["bias_shape"]):
            count = math.prod(shape)
            a = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
            arrays.append(a.astype(np.float32).reshape(shape))
            off += 4 * count
        params[e["layer"]] = tuple(arrays)
    net.params = params
    digest = hashlib.sha256(payload).hexdigest()
    return Checkpoint(net, list(header.get("lineage", [])), dict(header.get("meta", {})), version, digest)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
