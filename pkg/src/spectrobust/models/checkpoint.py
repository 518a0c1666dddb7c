"""Binary checkpoint format for trained classifiers.

Layout (all integers little-endian)::

    magic      8 bytes  b"SPRBCKPT"
    version    u16
    arch       u8 length + ascii tag ("cnn" | "vit")
    config     u32 length + utf-8 JSON (architecture knobs, input shape, classes)
    n_params   u32
    table      per parameter: u16 name length, utf-8 name, u8 ndim, ndim x u32 dims
    payload    float64 little-endian values, table order
    checksum   32-byte SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import CorruptCheckpoint
from .base import NetClassifier, TrainHistory
from .cnn import ResidualCNNClassifier
from .vit import VisionTransformerClassifier

MAGIC = b"SPRBCKPT"
FORMAT_VERSION = 1
_ARCHES = {"cnn": ResidualCNNClassifier, "vit": VisionTransformerClassifier}


def to_bytes(model: NetClassifier) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    tag = model.arch.encode("ascii")
    buf.write(struct.pack("<B", len(tag)) + tag)
    config = {
        "params": {k: v for k, v in model.get_params().items()},
        "input_shape": list(model.input_shape_),
        "n_classes": model.n_classes_,
    }
    blob = json.dumps(config, sort_keys=True, default=list).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)) + blob)
    names = sorted(model.params_)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params_[name]
        enc = name.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)) + enc)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        buf.write(np.ascontiguousarray(model.params_[name], dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: NetClassifier, path: Union[str, Path]) -> None:
    Path(path).write_bytes(to_bytes(model))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpoint("checkpoint truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes) -> NetClassifier:
    if len(raw) < len(MAGIC) + 32:
        raise CorruptCheckpoint("checkpoint truncated")
    body, digest = raw[:-32], raw[-32:]
    r = _Reader(body)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("checksum mismatch (truncated or modified file)")
    (tag_len,) = r.unpack("<B")
    tag = r.take(tag_len).decode("ascii")
    if tag not in _ARCHES:
        raise CorruptCheckpoint(f"unknown architecture tag {tag!r}")
    (blob_len,) = r.unpack("<I")
    config = json.loads(r.take(blob_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        table.append((name, r.unpack(f"<{ndim}I")))
    params = {}
    for name, shape in table:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise CorruptCheckpoint("trailing bytes after parameter payload")

    hyper = config["params"]
    for key in ("widths",):
        if key in hyper and isinstance(hyper[key], list):
            hyper[key] = tuple(hyper[key])
    model = _ARCHES[tag](**hyper)
    model.initialize(tuple(config["input_shape"]), config["n_classes"])
    expected = {k: v.shape for k, v in model.params_.items()}
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        raise CorruptCheckpoint("parameter shape table does not match the architecture")
    model.params_ = params
    model.history_ = TrainHistory()
    return model


def load_checkpoint(path: Union[str, Path]) -> NetClassifier:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)
