"""Checkpoint file format for parameter stores and optimizer state.

Layout: magic ``CKPT``, version u8, u32 LE length-prefixed JSON block
(model config plus the name/shape/trainable registry in order), then the
registry's float32 little-endian values concatenated. Adam state, when
present, follows under an ``ADAM`` magic with its own JSON block and the
two moment arrays in trainable-registry order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import ParameterStore
from .errors import BadMagicError, BadVersionError, FormatError, TruncatedPayloadError
from .formats import atomic_write_bytes
from .optim import AdamState

CKPT_MAGIC = b"CKPT"
ADAM_MAGIC = b"ADAM"
CKPT_VERSION = 1


def _json_block(obj: Any) -> bytes:
    enc = json.dumps(obj).encode("utf-8")
    return struct.pack("<I", len(enc)) + enc


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def json(self) -> Any:
        (n,) = struct.unpack("<I", self.take(4))
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad checkpoint JSON: {exc}") from exc

    def floats(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").copy()

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


def encode_checkpoint(
    store: ParameterStore, config: dict, adam: AdamState | None = None
) -> bytes:
    entries = [
        {"name": n, "shape": list(t.shape), "trainable": store.is_trainable(n)}
        for n, t in store
    ]
    out = bytearray()
    out += CKPT_MAGIC
    out += bytes([CKPT_VERSION])
    out += _json_block({"config": config, "entries": entries})
    for _, t in store:
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    if adam is not None:
        out += ADAM_MAGIC
        out += _json_block(
            {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
        )
        for name, t in store.trainable_items():
            m = adam.m.get(name, np.zeros_like(t.data))
            v = adam.v.get(name, np.zeros_like(t.data))
            out += np.ascontiguousarray(m, dtype="<f4").tobytes()
            out += np.ascontiguousarray(v, dtype="<f4").tobytes()
    return bytes(out)


def decode_checkpoint(buf: bytes) -> tuple[ParameterStore, dict, AdamState | None]:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"expected {CKPT_MAGIC!r}, got {magic!r}")
    version = r.take(1)[0]
    if version != CKPT_VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    header = r.json()
    store = ParameterStore()
    for e in header["entries"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        store.add(e["name"], r.floats(n).reshape(shape), bool(e["trainable"]))
    adam = None
    if r.remaining:
        magic = r.take(4)
        if magic != ADAM_MAGIC:
            raise BadMagicError(f"expected {ADAM_MAGIC!r} trailer, got {magic!r}")
        meta = r.json()
        adam = AdamState(
            lr=float(meta["lr"]),
            beta1=float(meta["beta1"]),
            beta2=float(meta["beta2"]),
            eps=float(meta["eps"]),
            t=int(meta["t"]),
        )
        for name, t in store.trainable_items():
            adam.m[name] = r.floats(t.size).reshape(t.shape)
            adam.v[name] = r.floats(t.size).reshape(t.shape)
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes after checkpoint payload")
    return store, header["config"], adam


def save_checkpoint(
    path: str | Path, store: ParameterStore, config: dict, adam: AdamState | None = None
) -> None:
    atomic_write_bytes(path, encode_checkpoint(store, config, adam))


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict, AdamState | None]:
    return decode_checkpoint(Path(path).read_bytes())
