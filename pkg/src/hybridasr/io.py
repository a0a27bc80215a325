"""Binary containers for checkpoints and acoustic feature files.

Checkpoint layout (all integers little-endian)::

    b"HASRCKPT" | u32 version | u16 len + fingerprint (ascii)
    | u32 len + config JSON | u32 len + meta JSON | u32 n_blobs | blob*
    blob = u16 len + name (utf-8) | u8 dtype code | u8 ndim | u32 dim * ndim
           | row-major data

Blob names are ``param/<name>`` for model parameters and
``adam_m/<name>``, ``adam_v/<name>`` for optimizer moments.

Feature file layout::

    b"HASRFEAT" | u32 version | u32 D_a | u32 T0 | float32 T0*D_a row-major

with an optional ``<file>.tok`` sidecar holding whitespace-separated token ids.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig

CKPT_MAGIC = b"HASRCKPT"
FEAT_MAGIC = b"HASRFEAT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # step, epoch, adam counters

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    fp = ckpt.fingerprint.encode("ascii")
    cfg = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode()
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    blobs = [("param/" + k, v) for k, v in ckpt.params.items()]
    blobs += [(k, v) for k, v in ckpt.optimizer.items()]
    out = [CKPT_MAGIC, struct.pack("<I", VERSION), struct.pack("<H", len(fp)), fp,
           struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(blobs))]
    out += [_pack_blob(n, a) for n, a in blobs]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_checkpoint(buf: bytes, what: str = "checkpoint") -> Checkpoint:
    r = _Reader(buf, what)
    if r.take(8) != CKPT_MAGIC:
        raise FormatError(f"{what}: bad magic (not a checkpoint)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    (n,) = r.unpack("<H")
    fp = r.take(n).decode("ascii")
    (n,) = r.unpack("<I")
    cfg = TrainConfig(**json.loads(r.take(n)))
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n))
    if cfg.fingerprint() != fp:
        raise FormatError(f"{what}: stored fingerprint does not match stored config")
    (count,) = r.unpack("<I")
    params, opt = {}, {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{what}: blob {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        arr = np.frombuffer(r.take(int(np.prod(shape)) * dt.itemsize), dtype=dt).reshape(shape).copy()
        if name.startswith("param/"):
            params[name[6:]] = arr
        else:
            opt[name] = arr
    if r.pos != len(buf):
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes")
    return Checkpoint(cfg, params, opt, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps_checkpoint(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads_checkpoint(path.read_bytes(), str(path))


def write_features(path, feats: np.ndarray, tokens=None) -> Path:
    feats = np.asarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError(f"features must be (T0, D_a), got {feats.shape}")
    path = Path(path)
    t0, d = feats.shape
    path.write_bytes(FEAT_MAGIC + struct.pack("<III", VERSION, d, t0) + feats.tobytes())
    if tokens is not None:
        Path(str(path) + ".tok").write_text(" ".join(str(int(t)) for t in tokens) + "\n")
    return path


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    r = _Reader(path.read_bytes(), str(path))
    if r.take(8) != FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic (not a feature file)")
    version, d, t0 = r.unpack("<III")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    arr = np.frombuffer(r.take(4 * d * t0), dtype="<f4").reshape(t0, d).copy()
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite feature values")
    return arr


def read_tokens(path) -> list[int] | None:
    side = Path(str(path) + ".tok")
    if not side.exists():
        return None
    return [int(x) for x in side.read_text().split()]
