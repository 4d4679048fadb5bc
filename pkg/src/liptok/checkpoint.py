"""Binary tokenizer checkpoints.

Layout, all integers little-endian::

    b"LTOK"
    u16   format version
    u32   config length, then that many bytes of UTF-8 JSON (keys sorted)
    u32   tensor count
    per tensor:
        u16 name length, name (UTF-8)
        u8  dtype tag length, dtype tag (ASCII, e.g. "<f8")
        u8  rank
        u32 × rank  dims
        raw little-endian element data, C order
    u32   CRC32 of every preceding byte

The config is authoritative: loading rebuilds the tokenizer from it and then
overwrites every tensor, so a K=256 checkpoint comes back with K=256 whatever
the estimator defaults are.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .tokenizers import ActionTokenizer

MAGIC = b"LTOK"
VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, corrupted or of another version."""


def _estimator_config(tok: ActionTokenizer) -> dict:
    cfg = tok.config_.to_dict()
    cfg["dtype"] = tok.dtype
    cfg["n_features"] = int(tok.n_features_in_)
    cfg["n_steps_trained"] = int(tok.n_steps_trained_)
    return cfg


def _named_tensors(tok: ActionTokenizer) -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in tok.parameters().items()}
    arrays["normalization.offset"] = tok.offset_
    arrays["normalization.scale"] = tok.scale_
    if tok.codebook_ is not None:
        arrays["codebook.usage_counts"] = tok.codebook_.usage_counts
    return dict(sorted(arrays.items()))


def dumps(tok: ActionTokenizer) -> bytes:
    """Serialise a fitted tokenizer to bytes."""
    config = json.dumps(_estimator_config(tok), sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = _named_tensors(tok)
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(config)), config,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")
        tag = arr.dtype.newbyteorder("<").str
        if tag not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        tag_b = tag.encode("ascii")
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<B", len(tag_b)), tag_b,
                  struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
                  arr.astype(tag, copy=False).tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(tok: ActionTokenizer, path) -> None:
    """Write atomically: a temporary sibling file is renamed into place."""
    data = dumps(tok)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> ActionTokenizer:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("bad magic bytes: not an LTOK checkpoint")
    if len(data) < 10:
        raise CheckpointError("truncated checkpoint")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC32 mismatch: checkpoint is corrupted or truncated")
    r = _Reader(body)
    r.pos = 6
    (n_cfg,) = r.unpack("<I", "config length")
    try:
        cfg = json.loads(r.take(n_cfg, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable config block: {exc}") from exc
    (n_tensors,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(n_tensors):
        (n_name,) = r.unpack("<H", "tensor name length")
        name = r.take(n_name, "tensor name").decode("utf-8")
        (n_tag,) = r.unpack("<B", "dtype tag length")
        tag = r.take(n_tag, "dtype tag").decode("ascii")
        if tag not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag!r}")
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        count = int(np.prod(dims, dtype=np.int64))
        raw = r.take(count * np.dtype(tag).itemsize, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype=tag).astype(_DTYPES[tag])
        arr.shape = tuple(dims)  # also handles rank 0
        tensors[name] = arr
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor directory")
    return _rebuild(cfg, tensors)


def _rebuild(cfg: dict, tensors: dict[str, np.ndarray]) -> ActionTokenizer:
    cfg = dict(cfg)
    n_features = cfg.pop("n_features")
    trained = cfg.pop("n_steps_trained", 0)
    cfg["encoder_hidden"] = tuple(cfg["encoder_hidden"])
    tok = ActionTokenizer(random_state=0, n_steps=0, **cfg)
    tok.initialize(n_features, tensors.pop("normalization.offset"), tensors.pop("normalization.scale"))
    tok.n_steps_trained_ = trained
    if "codebook.usage_counts" in tensors:
        tok.codebook_.usage_counts = tensors.pop("codebook.usage_counts").astype(np.int64)
    params = tok.parameters()
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CheckpointError(f"tensor set does not match config (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, config implies {p.data.shape}")
        p.data = tensors[name].astype(p.data.dtype).copy()
        p.zero_grad()
    return tok


def load_checkpoint(path) -> ActionTokenizer:
    return loads(Path(path).read_bytes())
