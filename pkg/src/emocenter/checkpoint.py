"""Versioned binary container of named float64 tensors plus a JSON metadata blob.

Layout (little-endian)::

    b"EMCK"  u32 version  u32 n_tensors  u32 meta_len  meta (UTF-8 JSON)
    per tensor: u16 name_len  name (UTF-8)  u8 ndim  u32 * ndim shape  f64 * prod(shape)
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .losses import CenterBank
from .model import EncoderConfig, Standardizer

MAGIC = b"EMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<III", VERSION, len(tensors), len(meta_bytes)), meta_bytes]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<HB", len(encoded), arr.ndim) + encoded)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, count, meta_len = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    tensors = {}
    try:
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", raw, pos)
            pos += 3
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape))
            if pos + 8 * n > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
    except struct.error:
        raise CheckpointError(f"{path}: truncated checkpoint") from None
    return tensors, meta


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(path, params: Mapping[str, np.ndarray], bank: CenterBank, encoder: EncoderConfig,
                    standardizer: Standardizer | None = None, extra_meta: Mapping | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in params.items()}
    tensors["centers/c"] = bank.centers
    tensors["centers/alpha"] = np.array(bank.alpha)
    tensors["centers/t"] = np.array(float(bank.t))
    if standardizer is not None and standardizer.mean.size:
        tensors["input/mean"] = standardizer.mean
        tensors["input/std"] = standardizer.std
    meta = {"encoder": encoder.to_dict(), **(extra_meta or {})}
    write_tensors(path, tensors, meta)


def load_checkpoint(path):
    """Returns (params, bank, encoder config, standardizer, metadata)."""
    tensors, meta = read_tensors(path)
    try:
        params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
        bank = CenterBank(tensors["centers/c"], float(tensors["centers/alpha"]), int(tensors["centers/t"]))
        encoder = EncoderConfig.from_dict(meta["encoder"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from None
    std = Standardizer(tensors["input/mean"], tensors["input/std"]) if "input/mean" in tensors else Standardizer()
    return params, bank, encoder, std, meta
