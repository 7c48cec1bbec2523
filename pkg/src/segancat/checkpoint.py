"""Single-file checkpoint container.

Layout::

    b"SEGANCKP"  | uint64 LE header length | JSON header | raw little-endian blobs

The header carries ``format_version``, ``arch``, a ``parameters`` table and an
``optimizer`` table (name -> shape, dtype, byte offset, byte length; offsets
relative to the first blob), ``epoch``, ``seed`` and a free-form ``train_state``
object. Serialisation is canonical (sorted keys, fixed separators) so equal
contents give equal bytes.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SEGANCKP"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    arch: dict
    params: dict
    optimizer: dict = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    train_state: dict = field(default_factory=dict)


def _table(arrays: dict, blobs: list, offset: int):
    table = {}
    for name in sorted(arrays):  # canonical blob order, so dumps(loads(b)) == b
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype.newbyteorder("<")
        raw = a.astype(dt, copy=False).tobytes()
        table[name] = {"shape": list(a.shape), "dtype": dt.str, "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    return table, offset


def dumps(ckpt: Checkpoint) -> bytes:
    blobs: list = []
    params, end = _table(ckpt.params, blobs, 0)
    opt, _ = _table(ckpt.optimizer, blobs, end)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": ckpt.arch,
        "parameters": params,
        "optimizer": opt,
        "epoch": int(ckpt.epoch),
        "seed": int(ckpt.seed),
        "train_state": ckpt.train_state,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_LEN.pack(len(hdr)))
    buf.write(hdr)
    for b in blobs:
        buf.write(b)
    return buf.getvalue()


def loads(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if raw[:len(MAGIC)] != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (n,) = _LEN.unpack_from(raw, pos)
    pos += _LEN.size
    try:
        header = json.loads(raw[pos:pos + n])
    except ValueError as exc:
        raise DataError(f"{source}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported format_version {header.get('format_version')!r}")
    base = pos + n

    def read(table):
        out = {}
        for name, e in table.items():
            lo, hi = base + e["offset"], base + e["offset"] + e["length"]
            if hi > len(raw):
                raise DataError(f"{source}: blob for {name} is truncated")
            a = np.frombuffer(raw[lo:hi], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            out[name] = a.astype(a.dtype.newbyteorder("="))
        return out

    return Checkpoint(arch=header["arch"], params=read(header["parameters"]),
                      optimizer=read(header["optimizer"]), epoch=header["epoch"],
                      seed=header["seed"], train_state=header.get("train_state", {}))


def save(path, ckpt: Checkpoint):
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes(), str(path))
