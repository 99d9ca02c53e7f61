"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"HYPTYPE\\0"
    version    uint32    currently 1
    hlen       uint64    length of the header
    header     hlen bytes of UTF-8 JSON
    payload    concatenated float64 ('<f8') tensors, C order
    digest     32 bytes  SHA-256 of everything above

The header holds ``tensors``, a list of ``{"group", "name", "manifold",
"shape", "offset", "count"}`` entries (offset and count in float64 units
from the start of the payload), plus arbitrary JSON metadata (settings,
model config, component spaces, vocabularies, label inventory, optimizer
hyper-parameters, training progress). Groups are ``param`` (trainable
parameters), ``adam_m`` / ``adam_v`` (optimizer moments) and ``words`` (the
frozen word table).

Files are written to a temporary sibling and renamed into place, so a reader
never sees a partially written checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Parameter

MAGIC = b"HYPTYPE\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(tensors: Mapping[str, Mapping[str, np.ndarray]], manifolds: Mapping[str, str], meta: dict) -> bytes:
    """Serialise ``{group: {name: array}}`` plus JSON metadata."""
    entries = []
    blobs = []
    offset = 0
    for group, arrays in tensors.items():
        for name, arr in arrays.items():
            arr = np.array(arr, dtype="<f8", order="C")
            entries.append(
                {
                    "group": group,
                    "name": name,
                    "manifold": manifolds.get(name, "euclidean"),
                    "shape": list(arr.shape),
                    "offset": offset,
                    "count": int(arr.size),
                }
            )
            blobs.append(arr.tobytes())
            offset += arr.size
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes):
    """Inverse of :func:`encode`: returns ``(tensors, manifolds, meta)``."""
    fixed = len(MAGIC) + 12
    if len(data) < fixed + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is truncated or corrupted (digest mismatch)")
    version, hlen = struct.unpack("<IQ", body[len(MAGIC) : fixed])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(body[fixed : fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("unreadable checkpoint header") from None
    payload = np.frombuffer(body[fixed + hlen :], dtype="<f8")
    tensors: dict[str, dict[str, np.ndarray]] = {}
    manifolds = {}
    for e in header["tensors"]:
        lo, n = e["offset"], e["count"]
        if lo + n > payload.size:
            raise CheckpointError(f"tensor {e['name']} runs past the payload")
        arr = payload[lo : lo + n].astype(np.float64).reshape(tuple(e["shape"]))
        tensors.setdefault(e["group"], {})[e["name"]] = arr
        if e["group"] == "param":
            manifolds[e["name"]] = e["manifold"]
    return tensors, manifolds, header["meta"]


def save(path: str | Path, params: Mapping[str, Parameter], meta: dict, extra: Mapping[str, Mapping[str, np.ndarray]] | None = None):
    tensors = {"param": {name: p.value for name, p in params.items()}}
    tensors.update(extra or {})
    manifolds = {name: p.manifold for name, p in params.items()}
    atomic_write_bytes(path, encode(tensors, manifolds, meta))


def load(path: str | Path):
    """Returns ``(params, extra tensor groups, meta)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    tensors, manifolds, meta = decode(data)
    params = {name: Parameter(name, arr, manifolds[name]) for name, arr in tensors.pop("param", {}).items()}
    return params, tensors, meta
