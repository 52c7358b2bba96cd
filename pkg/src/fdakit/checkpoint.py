"""Checkpoint files: a JSON header followed by raw little-endian float32 arrays.

Layout::

    b"FDAKIT-CKPT 1\\n"
    uint64 LE    header length in bytes
    header       UTF-8 JSON: architecture, arch_hash, params[name, shape, offset, nbytes],
                 payload_bytes, metadata
    payload      parameter arrays, concatenated in declared order
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .nn import Architecture, Model
from .tensor import Tensor

MAGIC = b"FDAKIT-CKPT 1\n"


class CheckpointError(ValueError):
    pass


def architecture_hash(arch: Architecture) -> str:
    canon = json.dumps(arch.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def save_checkpoint(model: Model, path) -> Path:
    params, offset, chunks = [], 0, []
    for name, t in model.parameters.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        params.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "fdakit-checkpoint",
        "version": 1,
        "architecture": model.architecture.to_dict(),
        "arch_hash": architecture_hash(model.architecture),
        "params": params,
        "payload_bytes": offset,
        "metadata": model.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True, indent=1).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    return path


def read_header(path) -> tuple[dict, bytes]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise CheckpointError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<Q", buf[pos:pos + 8])
    pos += 8
    if len(buf) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header, expected {hlen} bytes, got {len(buf) - pos}")
    try:
        header = json.loads(buf[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return header, buf[pos + hlen:]


def load_checkpoint(path) -> Model:
    header, payload = read_header(path)
    try:
        arch = Architecture.from_dict(header["architecture"])
        declared = header["params"]
        declared_total = int(header["payload_bytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if architecture_hash(arch) != header.get("arch_hash"):
        raise CheckpointError(f"{path}: architecture hash mismatch")

    expected = arch.param_shapes()
    names = [p["name"] for p in declared]
    if names != list(expected):
        raise CheckpointError(f"{path}: parameter list {names} does not match architecture {list(expected)}")
    offset = 0
    for p in declared:
        shape = tuple(p["shape"])
        if shape != expected[p["name"]]:
            raise CheckpointError(f"{path}: {p['name']} declared shape {shape}, architecture needs {expected[p['name']]}")
        nbytes = 4 * math.prod(shape)
        if p["nbytes"] != nbytes or p["offset"] != offset:
            raise CheckpointError(f"{path}: {p['name']} has inconsistent offset/size in header")
        offset += nbytes
    if offset != declared_total:
        raise CheckpointError(f"{path}: header payload_bytes {declared_total} != sum of arrays {offset}")
    if len(payload) != offset:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {offset}")

    params = {}
    for p in declared:
        arr = np.frombuffer(payload, dtype="<f4", count=math.prod(p["shape"]), offset=p["offset"])
        params[p["name"]] = Tensor(arr.reshape(p["shape"]).astype(np.float32))
    return Model(arch, params, header.get("metadata", {}))
