"""Checkpoint directories: ``manifest.json`` + flat little-endian tensor file + RNG states.

``tensors.bin`` layout (all integers little-endian)::

    magic   8 bytes  b"CDSRTNS1"
    count   uint32
    then per tensor:
      name_len uint16, name utf-8 bytes
      ndim     uint8,  dims uint32 * ndim
      payload  float32 * prod(dims), row-major

``rng.bin`` holds length-prefixed (uint32) raw byte blobs, one per named RNG state.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CDSRTNS1"
MANIFEST = "manifest.json"
TENSORS = "tensors.bin"
RNG = "rng.bin"


class CheckpointError(RuntimeError):
    pass


class CheckpointMismatch(CheckpointError):
    """The checkpoint is readable but does not fit the configuration or data it is paired with."""


def write_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_tensors(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    try:
        (count,) = struct.unpack_from("<I", data, 8)
        pos, out = 12, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt tensor file") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return out


def write_rng(path, states: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(states)))
        for name, blob in states.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<I", len(blob)) + bytes(blob))


def read_rng(path) -> dict:
    data = Path(path).read_bytes()
    (count,) = struct.unpack_from("<I", data, 0)
    pos, out = 4, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + nlen].decode("utf-8")
        pos += 2 + nlen
        (blen,) = struct.unpack_from("<I", data, pos)
        out[name] = data[pos + 4 : pos + 4 + blen]
        pos += 4 + blen
    return out


def write_manifest(directory, manifest: dict) -> None:
    Path(directory, MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(directory) -> dict:
    path = Path(directory, MANIFEST)
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {path}: {exc}") from exc
