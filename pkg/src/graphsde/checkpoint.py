"""Versioned binary checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"GSDECKPT"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header, keys sorted, no whitespace
    offset 20+H          payload: float64 little-endian arrays, C order

The header holds ``config`` (echo of the run config), ``step`` (training
step counter), ``rng_state`` (numpy bit-generator state) and ``tensors``,
a list of ``{"name", "shape", "offset", "count"}`` entries with offsets
relative to the payload start. Tensor names are ``x/<param>``,
``a/<param>``, ``mx/<param>`` (optional marginal X model), ``ema/x/<param>``
and ``ema/a/<param>``. Nothing time-dependent is stored, so equal runs
give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GSDECKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = _dumps({"config": ckpt.config, "step": int(ckpt.step), "rng_state": ckpt.rng_state,
                     "extra": ckpt.extra, "tensors": entries})
    blob = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack("<IQ", blob[8:20])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(blob[20:20 + hlen])
        base = 20 + hlen
        tensors = {}
        for e in header["tensors"]:
            arr = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=base + e["offset"])
            tensors[e["name"]] = arr.reshape(tuple(e["shape"])).astype(np.float64)
        return Checkpoint(header["config"], tensors, header["step"], header["rng_state"], header.get("extra", {}))
    except (struct.error, ValueError, KeyError, TypeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
