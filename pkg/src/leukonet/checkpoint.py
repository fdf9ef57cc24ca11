"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"LKNCKPT\\x00"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header (sorted keys, no whitespace)
    20+H    ...   payload: float64 '<f8' arrays back to back

The header holds ``config`` (model configuration echo), ``seed``, ``epoch``,
``metric`` (selection score), ``metadata`` (free-form) and ``arrays``, a
list of ``{"name", "shape", "offset", "count"}`` entries where ``offset``
is in bytes from the start of the payload. Array names are prefixed with
``param:`` for trainable tensors and ``buffer:`` for normalization running
statistics. The encoding is deterministic: equal content gives equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

MAGIC = b"LKNCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    state: Dict[str, np.ndarray]
    seed: int
    epoch: int
    metric: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        arrays = []
        chunks = []
        offset = 0
        for name in sorted(self.state):
            arr = np.ascontiguousarray(self.state[name], dtype="<f8")
            raw = arr.tobytes()
            arrays.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            chunks.append(raw)
            offset += len(raw)
        header = {
            "arrays": arrays,
            "config": self.config,
            "epoch": self.epoch,
            "metadata": self.metadata,
            "metric": self.metric,
            "seed": self.seed,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<IQ", blob[8:20])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(blob[20:20 + hlen].decode("utf-8"))
        payload = memoryview(blob)[20 + hlen:]
        state = {}
        for entry in header["arrays"]:
            start = entry["offset"]
            stop = start + 8 * entry["count"]
            if stop > len(payload):
                raise CheckpointError(f"array {entry['name']!r} runs past the end of the file")
            arr = np.frombuffer(payload[start:stop], dtype="<f8").astype(np.float64)
            state[entry["name"]] = arr.reshape(entry["shape"])
        return cls(
            config=header["config"],
            state=state,
            seed=header["seed"],
            epoch=header["epoch"],
            metric=header["metric"],
            metadata=header["metadata"],
        )

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write ``ckpt`` and return its SHA-256."""
    blob = ckpt.to_bytes()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def checkpoint_from_model(model, epoch: int, metric: Optional[float] = None, metadata: Optional[dict] = None) -> Checkpoint:
    meta = {"init": model.init_scheme}
    meta.update(metadata or {})
    return Checkpoint(model.config.to_dict(), model.state_dict(), model.seed, epoch, metric, meta)


def model_from_checkpoint(ckpt: Checkpoint):
    from .model import ModelConfig, build_model

    model = build_model(ModelConfig.from_dict(ckpt.config), ckpt.seed)
    model.load_state_dict(ckpt.state)
    return model
