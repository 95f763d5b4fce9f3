"""Versioned checkpoint container.

Layout (all integers little-endian)::

    b"VPCK"                     magic
    u32  format version (1)
    u32  header length H in bytes
    H bytes of UTF-8 JSON header (keys sorted)
    payload: concatenated little-endian float32 arrays

The header holds ``config_hash``, ``lineage``, ``datasets``, ``heads``,
``num_speakers``, ``embedder`` and ``features`` configs, optional
``speakers`` list, and ``tensors``: a list of ``{"name", "shape",
"offset"}`` entries where ``offset`` counts bytes from the payload start.
Tensors are the model's parameters plus batch-norm running statistics.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .features import FeatureConfig
from .network import AgeGenderNet, EmbedderConfig

MAGIC = b"VPCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    embedder: EmbedderConfig
    features: FeatureConfig
    heads: tuple[str, ...]
    tensors: dict[str, np.ndarray]
    lineage: str = ""
    datasets: tuple[str, ...] = ()
    num_speakers: int = 0
    speakers: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return compat_hash(self.embedder, self.features)

    def build_model(self) -> AgeGenderNet:
        model = AgeGenderNet(self.embedder, self.heads, self.num_speakers)
        load_tensors(model, self.tensors)
        return model


def compat_hash(embedder: EmbedderConfig, features: FeatureConfig) -> str:
    """Identifies an embedder topology together with its input feature kind."""
    return f"{embedder.config_hash()}-{features.kind}{features.dim}"


def model_tensors(model: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, t in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        out[name] = t.detach().cpu().numpy().astype(np.float32)
    return out


def load_tensors(model: torch.nn.Module, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
    state = model.state_dict()
    mismatched, missing = [], []
    for name, t in state.items():
        if name.endswith("num_batches_tracked"):
            continue
        if name not in tensors:
            missing.append(name)
            continue
        if tuple(tensors[name].shape) != tuple(t.shape):
            mismatched.append(f"{name}: checkpoint {tuple(tensors[name].shape)} vs model {tuple(t.shape)}")
    if mismatched or (strict and missing):
        msg = []
        if mismatched:
            msg.append("shape mismatches:\n  " + "\n  ".join(mismatched))
        if strict and missing:
            msg.append("missing tensors: " + ", ".join(missing))
        raise CheckpointError("; ".join(msg))
    with torch.no_grad():
        for name, t in state.items():
            if name in tensors:
                t.copy_(torch.from_numpy(np.asarray(tensors[name])).to(t.dtype))


def save(path, ckpt: Checkpoint) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config_hash": ckpt.config_hash,
        "lineage": ckpt.lineage,
        "datasets": list(ckpt.datasets),
        "heads": list(ckpt.heads),
        "num_speakers": ckpt.num_speakers,
        "speakers": list(ckpt.speakers),
        "embedder": ckpt.embedder.to_dict(),
        "features": ckpt.features.to_dict(),
        "extra": ckpt.extra,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    payload = memoryview(raw)[_PREFIX.size + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 4 * n > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(payload[start:start + 4 * n], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float32)
    ckpt = Checkpoint(
        embedder=EmbedderConfig.from_dict(header["embedder"]),
        features=FeatureConfig(**header["features"]),
        heads=tuple(header["heads"]),
        tensors=tensors,
        lineage=header["lineage"],
        datasets=tuple(header["datasets"]),
        num_speakers=header["num_speakers"],
        speakers=tuple(header.get("speakers", ())),
        extra=header.get("extra", {}),
    )
    if ckpt.config_hash != header["config_hash"]:
        raise CheckpointError(f"{path}: stored config hash does not match its embedder config")
    return ckpt


def from_model(model: AgeGenderNet, features: FeatureConfig, lineage: str = "",
               datasets=(), speakers=(), extra: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(model.config, features, tuple(model.active_heads), model_tensors(model),
                      lineage, tuple(datasets), model.num_speakers, tuple(speakers), extra or {})
