"""Checkpoint file format.

Layout::

    HIQCKPT <version>\\n
    <one-line JSON header>\\n
    <payload: raw little-endian float64 values>

The header records the full training config (flat ``section.key`` strings)
and its digest, the hierarchy and its digest, normalisation statistics, and
a tensor directory of ``{name, shape, offset, count}`` entries where
``offset`` and ``count`` are in float64 elements from the payload start.
``payload_sha256`` guards against corruption.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, config_digest, from_flat, to_flat
from .data import NormStats
from .hierarchy import LabelHierarchy
from .model import FlatModel, HierarchicalModel

MAGIC = "HIQCKPT"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: HierarchicalModel | FlatModel
    cfg: TrainConfig
    stats: NormStats
    kind: str


def model_kind(model) -> str:
    return "flat" if isinstance(model, FlatModel) else "hierarchical"


def save_checkpoint(model, stats: NormStats, path: str | Path, cfg: TrainConfig | None = None) -> Path:
    """Write ``model`` and its normalisation stats. Output bytes depend only on the inputs."""
    if cfg is None:
        cfg = TrainConfig(model=model.cfg)
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        flat = np.ascontiguousarray(p.data, dtype=_LE_F64).ravel()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    payload = b"".join(chunks)
    h = model.hierarchy
    header = {
        "format_version": FORMAT_VERSION,
        "kind": model_kind(model),
        "config": to_flat(cfg),
        "config_digest": config_digest(cfg),
        "hierarchy": h.to_dict(),
        "hierarchy_digest": h.digest(),
        "stats": stats.to_dict(),
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = f"{MAGIC} {FORMAT_VERSION}\n{json.dumps(header, sort_keys=True)}\n".encode()
    path.write_bytes(text + payload)
    return path


def _read(path: Path) -> tuple[dict, bytes]:
    raw = path.read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1) if first >= 0 else -1
    if first < 0 or second < 0:
        raise CheckpointError(f"{path}: truncated header")
    magic = raw[:first].decode("ascii", "replace").split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if magic[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"{path}: unsupported format version {magic[1]} (expected {FORMAT_VERSION})")
    try:
        header = json.loads(raw[first + 1 : second])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = raw[second + 1 :]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header declares {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    return header, payload


def load_checkpoint(path: str | Path, hierarchy: LabelHierarchy | None = None) -> Checkpoint:
    """Rebuild the model bit-exactly. ``hierarchy``, if given, must equal the stored one."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, payload = _read(path)
    h = LabelHierarchy.from_dict(header["hierarchy"])
    if h.digest() != header["hierarchy_digest"]:
        raise CheckpointError(f"{path}: hierarchy digest mismatch")
    if hierarchy is not None and hierarchy != h:
        raise CheckpointError(
            f"{path}: checkpoint hierarchy (N={h.N}, k={h.k}) does not match the requested one "
            f"(N={hierarchy.N}, k={hierarchy.k})"
        )
    try:
        cfg = from_flat(header["config"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: bad config: {exc}") from exc
    rng = np.random.default_rng(0)
    kind = header["kind"]
    if kind == "hierarchical":
        model = HierarchicalModel(h, cfg.model, rng)
    elif kind == "flat":
        model = FlatModel(h, cfg.model, rng)
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    values = np.frombuffer(payload, dtype=_LE_F64)
    params = dict(model.named_parameters())
    directory = {e["name"]: e for e in header["tensors"]}
    if set(directory) != set(params):
        missing = sorted(set(params) ^ set(directory))
        raise CheckpointError(f"{path}: tensor directory does not match the model: {missing[:5]}")
    for name, p in params.items():
        e = directory[name]
        if tuple(e["shape"]) != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {tuple(e['shape'])}, model expects {p.shape}")
        p.data = values[e["offset"] : e["offset"] + e["count"]].astype(np.float64).reshape(p.shape)
    return Checkpoint(model, cfg, NormStats.from_dict(header["stats"]), kind)
