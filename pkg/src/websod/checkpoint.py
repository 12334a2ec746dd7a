"""Versioned checkpoints: safetensors payload with a JSON schema header."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Mapping

import torch
from safetensors.torch import load_file, save_file
from safetensors import safe_open
from torch import nn

DETECTOR_SCHEMA = "websod.detector/1"
RFR_SCHEMA = "websod.rfr/1"


class CheckpointError(RuntimeError):
    pass


def state_digest(state: nn.Module | Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over parameter names, dtypes, shapes and raw bytes (sorted by name)."""
    if isinstance(state, nn.Module):
        state = state.state_dict()
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save(path: str | Path, module: nn.Module, schema: str, config: object, extra: Mapping[str, str] | None = None) -> str:
    """Write ``module``'s weights; returns the state digest."""
    state = {k: v.detach().cpu().contiguous() for k, v in module.state_dict().items()}
    digest = state_digest(state)
    meta = {
        "schema": schema,
        "config": json.dumps(asdict(config) if hasattr(config, "__dataclass_fields__") else config, sort_keys=True),
        "digest": digest,
    }
    meta.update(extra or {})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(state, str(path), metadata=meta)
    return digest


def read_header(path: str | Path) -> dict[str, str]:
    with safe_open(str(path), framework="pt") as f:
        return dict(f.metadata() or {})


def load_state(path: str | Path, schema: str) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(state_dict, header)`` after checking the schema and digest."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    header = read_header(path)
    if header.get("schema") != schema:
        raise CheckpointError(f"{path}: schema {header.get('schema')!r}, expected {schema!r}")
    state = load_file(str(path))
    if state_digest(state) != header.get("digest"):
        raise CheckpointError(f"{path}: digest mismatch, file is corrupt")
    header["config"] = json.loads(header["config"])
    return state, header
