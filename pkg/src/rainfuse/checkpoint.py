"""Self-describing checkpoint archives.

A checkpoint is one ``torch.save`` file holding a dict::

    {"format": 1, "kind": "cleannet" | "fusion", "config": {...}, "step": int,
     "modules": {name: state_dict}, "optimizers": {name: state_dict},
     "rng": numpy bit-generator state or None, "extra": {...}}
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Any

import torch
from torch import nn

FORMAT_VERSION = 1
KINDS = ("cleannet", "fusion")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: dict,
    modules: dict[str, nn.Module | dict],
    step: int = 0,
    optimizers: dict[str, torch.optim.Optimizer | dict] | None = None,
    rng: dict | None = None,
    extra: dict | None = None,
) -> Path:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def state(obj):
        return obj.state_dict() if hasattr(obj, "state_dict") else obj

    bundle = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "step": int(step),
        "modules": {k: state(m) for k, m in modules.items()},
        "optimizers": {k: state(o) for k, o in (optimizers or {}).items()},
        "rng": rng,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(bundle, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, kind: str | None = None) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        bundle = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(bundle, dict) or bundle.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a format-{FORMAT_VERSION} checkpoint")
    if kind is not None and bundle["kind"] != kind:
        raise CheckpointError(f"{path} holds a {bundle['kind']} checkpoint, expected {kind}")
    return bundle


def parameter_bytes(module: nn.Module | dict) -> bytes:
    sd = module.state_dict() if hasattr(module, "state_dict") else module
    return b"".join(k.encode() + sd[k].detach().cpu().contiguous().numpy().tobytes() for k in sorted(sd))


def parameter_hash(module: nn.Module | dict) -> str:
    return hashlib.sha256(parameter_bytes(module)).hexdigest()
