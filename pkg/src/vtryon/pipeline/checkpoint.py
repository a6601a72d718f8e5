"""Stage checkpoints: weights, optimiser state, config snapshot and counters in one file."""
from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

FORMAT_VERSION = 1
STAGES = ("warp", "parse", "tryon")


class CheckpointError(FileNotFoundError):
    pass


@dataclass
class Checkpoint:
    stage: str
    iteration: int
    weights: dict[str, dict[str, torch.Tensor]]
    optimizers: dict[str, dict] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    history: list[dict] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_payload(self) -> dict:
        return {"stage": self.stage, "iteration": self.iteration, "weights": self.weights,
                "optimizers": self.optimizers, "config": self.config, "seed": self.seed,
                "history": self.history, "extra": self.extra, "format_version": self.format_version}


def stage_path(ckpt_dir: str | Path, stage: str, tag: str | None = None) -> Path:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    name = stage if tag is None else f"{stage}_{tag}"
    return Path(ckpt_dir) / f"{name}.pt"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Atomic write: a crash mid-save never leaves a truncated checkpoint behind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(ckpt.to_payload(), tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path: str | Path, stage: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {payload.get('format_version')}")
    if stage is not None and payload["stage"] != stage:
        raise CheckpointError(f"{path} holds stage {payload['stage']!r}, expected {stage!r}")
    return Checkpoint(**payload)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
