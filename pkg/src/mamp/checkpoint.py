"""Checkpoint container: architecture, parameters, optimizer and schedule state."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import torch

from mamp.model import MAMP, ArchConfig
from mamp.numerics import AdamWState

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    arch: ArchConfig
    model: MAMP
    optimizer: AdamWState | None = None
    schedule_step: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)

    def to_payload(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "arch": self.arch.to_dict(),
            "params": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "optimizer": None if self.optimizer is None else self.optimizer.state_dict(),
            "schedule_step": self.schedule_step,
            "seed": self.seed,
            "config": self.config,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "Checkpoint":
        version = payload.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version!r}")
        arch = ArchConfig.from_dict(payload["arch"])
        params = payload["params"]
        dtype = next(iter(params.values())).dtype
        model = MAMP(arch).to(dtype)
        model.load_state_dict(params)
        opt = payload["optimizer"]
        return cls(
            arch=arch,
            model=model,
            optimizer=None if opt is None else AdamWState.from_state_dict(opt),
            schedule_step=payload["schedule_step"],
            seed=payload["seed"],
            config=payload["config"],
        )


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    # serialize to memory first so the archive never embeds the target filename
    buf = io.BytesIO()
    torch.save(ckpt.to_payload(), buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Path) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    return Checkpoint.from_payload(payload)
