"""Masked motion prediction pre-training loop and run records."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from mamp.checkpoint import Checkpoint, save_checkpoint
from mamp.config import PretrainConfig, config_hash, to_dict
from mamp.data import Corpus, SkeletonSequence, eval_view, load_corpus, training_view, view_rng
from mamp.errors import DataError, NumericalError
from mamp.model import MAMP, forward_pretrain, init_params, make_plans
from mamp.numerics import AdamWState, ScheduleConfig, adamw_step, backward, lr_at

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "metric", "value"]
MASK_STREAM = 1
SHUFFLE_STREAM = 2


def provenance() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        rev = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"mamp@{rev}" if rev else "mamp@unknown"


@dataclass
class RunRecord:
    """Per-epoch metric rows plus run metadata.

    ``metrics_csv()`` is the byte-stable part of the record; wall-clock time
    lives only in ``summary()``.
    """

    config_hash: str
    rows: list[tuple[int, str, str, float]] = field(default_factory=list)
    wall_clock: float = 0.0
    provenance: str = ""
    step_losses: list[float] = field(default_factory=list)

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        if self.rows and epoch < self.rows[-1][0]:
            raise ValueError(f"epoch {epoch} after epoch {self.rows[-1][0]}")
        self.rows.append((epoch, split, metric, float(value)))

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for epoch, split, metric, value in self.rows:
            w.writerow([epoch, split, metric, repr(value)])
        return buf.getvalue()

    def write(self, out: Path, stem: str = "metrics") -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.metrics_csv(), encoding="utf-8")
        (out / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2), encoding="utf-8")

    def summary(self) -> dict:
        return {"config_hash": self.config_hash, "wall_clock": self.wall_clock,
                "provenance": self.provenance, "num_rows": len(self.rows)}

    def values(self, metric: str, split: str | None = None) -> list[float]:
        return [v for _, s, m, v in self.rows if m == metric and (split is None or s == split)]


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def no_decay_names(model: torch.nn.Module) -> set[str]:
    """Biases, LayerNorm parameters, positional embeddings and the mask token."""
    return {n for n, p in model.named_parameters() if p.dim() < 2 or "pos_" in n or "mask_token" in n}


def check_compatible(seqs: Sequence[SkeletonSequence], arch) -> None:
    for s in seqs:
        _, V, C = s.frames.shape
        if (V, C) != (arch.V, arch.C_s):
            raise DataError(f"sequence {s.name or '?'} has {V} joints x {C} channels; "
                            f"the model expects {arch.V} x {arch.C_s}")


def batch_views(seqs: Sequence[SkeletonSequence], idx: np.ndarray, length: int, seed: int,
                epoch: int, augment: bool) -> np.ndarray:
    if augment:
        return np.stack([training_view(seqs[i].frames, length, view_rng(seed, epoch, int(i)))
                         for i in idx])
    return np.stack([eval_view(seqs[i].frames, length) for i in idx])


def dump_diagnostics(out: Path | None, step: int, epoch: int, idx, plans, loss: float) -> Path | None:
    if out is None:
        return None
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"nonfinite_step{step}.json"
    path.write_text(json.dumps({
        "step": step, "epoch": epoch, "loss": repr(loss),
        "samples": [int(i) for i in idx],
        "mask_plans": [p.to_list() for p in plans],
    }, indent=2), encoding="utf-8")
    return path


def pretrain(cfg: PretrainConfig, corpus: Corpus | None = None, out: Path | None = None,
             max_steps: int | None = None, model: MAMP | None = None) -> tuple[Checkpoint, RunRecord]:
    """Pre-train on the corpus' training split.

    Returns the final checkpoint and a record with per-epoch mean loss and
    learning rate. With ``out`` set, metrics and checkpoints are written
    there. ``max_steps`` stops early (the schedule still spans all epochs).
    """
    t0 = time.perf_counter()
    if corpus is None:
        corpus = load_corpus(Path(cfg.corpus))
    seqs = corpus.train
    if not seqs:
        raise ValueError("pre-training corpus has no training sequences")
    arch = cfg.arch
    check_compatible(seqs, arch)
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    if model is None:
        model = init_params(arch, cfg.seed, torch_dtype(cfg.dtype))
    params = dict(model.named_parameters())
    skip_decay = no_decay_names(model)

    n = len(seqs)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    sched = ScheduleConfig(cfg.warmup_epochs, cfg.epochs, steps_per_epoch, cfg.peak_lr, cfg.floor_lr)
    state = AdamWState(lr=cfg.peak_lr, beta1=cfg.betas[0], beta2=cfg.betas[1],
                       weight_decay=cfg.weight_decay)
    record = RunRecord(config_hash(cfg), provenance=provenance())
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, SHUFFLE_STREAM]).permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            views = batch_views(seqs, idx, arch.T_s, cfg.seed, epoch, cfg.augment)
            # resample_masks=False replays epoch 0's plans (fixed-batch overfitting)
            mask_epoch = epoch if cfg.resample_masks else 0
            rngs = [view_rng(cfg.seed, mask_epoch, int(i), MASK_STREAM) for i in idx]
            plans = make_plans(views, arch, rngs, cfg.masking, cfg.temperature)
            art = forward_pretrain(model, views, plans)
            loss = art.loss
            if not torch.isfinite(loss):
                value = loss.item()
                dump = dump_diagnostics(out, step, epoch, idx, plans, value)
                raise NumericalError(
                    f"non-finite loss {value} at step {step} (epoch {epoch}); "
                    f"diagnostics: {dump or 'not written (no output dir)'}")
            lr = lr_at(step, sched)
            grads = backward(loss, params)
            adamw_step(params, grads, state, lr=lr, no_decay=skip_decay)
            losses.append(loss.item())
            record.step_losses.append(loss.item())
            step += 1
        if not losses:
            break
        record.add(epoch, "train", "loss", float(np.mean(losses)))
        record.add(epoch, "train", "lr", lr)
        log.debug("epoch %d loss %.5f lr %.2e", epoch, np.mean(losses), lr)
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Checkpoint(arch, model, state, step, cfg.seed, to_dict(cfg)),
                            out / f"checkpoint_epoch{epoch + 1:04d}.pt")
    model.eval()
    ckpt = Checkpoint(arch, model, state, step, cfg.seed, to_dict(cfg))
    record.wall_clock = time.perf_counter() - t0
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoint.pt")
        record.write(out)
    return ckpt, record

