"""Gradient, optimizer and learning-rate schedule primitives.

Arrays are ``torch.Tensor``; reverse-mode differentiation is delegated to
``torch.autograd``. The optimizer and the schedule are implemented here so
their exact update rules are under test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import torch
from torch import Tensor


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Return d(loss)/d(param) for every named parameter.

    Parameters the loss does not depend on get an all-zero gradient of the
    same shape.
    """
    if loss.dim() != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        n: torch.zeros_like(t) if g is None else g
        for n, t, g in zip(names, tensors, grads)
    }


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
            "exp_avg": {k: v.clone() for k, v in self.exp_avg.items()},
            "exp_avg_sq": {k: v.clone() for k, v in self.exp_avg_sq.items()},
        }

    @classmethod
    def from_state_dict(cls, d: Mapping) -> "AdamWState":
        return cls(**{k: d[k] for k in (
            "lr", "beta1", "beta2", "eps", "weight_decay", "step", "exp_avg", "exp_avg_sq"
        )})


@torch.no_grad()
def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamWState,
    lr: float | None = None,
    lr_scales: Mapping[str, float] | None = None,
    no_decay: Iterable[str] = (),
) -> AdamWState:
    """One AdamW update, applied to ``params`` in place.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` happens before the
    bias-corrected Adam step. ``lr_scales`` multiplies the learning rate per
    parameter (layer-wise decay); names in ``no_decay`` skip weight decay.
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
        if grads[name].shape != p.shape:
            raise ValueError(
                f"gradient shape {tuple(grads[name].shape)} != parameter shape "
                f"{tuple(p.shape)} for {name!r}"
            )
    no_decay = set(no_decay)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        step_lr = lr * (lr_scales.get(name, 1.0) if lr_scales else 1.0)
        if state.weight_decay and name not in no_decay:
            p.mul_(1.0 - step_lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m / bc1, denom, value=-step_lr)
    return state


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int
    peak_lr: float
    floor_lr: float

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(
                f"need 0 <= warmup_epochs < total_epochs, got "
                f"{self.warmup_epochs}, {self.total_epochs}"
            )
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if not 0 <= self.floor_lr <= self.peak_lr:
            raise ValueError(f"need 0 <= floor_lr <= peak_lr, got {self.floor_lr}, {self.peak_lr}")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate for update ``step`` in ``[0, total_steps)``.

    Linear warmup from 0 (step 0) to ``peak_lr`` (step ``warmup_steps``),
    then cosine decay that reaches ``floor_lr`` exactly on the last update,
    ``total_steps - 1``.
    """
    last = cfg.total_steps - 1
    if not 0 <= step <= last:
        raise ValueError(f"step {step} outside [0, {last}]")
    warmup = cfg.warmup_steps
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if step == warmup:
        return cfg.peak_lr
    if step == last:
        return cfg.floor_lr
    progress = (step - warmup) / (last - warmup)
    return cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + math.cos(math.pi * progress))


def trunc_normal_(t: Tensor, std: float, generator: torch.Generator) -> Tensor:
    # truncated at two standard deviations
    return torch.nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=generator)
