"""Motion extraction, motion intensity and mask sampling.

Functions accept numpy arrays or torch tensors with a trailing
``(T, V, C)`` layout and any number of leading batch dimensions. Mask
sampling works on numpy and draws from a ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

PADDING_MODES = ("zero", "replicate")
EPS_CLAMP = 1e-12


def round_half_up(x: float) -> int:
    """Round half away from zero for non-negative ``x``."""
    return int(math.floor(x + 0.5))


def num_masked(num_tokens: int, mask_ratio: float) -> int:
    return round_half_up(mask_ratio * num_tokens)


def _concat(parts, like):
    if isinstance(like, torch.Tensor):
        return torch.cat(parts, dim=-3)
    return np.concatenate(parts, axis=-3)


def _zeros_like(x):
    return torch.zeros_like(x) if isinstance(x, torch.Tensor) else np.zeros_like(x)


def extract_motion(seq, stride: int = 1, padding: str = "zero"):
    """Temporal difference ``M[i] = S[i] - S[i - stride]`` over axis -3.

    The first ``stride`` frames are zeros (``padding="zero"``) or copies of
    frames ``stride .. 2*stride-1`` (``padding="replicate"``).
    """
    if padding not in PADDING_MODES:
        raise ValueError(f"unknown padding {padding!r}, expected one of {PADDING_MODES}")
    T = seq.shape[-3]
    if not 1 <= stride < T:
        raise ValueError(f"stride must satisfy 1 <= stride < T, got stride={stride}, T={T}")
    diff = seq[..., stride:, :, :] - seq[..., :-stride, :, :]
    if padding == "zero":
        head = _zeros_like(diff[..., :stride, :, :])
    else:
        if 2 * stride > T:
            raise ValueError(f"replicate padding needs T >= 2*stride, got T={T}, stride={stride}")
        head = diff[..., :stride, :, :]
    return _concat([head, diff], diff)


def motion_intensity(motion, segment_len: int):
    """Sum of absolute motion over each segment's frames and channels -> ``(..., T_e, V)``."""
    T, V, C = motion.shape[-3:]
    if segment_len < 1 or T % segment_len:
        raise ValueError(f"sequence length {T} is not divisible by segment length {segment_len}")
    lead = motion.shape[:-3]
    seg = motion.reshape(*lead, T // segment_len, segment_len, V, C)
    return abs(seg).sum(-1).sum(-2)


def masking_probabilities(intensity: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax of ``intensity / temperature`` over the flattened token grid."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    intensity = np.asarray(intensity, dtype=np.float64)
    grid = intensity.shape[-2:]
    flat = intensity.reshape(*intensity.shape[:-2], -1) / temperature
    flat = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(*intensity.shape[:-2], *grid)


@dataclass(frozen=True)
class MaskPlan:
    """Partition of a ``T_e x V`` token grid into masked and unmasked flat indices.

    Flat index of token ``(t, v)`` is ``t * V + v``. Both index arrays are
    sorted ascending.
    """

    masked: np.ndarray
    unmasked: np.ndarray
    grid: tuple[int, int]
    mask_ratio: float

    @classmethod
    def from_masked(cls, masked, grid: tuple[int, int], mask_ratio: float) -> "MaskPlan":
        n = grid[0] * grid[1]
        masked = np.unique(np.asarray(masked, dtype=np.int64))
        if masked.size and (masked[0] < 0 or masked[-1] >= n):
            raise ValueError(f"masked index out of range for grid {grid}")
        keep = np.ones(n, dtype=bool)
        keep[masked] = False
        return cls(masked, np.flatnonzero(keep).astype(np.int64), tuple(grid), mask_ratio)

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def num_unmasked(self) -> int:
        return int(self.unmasked.size)

    def to_list(self) -> list[int]:
        return [int(i) for i in self.masked]


def gumbel_top_k(log_p: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of the ``k`` largest ``log_p + Gumbel`` scores along the last axis.

    Ties are broken by the lowest index. Works row-wise on 2-D input.
    """
    eps = np.clip(rng.random(log_p.shape), EPS_CLAMP, 1.0 - EPS_CLAMP)
    scores = log_p - np.log(-np.log(eps))
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def sample_mask(pi: np.ndarray, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Motion-aware mask: Gumbel top-K over ``log(pi)`` on a ``T_e x V`` grid."""
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    pi = np.asarray(pi, dtype=np.float64)
    grid = pi.shape[-2:]
    k = num_masked(pi.size, mask_ratio)
    with np.errstate(divide="ignore"):
        log_p = np.log(pi.reshape(-1))
    return MaskPlan.from_masked(gumbel_top_k(log_p, k, rng), grid, mask_ratio)


def sample_mask_random(grid: tuple[int, int] | int, mask_ratio: float,
                       rng: np.random.Generator) -> MaskPlan:
    """Uniform mask of ``round(mask_ratio * N)`` distinct tokens."""
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    if isinstance(grid, int):
        grid = (1, grid)
    n = grid[0] * grid[1]
    k = num_masked(n, mask_ratio)
    return MaskPlan.from_masked(rng.permutation(n)[:k], grid, mask_ratio)


def motion_aware_plan(view: np.ndarray, segment_len: int, mask_ratio: float,
                      temperature: float, rng: np.random.Generator) -> MaskPlan:
    """Mask plan for one ``T_s x V x C`` view, guided by its segment-stride motion."""
    motion = extract_motion(view, stride=segment_len, padding="replicate")
    pi = masking_probabilities(motion_intensity(motion, segment_len), temperature)
    return sample_mask(pi, mask_ratio, rng)
