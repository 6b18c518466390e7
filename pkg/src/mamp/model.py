"""Masked motion prediction network.

Tokens are ``l``-frame segments of one joint, embedded jointly, laid out on
a ``T_e x V`` grid (flat index ``t * V + v``). The encoder only sees the
unmasked tokens; the decoder sees the full grid with mask tokens filled in
and a linear head predicts each token's ``l * C_s`` target values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from mamp.masking import (MaskPlan, extract_motion, motion_aware_plan, num_masked,
                          sample_mask_random)
from mamp.numerics import trunc_normal_

STREAMS = ("joint", "motion")
LN_EPS = 1e-6
TARGET_EPS = 1e-6


@dataclass(frozen=True)
class ArchConfig:
    V: int = 25
    C_s: int = 3
    segment_len: int = 4
    T_s: int = 120
    embed_dim: int = 256
    depth: int = 8
    decoder_depth: int = 5
    decoder_dim: int = 256
    num_heads: int = 8
    mlp_dim: int = 1024
    mask_ratio: float = 0.9
    target_stride: int = 1
    target_padding: str = "zero"
    input_stream: str = "joint"
    target_stream: str = "motion"
    dropout: float = 0.0

    def __post_init__(self):
        if self.segment_len < 1 or self.T_s % self.segment_len:
            raise ValueError(f"T_s={self.T_s} is not divisible by segment_len={self.segment_len}")
        if self.embed_dim % self.num_heads or self.decoder_dim % self.num_heads:
            raise ValueError("embed_dim and decoder_dim must be divisible by num_heads")
        if min(self.V, self.C_s, self.embed_dim, self.decoder_dim, self.mlp_dim) < 1:
            raise ValueError("dimensions must be positive")
        if self.depth < 0 or self.decoder_depth < 0:
            raise ValueError("depths must be non-negative")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.input_stream not in STREAMS or self.target_stream not in STREAMS:
            raise ValueError(f"streams must be one of {STREAMS}")
        if self.target_padding not in ("zero", "replicate"):
            raise ValueError(f"unknown target padding {self.target_padding!r}")

    @property
    def T_e(self) -> int:
        return self.T_s // self.segment_len

    @property
    def num_tokens(self) -> int:
        return self.T_e * self.V

    @property
    def token_dim(self) -> int:
        return self.segment_len * self.C_s

    @property
    def decoder_mlp_dim(self) -> int:
        return max(1, self.mlp_dim * self.decoder_dim // self.embed_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown ArchConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# transformer


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.keep_attention = False
        self.last_scores_shape: tuple[int, ...] | None = None
        self.last_attention: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        *lead, N, D = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(*lead, N, 3, h, D // h).movedim(-3, 0)
        q, k, v = qkv[0].transpose(-3, -2), qkv[1].transpose(-3, -2), qkv[2].transpose(-3, -2)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        attn = scores.softmax(dim=-1)
        self.last_scores_shape = tuple(scores.shape)
        if self.keep_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(-3, -2).reshape(*lead, N, D)
        return self.drop(self.proj(out))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.drop(self.fc2(F.gelu(self.fc1(x))))


class Block(nn.Module):
    """Pre-LN transformer block: ``x + MSA(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, num_heads: int, mlp_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = MLP(dim, mlp_dim, dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def transformer_stack(tokens: Tensor, blocks: Sequence[nn.Module], norm: nn.Module) -> Tensor:
    for blk in blocks:
        tokens = blk(tokens)
    return norm(tokens)


# ---------------------------------------------------------------------------
# token-grid operations


def segment_reshape(seq: Tensor, segment_len: int) -> Tensor:
    """``(..., T_s, V, C) -> (..., T_e, V, l*C)``, frame-major then channel."""
    T, V, C = seq.shape[-3:]
    if segment_len < 1 or T % segment_len:
        raise ValueError(f"sequence length {T} is not divisible by segment length {segment_len}")
    lead = seq.shape[:-3]
    x = seq.reshape(*lead, T // segment_len, segment_len, V, C)
    return x.transpose(-3, -2).reshape(*lead, T // segment_len, V, segment_len * C)


def unsegment(tokens: Tensor, segment_len: int) -> Tensor:
    """Inverse of :func:`segment_reshape`."""
    *lead, T_e, V, P = tokens.shape
    C = P // segment_len
    x = tokens.reshape(*lead, T_e, V, segment_len, C).transpose(-3, -2)
    return x.reshape(*lead, T_e * segment_len, V, C)


def joint_embed(segments: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return F.linear(segments, weight, bias)


def add_positional(E: Tensor, pos_spatial: Tensor, pos_temporal: Tensor) -> Tensor:
    """``E[t, v] + P_s[0, v] + P_t[t, 0]`` by broadcasting."""
    return E + pos_spatial + pos_temporal


def select_unmasked(E_p: Tensor, unmasked: Tensor) -> Tensor:
    """Gather ``(B, N_u, C)`` tokens from ``(B, T_e, V, C)`` by flat index."""
    B, T_e, V, C = E_p.shape
    flat = E_p.reshape(B, T_e * V, C)
    return flat.gather(1, unmasked[..., None].expand(-1, -1, C))


def insert_mask_tokens(H_u: Tensor, unmasked: Tensor, grid: tuple[int, int],
                       mask_token: Tensor, projection: nn.Module | None = None) -> Tensor:
    """Place (projected) encoder outputs back on the grid; mask token elsewhere."""
    if H_u.shape[:2] != unmasked.shape:
        raise ValueError(
            f"{H_u.shape[1]} encoder tokens but {unmasked.shape[1]} unmasked indices"
        )
    if projection is not None:
        H_u = projection(H_u)
    B, _, C = H_u.shape
    T_e, V = grid
    full = mask_token.reshape(1, 1, C).expand(B, T_e * V, C)
    full = full.scatter(1, unmasked[..., None].expand(-1, -1, C), H_u)
    return full.reshape(B, T_e, V, C)


def normalize_target(segments: Tensor) -> Tensor:
    """Per-token standardization over the last axis (population std + 1e-6)."""
    mean = segments.mean(dim=-1, keepdim=True)
    std = segments.var(dim=-1, unbiased=False, keepdim=True).sqrt()
    return (segments - mean) / (std + TARGET_EPS)


def masked_mse_loss(pred: Tensor, target: Tensor, masked: Tensor) -> Tensor:
    """Mean over masked tokens of the squared L2 distance between token vectors.

    ``pred`` and ``target`` are ``(B, T_e, V, P)``; ``masked`` is ``(B, K)``
    flat token indices.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if masked.numel() == 0:
        raise ValueError("loss undefined: no masked tokens")
    B, T_e, V, P = pred.shape
    idx = masked[..., None].expand(-1, -1, P)
    p = pred.reshape(B, T_e * V, P).gather(1, idx)
    t = target.reshape(B, T_e * V, P).gather(1, idx)
    return ((p - t) ** 2).sum(-1).mean()


# ---------------------------------------------------------------------------
# network


class MAMP(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        C_e, C_d = cfg.embed_dim, cfg.decoder_dim
        self.embed = nn.Linear(cfg.token_dim, C_e)
        self.pos_spatial = nn.Parameter(torch.zeros(1, cfg.V, C_e))
        self.pos_temporal = nn.Parameter(torch.zeros(cfg.T_e, 1, C_e))
        self.blocks = nn.ModuleList(
            Block(C_e, cfg.num_heads, cfg.mlp_dim, cfg.dropout) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(C_e, eps=LN_EPS)

        self.decoder_embed = nn.Linear(C_e, C_d) if C_e != C_d else None
        self.mask_token = nn.Parameter(torch.zeros(C_d))
        self.decoder_pos_spatial = nn.Parameter(torch.zeros(1, cfg.V, C_d))
        self.decoder_pos_temporal = nn.Parameter(torch.zeros(cfg.T_e, 1, C_d))
        self.decoder_blocks = nn.ModuleList(
            Block(C_d, cfg.num_heads, cfg.decoder_mlp_dim, cfg.dropout)
            for _ in range(cfg.decoder_depth))
        self.decoder_norm = nn.LayerNorm(C_d, eps=LN_EPS)
        self.head = nn.Linear(C_d, cfg.token_dim)

    # encoder ----------------------------------------------------------------

    def embed_tokens(self, stream: Tensor) -> Tensor:
        """``(B, T_s, V, C_s)`` input stream -> position-encoded ``(B, T_e, V, C_e)``."""
        E = joint_embed(segment_reshape(stream, self.cfg.segment_len),
                        self.embed.weight, self.embed.bias)
        return add_positional(E, self.pos_spatial, self.pos_temporal)

    def encode(self, stream: Tensor, unmasked: Tensor | None = None) -> Tensor:
        """Encoder output for the selected tokens (all tokens when ``unmasked`` is None)."""
        E_p = self.embed_tokens(stream)
        B, T_e, V, C = E_p.shape
        tokens = E_p.reshape(B, T_e * V, C) if unmasked is None else select_unmasked(E_p, unmasked)
        return transformer_stack(tokens, self.blocks, self.norm)

    # decoder ----------------------------------------------------------------

    def decode_and_predict(self, H_e: Tensor) -> Tensor:
        """``(B, T_e, V, C_d)`` grid -> ``(B, T_e, V, l*C_s)`` predictions."""
        Z = add_positional(H_e, self.decoder_pos_spatial, self.decoder_pos_temporal)
        B, T_e, V, C = Z.shape
        Z = transformer_stack(Z.reshape(B, T_e * V, C), self.decoder_blocks, self.decoder_norm)
        return self.head(Z).reshape(B, T_e, V, -1)

    def encoder_parameter_names(self) -> list[str]:
        prefixes = ("embed.", "pos_spatial", "pos_temporal", "blocks.", "norm.")
        return [n for n, _ in self.named_parameters() if n.startswith(prefixes)]


def init_params(cfg: ArchConfig, seed: int, dtype: torch.dtype = torch.float32) -> MAMP:
    """Deterministic initialization from ``seed``.

    Linear weights: truncated normal (std 0.02); biases 0; LayerNorm 1/0;
    mask token and positional embeddings: normal (std 0.02).
    """
    model = MAMP(cfg).to(dtype)
    init_module_(model, seed)
    return model


@torch.no_grad()
def init_module_(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Linear):
            trunc_normal_(m.weight, 0.02, g)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for name, p in module.named_parameters():
        if name.split(".")[-1] in ("mask_token", "pos_spatial", "pos_temporal",
                                   "decoder_pos_spatial", "decoder_pos_temporal"):
            p.normal_(0.0, 0.02, generator=g)


# ---------------------------------------------------------------------------
# pre-training forward


@dataclass
class ForwardArtifacts:
    E: Tensor
    E_p: Tensor
    E_p_u: Tensor
    H_e_u: Tensor
    H_e: Tensor
    pred: Tensor
    target: Tensor
    masked: Tensor
    unmasked: Tensor
    loss: Tensor


def select_stream(views: Tensor, stream: str, cfg: ArchConfig) -> Tensor:
    if stream == "joint":
        return views
    return extract_motion(views, cfg.target_stride, cfg.target_padding)


def make_plans(views: np.ndarray, cfg: ArchConfig, rngs: Sequence[np.random.Generator],
               strategy: str = "motion", temperature: float = 1.0) -> list[MaskPlan]:
    """One mask plan per ``T_s x V x C`` view, each from its own random stream."""
    if strategy == "motion":
        return [motion_aware_plan(v, cfg.segment_len, cfg.mask_ratio, temperature, r)
                for v, r in zip(views, rngs)]
    if strategy == "random":
        return [sample_mask_random((cfg.T_e, cfg.V), cfg.mask_ratio, r) for r in rngs]
    raise ValueError(f"unknown masking strategy {strategy!r}")


def plan_indices(plans: Sequence[MaskPlan]) -> tuple[Tensor, Tensor]:
    masked = torch.from_numpy(np.stack([p.masked for p in plans]))
    unmasked = torch.from_numpy(np.stack([p.unmasked for p in plans]))
    return masked, unmasked


def forward_pretrain(model: MAMP, views, plans: Sequence[MaskPlan] | None = None,
                     rngs: Sequence[np.random.Generator] | None = None,
                     strategy: str = "motion", temperature: float = 1.0) -> ForwardArtifacts:
    """Full masked-motion-prediction forward pass on a batch of views.

    ``views`` is ``(B, T_s, V, C_s)`` (or a single ``(T_s, V, C_s)`` view).
    Mask plans are either given or drawn from ``rngs`` (one per view).
    """
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    if not isinstance(views, Tensor):
        views = torch.as_tensor(np.asarray(views), dtype=dtype)
    views = views.to(dtype)
    if views.dim() == 3:
        views = views[None]
    if plans is None:
        if rngs is None:
            raise ValueError("need either mask plans or random generators")
        plans = make_plans(views.detach().cpu().numpy(), cfg, rngs, strategy, temperature)
    if len(plans) != views.shape[0]:
        raise ValueError(f"{len(plans)} mask plans for {views.shape[0]} views")
    masked, unmasked = plan_indices(plans)

    E = joint_embed(segment_reshape(select_stream(views, cfg.input_stream, cfg), cfg.segment_len),
                    model.embed.weight, model.embed.bias)
    E_p = add_positional(E, model.pos_spatial, model.pos_temporal)
    E_p_u = select_unmasked(E_p, unmasked)
    H_e_u = transformer_stack(E_p_u, model.blocks, model.norm)
    H_e = insert_mask_tokens(H_e_u, unmasked, (cfg.T_e, cfg.V), model.mask_token,
                             model.decoder_embed)
    pred = model.decode_and_predict(H_e)
    target = normalize_target(segment_reshape(select_stream(views, cfg.target_stream, cfg),
                                              cfg.segment_len))
    loss = masked_mse_loss(pred, target, masked)
    return ForwardArtifacts(E, E_p, E_p_u, H_e_u, H_e, pred, target, masked, unmasked, loss)


def token_counts(T_e: int, V: int, mask_ratio: float) -> tuple[int, int]:
    """``(|masked|, N_u)`` for a grid and mask ratio."""
    k = num_masked(T_e * V, mask_ratio)
    return k, T_e * V - k


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

