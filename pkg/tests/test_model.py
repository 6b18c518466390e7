import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mamp.masking import MaskPlan, extract_motion
from mamp.model import (MAMP, ArchConfig, add_positional, forward_pretrain, init_params,
                        insert_mask_tokens, joint_embed, masked_mse_loss, normalize_target,
                        segment_reshape, select_unmasked, token_counts, unsegment)


def test_segment_reshape_matches_loops(rng):
    seq = rng.normal(size=(2, 8, 3, 2))
    got = segment_reshape(torch.from_numpy(seq), 4).numpy()
    assert got.shape == (2, 2, 3, 8)
    for b in range(2):
        for t in range(2):
            for v in range(3):
                want = [seq[b, t * 4 + f, v, c] for f in range(4) for c in range(2)]
                assert got[b, t, v].tolist() == want


@settings(max_examples=30, deadline=None)
@given(T_e=st.integers(1, 5), l=st.integers(1, 4), V=st.integers(1, 4), C=st.integers(1, 3))
def test_unsegment_inverts_segment_reshape(T_e, l, V, C):
    x = torch.randn(2, T_e * l, V, C, dtype=torch.float64)
    assert torch.equal(unsegment(segment_reshape(x, l), l), x)


def test_segment_reshape_rejects_ragged_length():
    with pytest.raises(ValueError, match="divisible"):
        segment_reshape(torch.zeros(7, 2, 3), 2)


def test_joint_embed_and_positional_match_loops(rng):
    seg = torch.from_numpy(rng.normal(size=(1, 2, 3, 4)))
    W = torch.from_numpy(rng.normal(size=(5, 4)))
    b = torch.from_numpy(rng.normal(size=5))
    Ps = torch.from_numpy(rng.normal(size=(1, 3, 5)))
    Pt = torch.from_numpy(rng.normal(size=(2, 1, 5)))
    E = joint_embed(seg, W, b)
    Ep = add_positional(E, Ps, Pt)
    for t in range(2):
        for v in range(3):
            e = W.numpy() @ seg[0, t, v].numpy() + b.numpy()
            np.testing.assert_allclose(E[0, t, v].numpy(), e, rtol=1e-13)
            np.testing.assert_allclose(Ep[0, t, v].numpy(), e + Ps[0, v].numpy() + Pt[t, 0].numpy(),
                                       rtol=1e-13)


def test_select_and_insert_tokens():
    E_p = torch.arange(2 * 2 * 3 * 2, dtype=torch.float64).reshape(2, 2, 3, 2)
    unmasked = torch.tensor([[0, 4], [1, 5]])
    sel = select_unmasked(E_p, unmasked)
    assert torch.equal(sel[0], E_p[0].reshape(6, 2)[[0, 4]])
    assert torch.equal(sel[1], E_p[1].reshape(6, 2)[[1, 5]])
    mask_token = torch.tensor([-1.0, -2.0], dtype=torch.float64)
    full = insert_mask_tokens(sel, unmasked, (2, 3), mask_token).reshape(2, 6, 2)
    for b, keep in enumerate(([0, 4], [1, 5])):
        for i in range(6):
            want = E_p[b].reshape(6, 2)[i] if i in keep else mask_token
            assert torch.equal(full[b, i], want)
    with pytest.raises(ValueError, match="unmasked"):
        insert_mask_tokens(sel, unmasked[:, :1], (2, 3), mask_token)


def test_normalize_target_statistics():
    x = torch.randn(4, 3, 2, 8, dtype=torch.float64) * 5 + 2
    n = normalize_target(x)
    torch.testing.assert_close(n.mean(-1), torch.zeros(4, 3, 2, dtype=torch.float64), atol=1e-12, rtol=0)
    # the +1e-6 in the denominator shrinks the variance by about 2e-6 / std
    torch.testing.assert_close(n.var(-1, unbiased=False), torch.ones(4, 3, 2, dtype=torch.float64),
                               atol=1e-5, rtol=0)
    xs = x[1, 2, 0].numpy()
    np.testing.assert_allclose(n[1, 2, 0].numpy(), (xs - xs.mean()) / (xs.std() + 1e-6), rtol=1e-13)
    const = normalize_target(torch.full((1, 1, 1, 4), 3.0))
    assert torch.equal(const, torch.zeros(1, 1, 1, 4))


def test_masked_mse_matches_loops(rng):
    pred = torch.from_numpy(rng.normal(size=(2, 2, 3, 4)))
    target = torch.from_numpy(rng.normal(size=(2, 2, 3, 4)))
    masked = torch.tensor([[0, 2, 5], [1, 3, 4]])
    total = 0.0
    for b in range(2):
        for i in masked[b].tolist():
            t, v = divmod(i, 3)
            total += float(((pred[b, t, v] - target[b, t, v]) ** 2).sum())
    assert masked_mse_loss(pred, target, masked).item() == pytest.approx(total / 6, rel=1e-13)
    with pytest.raises(ValueError, match="no masked"):
        masked_mse_loss(pred, target, masked[:, :0])
    with pytest.raises(ValueError, match="shape"):
        masked_mse_loss(pred, target[..., :3], masked)


# ---------------------------------------------------------------------------
# straight-line numpy forward oracle


def _ln(x, w, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def _block(x, P, pre, heads):
    h = _ln(x, P[pre + "norm1.weight"], P[pre + "norm1.bias"])
    qkv = h @ P[pre + "attn.qkv.weight"].T + P[pre + "attn.qkv.bias"]
    N, D = x.shape
    d = D // heads
    out = np.zeros_like(x)
    for k in range(heads):
        q = qkv[:, k * d:(k + 1) * d]
        kk = qkv[:, D + k * d:D + (k + 1) * d]
        v = qkv[:, 2 * D + k * d:2 * D + (k + 1) * d]
        s = q @ kk.T / math.sqrt(d)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        out[:, k * d:(k + 1) * d] = a @ v
    x = x + out @ P[pre + "attn.proj.weight"].T + P[pre + "attn.proj.bias"]
    h = _ln(x, P[pre + "norm2.weight"], P[pre + "norm2.bias"])
    h = _gelu(h @ P[pre + "mlp.fc1.weight"].T + P[pre + "mlp.fc1.bias"])
    return x + h @ P[pre + "mlp.fc2.weight"].T + P[pre + "mlp.fc2.bias"]


def numpy_forward(P, cfg: ArchConfig, view: np.ndarray, plan: MaskPlan):
    l, V, T_e = cfg.segment_len, cfg.V, cfg.T_e
    inp = view if cfg.input_stream == "joint" else extract_motion(view, cfg.target_stride, cfg.target_padding)
    tokens = []
    for t in range(T_e):
        for v in range(V):
            seg = inp[t * l:(t + 1) * l, v, :].reshape(-1)
            e = P["embed.weight"] @ seg + P["embed.bias"]
            tokens.append(e + P["pos_spatial"][0, v] + P["pos_temporal"][t, 0])
    x = np.stack([tokens[i] for i in plan.unmasked])
    for i in range(cfg.depth):
        x = _block(x, P, f"blocks.{i}.", cfg.num_heads)
    x = _ln(x, P["norm.weight"], P["norm.bias"])
    if "decoder_embed.weight" in P:
        x = x @ P["decoder_embed.weight"].T + P["decoder_embed.bias"]
    full = [P["mask_token"]] * (T_e * V)
    for j, i in enumerate(plan.unmasked):
        full[i] = x[j]
    z = np.stack([full[t * V + v] + P["decoder_pos_spatial"][0, v] + P["decoder_pos_temporal"][t, 0]
                  for t in range(T_e) for v in range(V)])
    for i in range(cfg.decoder_depth):
        z = _block(z, P, f"decoder_blocks.{i}.", cfg.num_heads)
    z = _ln(z, P["decoder_norm.weight"], P["decoder_norm.bias"])
    pred = z @ P["head.weight"].T + P["head.bias"]
    tgt_stream = view if cfg.target_stream == "joint" else extract_motion(view, cfg.target_stride,
                                                                          cfg.target_padding)
    loss = 0.0
    for i in plan.masked:
        t, v = divmod(int(i), V)
        seg = tgt_stream[t * l:(t + 1) * l, v, :].reshape(-1)
        target = (seg - seg.mean()) / (seg.std() + 1e-6)
        loss += ((pred[i] - target) ** 2).sum()
    return pred, loss / len(plan.masked)


@pytest.mark.parametrize("streams", [("joint", "motion"), ("motion", "joint")])
def test_forward_matches_straight_line_oracle(toy_arch, streams, rng):
    cfg = dataclasses.replace(toy_arch, input_stream=streams[0], target_stream=streams[1])
    model = init_params(cfg, seed=7, dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(p.numel())) * 0.1)
    P = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    view = rng.normal(size=(cfg.T_s, cfg.V, cfg.C_s))
    plan = MaskPlan.from_masked([0, 3, 4, 7, 9, 11], (cfg.T_e, cfg.V), cfg.mask_ratio)
    art = forward_pretrain(model, view[None], [plan])
    pred, loss = numpy_forward(P, cfg, view, plan)
    np.testing.assert_allclose(art.pred[0].reshape(-1, cfg.token_dim).detach().numpy(), pred,
                               rtol=1e-10, atol=1e-12)
    assert art.loss.item() == pytest.approx(loss, rel=1e-10)


def test_encoder_sees_only_unmasked_tokens(toy_arch, rng):
    model = init_params(toy_arch, 0, torch.float64)
    views = rng.normal(size=(3, toy_arch.T_s, toy_arch.V, toy_arch.C_s))
    art = forward_pretrain(model, views, rngs=[np.random.default_rng(i) for i in range(3)])
    _, n_u = token_counts(toy_arch.T_e, toy_arch.V, toy_arch.mask_ratio)
    assert art.E_p_u.shape == (3, n_u, toy_arch.embed_dim)
    assert model.blocks[0].attn.last_scores_shape == (3, toy_arch.num_heads, n_u, n_u)
    assert model.decoder_blocks[0].attn.last_scores_shape[-1] == toy_arch.num_tokens


def test_masked_inputs_do_not_reach_the_encoder(toy_arch, rng):
    model = init_params(toy_arch, 0, torch.float64)
    view = rng.normal(size=(toy_arch.T_s, toy_arch.V, toy_arch.C_s))
    plan = MaskPlan.from_masked([1, 2, 6, 10], (toy_arch.T_e, toy_arch.V), toy_arch.mask_ratio)
    other = view.copy()
    for i in plan.masked:
        t, v = divmod(int(i), toy_arch.V)
        other[t * 2:(t + 1) * 2, v] += 10.0
    a = forward_pretrain(model, view, [plan])
    b = forward_pretrain(model, other, [plan])
    assert torch.equal(a.H_e_u, b.H_e_u)


def test_init_is_seeded_and_bounded(toy_arch):
    a, b, c = (init_params(toy_arch, s) for s in (0, 0, 1))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not torch.equal(sa["embed.weight"], sc["embed.weight"])
    for name, p in a.named_parameters():
        if name.endswith(".weight") and p.dim() == 2:
            assert p.abs().max().item() <= 0.04
        if name.endswith(".bias"):
            assert torch.equal(p, torch.zeros_like(p))
    assert torch.equal(a.norm.weight, torch.ones_like(a.norm.weight))


def test_decoder_projection_only_when_widths_differ(toy_arch):
    assert MAMP(toy_arch).decoder_embed is not None
    assert MAMP(dataclasses.replace(toy_arch, decoder_dim=16)).decoder_embed is None


@pytest.mark.parametrize("kw", [dict(T_s=7), dict(num_heads=3), dict(mask_ratio=1.5),
                                dict(input_stream="bone"), dict(target_padding="reflect")])
def test_arch_validation(toy_arch, kw):
    with pytest.raises(ValueError):
        dataclasses.replace(toy_arch, **kw)


def test_arch_dict_round_trip(toy_arch):
    assert ArchConfig.from_dict(toy_arch.to_dict()) == toy_arch
    with pytest.raises(KeyError):
        ArchConfig.from_dict({**toy_arch.to_dict(), "width": 3})


def test_full_scale_grid():
    cfg = ArchConfig()
    assert (cfg.T_e, cfg.num_tokens, cfg.token_dim) == (30, 750, 12)
    assert token_counts(cfg.T_e, cfg.V, cfg.mask_ratio) == (675, 75)
