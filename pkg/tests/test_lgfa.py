import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from udfa.backbone import TokenStream
from udfa.lgfa import LocalGlobalFusionAdapter, MultiHeadCrossAttention


def randomize_out_proj(mhca, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        mhca.out_proj.weight.copy_(torch.randn(mhca.out_proj.weight.shape, generator=g) * 0.1)
        mhca.out_proj.bias.copy_(torch.randn(mhca.out_proj.bias.shape, generator=g) * 0.1)


def reference_mhca(mhca: MultiHeadCrossAttention, q: np.ndarray, kv: np.ndarray) -> np.ndarray:
    """Independent per-head loop implementation (numpy, explicit softmax)."""
    def ln(x, w, b):
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * w + b

    p = {k: v.detach().numpy().astype(np.float64) for k, v in mhca.state_dict().items()}
    qn = ln(q, p["norm_q.weight"], p["norm_q.bias"])
    kvn = ln(kv, p["norm_kv.weight"], p["norm_kv.bias"])
    B, Tq, D = q.shape
    Tkv = kv.shape[1]
    H, dh = mhca.num_heads, mhca.head_dim
    qp = qn @ p["q_proj.weight"].T + p["q_proj.bias"]
    kp = kvn @ p["k_proj.weight"].T + p["k_proj.bias"]
    vp = kvn @ p["v_proj.weight"].T + p["v_proj.bias"]
    out = np.zeros((B, Tq, D))
    for b in range(B):
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            qh, kh, vh = qp[b, :, sl], kp[b, :, sl], vp[b, :, sl]
            logits = qh @ kh.T / math.sqrt(dh)
            logits -= logits.max(axis=1, keepdims=True)
            w = np.exp(logits)
            w /= w.sum(axis=1, keepdims=True)
            out[b, :, sl] = w @ vh
    return out @ p["out_proj.weight"].T + p["out_proj.bias"]


def test_mhca_matches_brute_force_oracle():
    torch.manual_seed(0)
    mhca = MultiHeadCrossAttention(8, 2)
    randomize_out_proj(mhca)
    q = torch.randn(1, 3, 8, dtype=torch.float64)
    kv = torch.randn(1, 5, 8, dtype=torch.float64)
    out = mhca.double()(q, kv)
    ref = reference_mhca(mhca, q.numpy(), kv.numpy())
    assert np.abs(out.detach().numpy() - ref).max() < 1e-9


def test_mhca_shape_contract():
    torch.manual_seed(0)
    mhca = MultiHeadCrossAttention(64, 4)
    out = mhca(torch.randn(2, 256, 64), torch.randn(2, 4116, 64))
    assert tuple(out.shape) == (2, 256, 64)
    with pytest.raises(ValueError, match="widths differ"):
        mhca(torch.randn(1, 4, 64), torch.randn(1, 4, 32))


def test_single_kv_token_bypasses_attention():
    # softmax over one key is 1: the output is the projected value,
    # independent of the query content
    torch.manual_seed(1)
    mhca = MultiHeadCrossAttention(16, 4)
    randomize_out_proj(mhca, seed=1)
    kv = torch.randn(2, 1, 16)
    out_a = mhca(torch.randn(2, 7, 16), kv)
    out_b = mhca(torch.randn(2, 7, 16) * 3.0, kv)
    expected = mhca.out_proj(mhca.v_proj(mhca.norm_kv(kv))).expand(-1, 7, -1)
    assert torch.allclose(out_a, expected, atol=1e-6)
    assert torch.allclose(out_b, expected, atol=1e-6)


def test_zeroed_query_projection_gives_uniform_attention():
    torch.manual_seed(2)
    mhca = MultiHeadCrossAttention(16, 4)
    randomize_out_proj(mhca, seed=2)
    with torch.no_grad():
        mhca.q_proj.weight.zero_()
        mhca.q_proj.bias.zero_()
    kv = torch.randn(1, 9, 16)
    out, weights = mhca(torch.randn(1, 5, 16), kv, return_weights=True)
    assert torch.allclose(weights, torch.full_like(weights, 1.0 / 9), atol=1e-6)
    expected = mhca.out_proj(mhca.v_proj(mhca.norm_kv(kv)).mean(dim=1, keepdim=True)).expand(-1, 5, -1)
    assert torch.allclose(out, expected, atol=1e-6)


def test_attention_rows_sum_to_one():
    torch.manual_seed(3)
    mhca = MultiHeadCrossAttention(16, 4)
    _, weights = mhca(torch.randn(2, 6, 16), torch.randn(2, 11, 16), return_weights=True)
    assert tuple(weights.shape) == (2, 4, 6, 11)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(2, 4, 6), atol=1e-6)


def test_output_projection_zero_initialized():
    mhca = MultiHeadCrossAttention(32, 4)
    assert mhca.out_proj.weight.abs().max() == 0
    assert mhca.out_proj.bias.abs().max() == 0
    # the other projections are not zero
    assert mhca.q_proj.weight.abs().max() > 0


def test_inject_refresh_zero_branch_identity():
    torch.manual_seed(4)
    lgfa = LocalGlobalFusionAdapter(16, 4)
    f_dino = TokenStream(torch.randn(2, 4, 16), grid=(2, 2))
    f_spa = TokenStream(torch.randn(2, 5, 16), scale_layout=[(2, 2), (1, 1)])
    assert torch.equal(lgfa.inject(f_dino, f_spa).data, f_dino.data)
    assert torch.equal(lgfa.refresh(f_spa, f_dino).data, f_spa.data)


def test_inject_refresh_shapes_and_annotations():
    torch.manual_seed(5)
    lgfa = LocalGlobalFusionAdapter(16, 4)
    randomize_out_proj(lgfa.inject_attn, seed=5)
    randomize_out_proj(lgfa.refresh_attn, seed=6)
    f_dino = TokenStream(torch.randn(2, 4, 16), grid=(2, 2))
    f_spa = TokenStream(torch.randn(2, 5, 16), scale_layout=[(2, 2), (1, 1)])
    out_d = lgfa.inject(f_dino, f_spa)
    assert out_d.data.shape == f_dino.data.shape
    assert out_d.grid == (2, 2)
    out_s = lgfa.refresh(f_spa, out_d)
    assert out_s.data.shape == f_spa.data.shape
    assert out_s.scale_layout == [(2, 2), (1, 1)]


def test_inject_and_refresh_are_distinct_weight_sets():
    torch.manual_seed(6)
    lgfa = LocalGlobalFusionAdapter(16, 4)
    randomize_out_proj(lgfa.inject_attn, seed=7)
    randomize_out_proj(lgfa.refresh_attn, seed=8)
    x = TokenStream(torch.randn(1, 4, 16), grid=(2, 2))
    y = TokenStream(torch.randn(1, 4, 16), grid=(2, 2))
    via_inject = lgfa.inject(x, y).data
    via_refresh = lgfa.refresh(x, y).data
    assert (via_inject - via_refresh).abs().max() > 1e-6
    # parameters are independent modules
    assert lgfa.inject_attn.q_proj.weight.data_ptr() != lgfa.refresh_attn.q_proj.weight.data_ptr()


def test_gradient_flows_to_kv_stream():
    torch.manual_seed(7)
    lgfa = LocalGlobalFusionAdapter(8, 2).double()
    randomize_out_proj(lgfa.inject_attn, seed=9)
    f_dino = TokenStream(torch.randn(1, 3, 8, dtype=torch.float64), grid=(1, 3))
    spa_data = torch.randn(1, 4, 8, dtype=torch.float64, requires_grad=True)

    def loss_of(data):
        return lgfa.inject(f_dino, TokenStream(data, scale_layout=[(2, 2)])).data.sum()

    loss = loss_of(spa_data)
    loss.backward()
    assert spa_data.grad is not None
    idx = tuple(int(i) for i in (spa_data.grad.abs() == spa_data.grad.abs().max()).nonzero()[0])
    h = 1e-6
    with torch.no_grad():
        up = spa_data.clone()
        up[idx] += h
        down = spa_data.clone()
        down[idx] -= h
    fd = (loss_of(up).item() - loss_of(down).item()) / (2 * h)
    assert fd != 0.0
    assert abs(fd - spa_data.grad[idx].item()) <= 1e-6 * max(1.0, abs(fd))
