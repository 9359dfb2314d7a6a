import math

import pytest
import torch

from conftest import make_tiny_cfg, rand_images
from udfa.backbone import (
    CheckpointError,
    FrozenViT,
    StagePartition,
    TokenStream,
    interpolate_pos_embed,
    load_backbone,
)


def make_vit(seed=0, **overrides):
    torch.manual_seed(seed)
    return FrozenViT(make_tiny_cfg(**overrides))


def test_token_stream_invariants():
    data = torch.zeros(2, 6, 8)
    TokenStream(data, grid=(2, 3))
    TokenStream(data, scale_layout=[(1, 2), (2, 2)])
    with pytest.raises(ValueError, match="grid"):
        TokenStream(data, grid=(2, 2))
    with pytest.raises(ValueError, match="scale_layout"):
        TokenStream(data, scale_layout=[(2, 2)])
    bad = data.clone()
    bad[0, 0, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        TokenStream(bad, grid=(2, 3))


def test_stage_partition():
    p = StagePartition.build(12, 3)
    assert p.stages == ((0, 4), (4, 8), (8, 12))
    assert len(p) == 3
    with pytest.raises(ValueError, match="num_blocks mod num_stages"):
        StagePartition.build(12, 5)


def test_embed_shapes():
    vit = make_vit()
    out = vit.embed(rand_images(2, 56))
    assert tuple(out.data.shape) == (2, 16, 64)
    assert out.grid == (4, 4)
    # larger input: 308/14 = 22 per side
    out = vit.embed(rand_images(1, 308))
    assert tuple(out.data.shape) == (1, 484, 64)
    assert out.grid == (22, 22)
    # smallest: one patch row/col pair
    out = vit.embed(rand_images(1, 28))
    assert tuple(out.data.shape) == (1, 4, 64)
    assert out.grid == (2, 2)


def test_embed_rejects_indivisible():
    vit = make_vit()
    with pytest.raises(ValueError, match="not divisible"):
        vit.embed(torch.zeros(1, 3, 60, 56))


def test_pos_interp_identity():
    table = torch.randn(1, 16, 8)
    out = interpolate_pos_embed(table, (4, 4), (4, 4))
    assert (out - table).abs().max().item() == 0.0


def test_pos_interp_shape():
    table = torch.randn(1, 256, 8)
    out = interpolate_pos_embed(table, (16, 16), (22, 22))
    assert tuple(out.shape) == (1, 484, 8)


def test_pos_interp_preserves_constants():
    table = torch.full((1, 16, 8), 0.37)
    out = interpolate_pos_embed(table, (4, 4), (7, 5))
    assert torch.allclose(out, torch.full((1, 35, 8), 0.37), atol=1e-6)


def test_run_stage_shape_and_count():
    vit = make_vit()
    tokens = vit.embed(rand_images(2, 56))
    out = vit.run_stage(tokens, 0)
    assert out.data.shape == tokens.data.shape
    assert out.grid == tokens.grid
    # 6 blocks over 3 stages: 2 per stage
    assert vit.partition.stages == ((0, 2), (2, 4), (4, 6))
    with pytest.raises(IndexError):
        vit.run_stage(tokens, 3)


def test_run_stage_deterministic():
    vit = make_vit()
    tokens = vit.embed(rand_images(2, 56))
    a = vit.run_stage(tokens, 1).data
    b = vit.run_stage(tokens, 1).data
    assert torch.equal(a, b)


def test_partition_invariant_n1_vs_n3():
    vit3 = make_vit()
    vit1 = FrozenViT(make_tiny_cfg(num_stages=1))
    vit1.load_state_dict(vit3.state_dict())
    x = rand_images(2, 56)
    t3 = vit3.embed(x)
    for i in range(3):
        t3 = vit3.run_stage(t3, i)
    t3 = vit3.final_norm(t3)
    t1 = vit1.final_norm(vit1.run_stage(vit1.embed(x), 0))
    assert torch.equal(t3.data, t1.data)


def test_backbone_fully_frozen():
    vit, report = load_backbone(make_tiny_cfg())
    assert report.source == "random"
    assert all(not p.requires_grad for p in vit.parameters())
    assert sum(p.numel() for p in vit.parameters() if p.requires_grad) == 0
    # stays in eval mode even when asked to train
    vit.train(True)
    assert not vit.training


def test_gradient_flows_through_frozen_blocks():
    vit = make_vit()
    x = rand_images(1, 56)
    tokens = vit.embed(x)
    leaf = tokens.data.detach().requires_grad_(True)
    out = vit.run_stage(TokenStream(leaf, grid=tokens.grid), 0)
    out.data.sum().backward()
    assert leaf.grad is not None and leaf.grad.abs().sum() > 0
    assert all(p.grad is None for p in vit.parameters())


def test_embed_permutation_consistency():
    cfg = make_tiny_cfg()
    vit_a = make_vit(seed=3)
    vit_b = FrozenViT(cfg)
    vit_b.load_state_dict(vit_a.state_dict())
    # native grid == input grid (4x4) so no interpolation interferes
    x = rand_images(1, 56, seed=5)
    perm = torch.randperm(16, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        vit_b.pos_embed.copy_(vit_a.pos_embed[:, perm])
    base = vit_a.embed(x).data

    # permute the image patches with the same permutation
    p = cfg.patch_size
    patches = x.reshape(1, 3, 4, p, 4, p).permute(0, 2, 4, 1, 3, 5).reshape(1, 16, 3, p, p)
    patches = patches[:, perm]
    x_perm = patches.reshape(1, 4, 4, 3, p, p).permute(0, 3, 1, 4, 2, 5).reshape(1, 3, 56, 56)
    out = vit_b.embed(x_perm).data
    assert torch.allclose(out, base[:, perm], atol=1e-6)


def _tiny_dinov2_state(d=64, blocks=6, grid=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    def r(*shape):
        return torch.randn(*shape, generator=g)
    state = {
        "cls_token": r(1, 1, d),
        "mask_token": r(1, d),
        "pos_embed": r(1, 1 + grid * grid, d),
        "patch_embed.proj.weight": r(d, 3, 14, 14),
        "patch_embed.proj.bias": r(d),
        "norm.weight": r(d),
        "norm.bias": r(d),
    }
    for i in range(blocks):
        b = f"blocks.{i}"
        state.update({
            f"{b}.norm1.weight": r(d), f"{b}.norm1.bias": r(d),
            f"{b}.attn.qkv.weight": r(3 * d, d), f"{b}.attn.qkv.bias": r(3 * d),
            f"{b}.attn.proj.weight": r(d, d), f"{b}.attn.proj.bias": r(d),
            f"{b}.ls1.gamma": r(d),
            f"{b}.norm2.weight": r(d), f"{b}.norm2.bias": r(d),
            f"{b}.mlp.fc1.weight": r(4 * d, d), f"{b}.mlp.fc1.bias": r(4 * d),
            f"{b}.mlp.fc2.weight": r(d, 4 * d), f"{b}.mlp.fc2.bias": r(d),
            f"{b}.ls2.gamma": r(d),
        })
    return state


def test_checkpoint_load_maps_names():
    vit = make_vit()
    state = _tiny_dinov2_state()
    report = vit.load_dinov2_state(state, source="tiny")
    # pos_embed + patch(2) + final norm(2) + 6 blocks x 14 tensors
    assert report.mapped == 1 + 2 + 2 + 6 * 14
    assert sorted(report.unused) == ["cls_token", "mask_token"]
    assert report.native_grid == (5, 5)
    assert vit.native_grid == (5, 5)
    assert tuple(vit.pos_embed.shape) == (1, 25, 64)
    # class-token row was stripped
    assert torch.equal(vit.pos_embed.data, state["pos_embed"][:, 1:])
    assert all(not p.requires_grad for p in vit.parameters())
    # weights actually landed
    assert torch.equal(vit.blocks[3].mlp.fc1.weight, state["blocks.3.mlp.fc1.weight"])


def test_checkpoint_missing_tensor_listed():
    vit = make_vit()
    state = _tiny_dinov2_state()
    del state["blocks.2.attn.qkv.weight"]
    with pytest.raises(CheckpointError, match=r"blocks\.2\.attn\.qkv\.weight"):
        vit.load_dinov2_state(state)


def test_checkpoint_extra_tensor_listed():
    vit = make_vit()
    state = _tiny_dinov2_state()
    state["blocks.9.bogus"] = torch.zeros(1)
    with pytest.raises(CheckpointError, match=r"blocks\.9\.bogus"):
        vit.load_dinov2_state(state)


def test_checkpoint_register_tokens_allowed():
    vit = make_vit()
    state = _tiny_dinov2_state()
    state["register_tokens"] = torch.zeros(1, 4, 64)
    report = vit.load_dinov2_state(state)
    assert "register_tokens" in report.unused


def test_checkpoint_file_round_trip(tmp_path):
    path = tmp_path / "backbone.pth"
    torch.save(_tiny_dinov2_state(), path)
    cfg = make_tiny_cfg(backbone_checkpoint=str(path))
    vit, report = load_backbone(cfg)
    assert report.native_grid == (5, 5)
    assert report.mapped == 89


def test_checkpoint_missing_file():
    cfg = make_tiny_cfg(backbone_checkpoint="/does/not/exist.pth")
    with pytest.raises(CheckpointError, match="not found"):
        load_backbone(cfg)


def test_checkpoint_cache_dir_fallback(tmp_path, monkeypatch):
    path = tmp_path / "backbone.pth"
    torch.save(_tiny_dinov2_state(), path)
    monkeypatch.setenv("UDFA_CACHE_DIR", str(tmp_path))
    cfg = make_tiny_cfg(backbone_checkpoint="backbone.pth")
    vit, report = load_backbone(cfg)
    assert report.source == str(path)


def test_embed_uses_interpolation_for_non_native_grids():
    vit = make_vit()
    assert vit.native_grid == (4, 4)
    out = vit.embed(rand_images(1, 112))  # 8x8 grid
    assert out.grid == (8, 8)
    table = vit._pos_for((8, 8))
    assert tuple(table.shape) == (1, 64, 64)
    ref = interpolate_pos_embed(vit.pos_embed, (4, 4), (8, 8))
    assert torch.equal(table, ref)
