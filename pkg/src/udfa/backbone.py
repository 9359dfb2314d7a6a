"""Frozen ViT backbone: patch/positional embedding, staged block execution,
checkpoint loading with a hard freeze guarantee.

Parameter names mirror the published DINOv2 serialization (patch_embed.proj,
pos_embed, blocks.{i}.{norm1,attn.qkv,attn.proj,ls1,norm2,mlp.fc1,mlp.fc2,ls2},
norm) so a pretrained state dict maps onto this module almost verbatim; the
only transform is stripping the class-token slot from pos_embed.
"""

import math
import os
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig

# checkpoint tensors that have no slot in this wrapper but are fine to ignore
ALLOWED_UNUSED_KEYS = ("cls_token", "mask_token", "register_tokens")


class CheckpointError(RuntimeError):
    """Checkpoint tensors do not map onto the backbone's parameters."""


@dataclass
class TokenStream:
    """A (B, T, D) token tensor plus its spatial bookkeeping.

    grid: (h, w) with h*w == T for single-grid streams.
    scale_layout: [(h_s, w_s), ...] with sum(h*w) == T for concatenated
    multi-scale streams. Exactly the metadata the bottleneck and the SPA
    de-tokenizer need to fold tokens back into maps.
    """

    data: torch.Tensor
    grid: tuple | None = None
    scale_layout: list | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"token stream must be (B, T, D), got shape {tuple(self.data.shape)}")
        t = self.data.shape[1]
        if self.grid is not None:
            h, w = self.grid
            if h * w != t:
                raise ValueError(f"grid {self.grid} does not match token count {t}")
        if self.scale_layout is not None:
            total = sum(h * w for h, w in self.scale_layout)
            if total != t:
                raise ValueError(f"scale_layout {self.scale_layout} sums to {total}, expected {t}")
        if not torch.isfinite(self.data).all():
            raise ValueError("token stream contains non-finite values")

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    def with_data(self, data: torch.Tensor) -> "TokenStream":
        """Same annotations, new tensor (token count and width must match)."""
        if data.shape != self.data.shape:
            raise ValueError(f"shape changed from {tuple(self.data.shape)} to {tuple(data.shape)}")
        return TokenStream(data, grid=self.grid, scale_layout=self.scale_layout)


@dataclass(frozen=True)
class StagePartition:
    """Contiguous equal-length block ranges covering [0, num_blocks)."""

    stages: tuple

    @classmethod
    def build(cls, num_blocks: int, num_stages: int) -> "StagePartition":
        if num_blocks % num_stages != 0:
            raise ValueError(f"num_blocks mod num_stages != 0 (num_blocks={num_blocks}, num_stages={num_stages})")
        per = num_blocks // num_stages
        return cls(tuple((i * per, (i + 1) * per) for i in range(num_stages)))

    def __len__(self):
        return len(self.stages)


def interpolate_pos_embed(table: torch.Tensor, from_grid: tuple, to_grid: tuple) -> torch.Tensor:
    """Bicubically resample a (1, h*w, D) positional table between patch grids."""
    fh, fw = from_grid
    th, tw = to_grid
    if table.shape[1] != fh * fw:
        raise ValueError(f"table has {table.shape[1]} rows, expected {fh}*{fw}")
    if (fh, fw) == (th, tw):
        return table
    d = table.shape[-1]
    grid = table.reshape(1, fh, fw, d).permute(0, 3, 1, 2)
    # float32 keeps the bicubic kernel well-conditioned even for fp16 tables
    grid = F.interpolate(grid.float(), size=(th, tw), mode="bicubic", align_corners=False)
    return grid.permute(0, 2, 3, 1).reshape(1, th * tw, d).to(table.dtype)


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection (conv with stride = kernel = P)."""

    def __init__(self, patch_size: int, embed_dim: int, in_chans: int = 3):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        x = self.proj(x)  # (B, D, H/P, W/P)
        return x.flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"heads must divide width (dim={dim}, heads={num_heads})")
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, t, d))


class LayerScale(nn.Module):
    def __init__(self, dim: int, init: float = 1.0):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), init))

    def forward(self, x):
        return x * self.gamma


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block with layer-scaled residuals."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.ls1 = LayerScale(dim)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = LayerScale(dim)

    def forward(self, x):
        x = x + self.ls1(self.attn(self.norm1(x)))
        return x + self.ls2(self.mlp(self.norm2(x)))


@dataclass
class LoadReport:
    """What a checkpoint load actually did."""

    source: str
    mapped: int = 0
    unused: list = field(default_factory=list)
    native_grid: tuple | None = None


class FrozenViT(nn.Module):
    """ViT trunk that is frozen at construction and never leaves eval mode.

    Gradients still flow *through* the blocks to upstream trainable
    modules; only the trunk's own parameters are excluded from training.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        g = cfg.backbone_native_grid
        self.patch_size = cfg.patch_size
        self.native_grid = (g, g)
        self.patch_embed = PatchEmbed(cfg.patch_size, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.resolved_backbone_heads) for _ in range(cfg.num_blocks)
        )
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.partition = StagePartition.build(cfg.num_blocks, cfg.num_stages)
        self._pos_cache = {}
        self._init_random()
        self.freeze()

    def _init_random(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):
        # frozen feature extractor: inference statistics regardless of the
        # enclosing model's mode
        return super().train(False)

    def _pos_for(self, grid: tuple) -> torch.Tensor:
        if grid not in self._pos_cache:
            self._pos_cache[grid] = interpolate_pos_embed(self.pos_embed, self.native_grid, grid)
        return self._pos_cache[grid]

    def embed(self, images: torch.Tensor) -> TokenStream:
        """Patchify + positional embedding; returns the grid-annotated stream."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % self.patch_size != 0 or w % self.patch_size != 0:
            raise ValueError(f"image size {(h, w)} not divisible by patch size {self.patch_size}")
        grid = (h // self.patch_size, w // self.patch_size)
        tokens = self.patch_embed(images) + self._pos_for(grid)
        return TokenStream(tokens, grid=grid)

    def run_stage(self, tokens: TokenStream, stage_index: int) -> TokenStream:
        """Apply one stage's worth of frozen blocks, in order."""
        if not 0 <= stage_index < len(self.partition):
            raise IndexError(f"stage_index {stage_index} out of range [0, {len(self.partition)})")
        start, stop = self.partition.stages[stage_index]
        x = tokens.data
        for i in range(start, stop):
            x = self.blocks[i](x)
        return tokens.with_data(x)

    def final_norm(self, tokens: TokenStream) -> TokenStream:
        return tokens.with_data(self.norm(tokens.data))

    def load_dinov2_state(self, state: dict, source: str = "<state>") -> LoadReport:
        """Map a DINOv2-style state dict onto this trunk.

        pos_embed arrives as (1, 1+h*w, D); the class-token slot is dropped
        and the native grid is taken from the remaining row count. Every
        wrapper parameter must be covered and every checkpoint tensor must
        be either consumed or in the allowed-unused set.
        """
        state = dict(state)
        report = LoadReport(source=source)

        pos = state.pop("pos_embed", None)
        if pos is None:
            raise CheckpointError(f"{source}: checkpoint has no pos_embed")
        if pos.ndim != 3 or pos.shape[0] != 1:
            raise CheckpointError(f"{source}: pos_embed has shape {tuple(pos.shape)}, expected (1, 1+T, D)")
        side = math.isqrt(pos.shape[1] - 1)
        if side * side != pos.shape[1] - 1:
            raise CheckpointError(f"{source}: pos_embed rows {pos.shape[1]} are not 1 + square")
        if pos.shape[2] != self.pos_embed.shape[2]:
            raise CheckpointError(
                f"{source}: pos_embed width {pos.shape[2]} != embed_dim {self.pos_embed.shape[2]}"
            )
        patch_pos = pos[:, 1:, :].to(torch.float32).contiguous()
        self.pos_embed = nn.Parameter(patch_pos, requires_grad=False)
        self.native_grid = (side, side)
        self._pos_cache = {}
        report.mapped += 1
        report.native_grid = self.native_grid

        for key in ALLOWED_UNUSED_KEYS:
            if key in state:
                state.pop(key)
                report.unused.append(key)

        own = dict(self.named_parameters())
        own.pop("pos_embed")
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise CheckpointError(
                f"{source}: name mapping failed; missing={sorted(missing)} extra={sorted(extra)}"
            )
        with torch.no_grad():
            for name, param in own.items():
                tensor = state[name]
                if tuple(tensor.shape) != tuple(param.shape):
                    raise CheckpointError(
                        f"{source}: {name} has shape {tuple(tensor.shape)}, expected {tuple(param.shape)}"
                    )
                param.copy_(tensor.to(param.dtype))
                report.mapped += 1
        self.freeze()
        return report


def resolve_checkpoint_path(spec: str):
    """Find a checkpoint file, consulting UDFA_CACHE_DIR as a fallback."""
    if os.path.exists(spec):
        return spec
    cache = os.environ.get("UDFA_CACHE_DIR")
    if cache:
        candidate = os.path.join(cache, os.path.basename(spec))
        if os.path.exists(candidate):
            return candidate
    return None


def load_backbone(cfg: ModelConfig) -> tuple:
    """Build the frozen trunk per config; returns (backbone, LoadReport)."""
    vit = FrozenViT(cfg)
    if cfg.backbone_checkpoint == "random":
        report = LoadReport(source="random", mapped=0, native_grid=vit.native_grid)
        return vit, report
    path = resolve_checkpoint_path(cfg.backbone_checkpoint)
    if path is None:
        raise CheckpointError(f"checkpoint not found: {cfg.backbone_checkpoint}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "model" in state and isinstance(state["model"], dict):
        state = state["model"]
    report = vit.load_dinov2_state(state, source=path)
    return vit, report
