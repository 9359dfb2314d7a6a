"""Spatial Pattern Adapter: a small ResNet-style CNN that produces three
multi-scale feature maps (reused as decoder skips) and one concatenated
token stream projected to the backbone width.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import TokenStream
from .config import ModelConfig


@dataclass
class MultiScaleFeatures:
    """Three feature maps at 1/r1, 1/r2, 1/r3 of the input resolution."""

    maps: tuple

    def __post_init__(self):
        if len(self.maps) != 3:
            raise ValueError(f"expected 3 maps, got {len(self.maps)}")
        for m in self.maps:
            if m.ndim != 4:
                raise ValueError(f"maps must be (B, C, H, W), got {tuple(m.shape)}")
            if not torch.isfinite(m).all():
                raise ValueError("feature map contains non-finite values")

    @property
    def grids(self) -> list:
        return [tuple(m.shape[-2:]) for m in self.maps]


def conv_bn_relu(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class SqueezeExcite(nn.Module):
    """Channel attention: globally pooled gating, sigmoid-scaled."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        gate = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(gate))))
        return x * gate[:, :, None, None]


class ResidualBlock(nn.Module):
    """Basic block: two 3x3 conv-BN (ReLU between and after the residual
    add) with a 1x1-conv shortcut. `out_grid`, when set, is enforced with a
    bilinear resize so non-octave scale ratios still land on an exact size.
    """

    def __init__(self, c_in, c_out, stride=1, out_grid=None):
        super().__init__()
        self.out_grid = out_grid
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential(
            nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
            nn.BatchNorm2d(c_out),
        )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        out = F.relu(out + self.shortcut(x), inplace=True)
        if self.out_grid is not None and tuple(out.shape[-2:]) != self.out_grid:
            out = F.interpolate(out, size=self.out_grid, mode="bilinear", align_corners=False)
        return out


class SpatialPatternAdapter(nn.Module):
    """Stem (three conv-BN-ReLU layers to 1/r1), three residual pyramid
    stages at 1/r1, 1/r2, 1/r3, optional channel attention, and per-scale
    linear projections into the token width D.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        r1, r2, r3 = cfg.spa_scales
        c1, c2, c3 = cfg.spa_channels
        h, w = cfg.input_size
        self.scales = (r1, r2, r3)
        self.input_size = (h, w)

        # stem strides cover r1 when it factors into powers of two over
        # three layers; anything else falls back to an exact resize
        stride_plans = {1: (1, 1, 1), 2: (2, 1, 1), 4: (2, 2, 1), 8: (2, 2, 2)}
        strides = stride_plans.get(r1, (2, 2, 1))
        mid = max(1, c1 // 2)
        self.stem = nn.Sequential(
            conv_bn_relu(3, mid, strides[0]),
            conv_bn_relu(mid, mid, strides[1]),
            conv_bn_relu(mid, c1, strides[2]),
        )
        self._stem_grid = (h // r1, w // r1)

        def stage(c_in, c_out, r_in, r_out):
            stride = 2 if r_out == 2 * r_in else 1
            return ResidualBlock(c_in, c_out, stride=stride, out_grid=(h // r_out, w // r_out))

        self.stage1 = stage(c1, c1, r1, r1)
        self.stage2 = stage(c1, c2, r1, r2)
        self.stage3 = stage(c2, c3, r2, r3)
        if cfg.spa_channel_attention:
            self.attn1 = SqueezeExcite(c1)
            self.attn2 = SqueezeExcite(c2)
            self.attn3 = SqueezeExcite(c3)
        else:
            self.attn1 = self.attn2 = self.attn3 = nn.Identity()
        self.proj = nn.ModuleList([nn.Linear(c, cfg.embed_dim) for c in (c1, c2, c3)])

    def stem_forward(self, images: torch.Tensor) -> torch.Tensor:
        out = self.stem(images)
        if tuple(out.shape[-2:]) != self._stem_grid:
            out = F.interpolate(out, size=self._stem_grid, mode="bilinear", align_corners=False)
        return out

    def pyramid(self, stem_out: torch.Tensor) -> MultiScaleFeatures:
        m1 = self.attn1(self.stage1(stem_out))
        m2 = self.attn2(self.stage2(m1))
        m3 = self.attn3(self.stage3(m2))
        return MultiScaleFeatures((m1, m2, m3))

    def tokenize(self, ms: MultiScaleFeatures) -> TokenStream:
        """Flatten each map, project c_s -> D, concatenate finest-first."""
        pieces, layout = [], []
        for proj, m in zip(self.proj, ms.maps):
            b, c, h, w = m.shape
            pieces.append(proj(m.flatten(2).transpose(1, 2)))
            layout.append((h, w))
        return TokenStream(torch.cat(pieces, dim=1), scale_layout=layout)

    def forward(self, images: torch.Tensor) -> tuple:
        """Returns (skips: MultiScaleFeatures, tokens: TokenStream)."""
        ms = self.pyramid(self.stem_forward(images))
        return ms, self.tokenize(ms)
