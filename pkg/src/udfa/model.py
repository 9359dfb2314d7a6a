"""U-DFA assembly: frozen ViT + SPA run side by side, N fusion stages, a
token-grid bottleneck, and a three-stage cascade decoder fed by SPA skips.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FrozenViT, LoadReport, TokenStream, load_backbone
from .config import ModelConfig
from .lgfa import LocalGlobalFusionAdapter
from .spa import MultiScaleFeatures, SpatialPatternAdapter


@dataclass
class EncoderState:
    """Everything the decoder side needs from the encoder."""

    f_dino: TokenStream
    f_spa: TokenStream
    skips: MultiScaleFeatures


@dataclass
class ParameterReport:
    frozen_count: int
    trainable_count: int
    breakdown: dict

    @property
    def total(self) -> int:
        return self.frozen_count + self.trainable_count

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_count / self.total


def tokens_to_map(stream: TokenStream, grid: tuple | None = None) -> torch.Tensor:
    """(B, h*w, D) tokens -> (B, D, h, w) map."""
    grid = grid or stream.grid
    if grid is None:
        raise ValueError("token stream has no grid annotation")
    h, w = grid
    b, t, d = stream.data.shape
    if h * w != t:
        raise ValueError(f"grid {grid} does not match token count {t}")
    return stream.data.transpose(1, 2).reshape(b, d, h, w)


def split_scales(stream: TokenStream) -> list:
    """Split a concatenated multi-scale stream into per-scale grid streams."""
    if stream.scale_layout is None:
        raise ValueError("token stream has no scale_layout annotation")
    out, start = [], 0
    for h, w in stream.scale_layout:
        out.append(TokenStream(stream.data[:, start : start + h * w], grid=(h, w)))
        start += h * w
    return out


def detokenize(stream: TokenStream) -> list:
    """Fold a multi-scale stream back into per-scale (B, D, h, w) maps."""
    return [tokens_to_map(s) for s in split_scales(stream)]


class DoubleConv(nn.Module):
    """Two consecutive 3x3 conv + BN + ReLU layers."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class CascadeDecoder(nn.Module):
    """Coarse-to-fine: at each stage, resize to the next skip's grid,
    concatenate the skip, DoubleConv; finish with a bilinear resize to the
    input size and two 1x1 convs (ReLU between).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.spa_channels
        da, db, dc = cfg.decoder_channels
        self.stage_a = DoubleConv(cfg.resolved_bottleneck_channels + c3, da)
        self.stage_b = DoubleConv(da + c2, db)
        self.stage_c = DoubleConv(db + c1, dc)
        self.head = nn.Sequential(
            nn.Conv2d(dc, dc, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(dc, cfg.num_classes, 1),
        )

    @staticmethod
    def _fit(x, size):
        if tuple(x.shape[-2:]) == tuple(size):
            return x
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)

    def forward(self, bottleneck_out: torch.Tensor, skips: MultiScaleFeatures, out_size: tuple) -> torch.Tensor:
        s1, s2, s3 = skips.maps
        x = self._fit(bottleneck_out, s3.shape[-2:])
        x = self.stage_a(torch.cat([x, s3], dim=1))
        x = self._fit(x, s2.shape[-2:])
        x = self.stage_b(torch.cat([x, s2], dim=1))
        x = self._fit(x, s1.shape[-2:])
        x = self.stage_c(torch.cat([x, s1], dim=1))
        x = self._fit(x, out_size)
        return self.head(x)


class UDFA(nn.Module):
    """Full segmentation network. The ViT trunk is frozen; SPA, the fusion
    adapters, the bottleneck conv, and the decoder train.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone, self.load_report = load_backbone(cfg)
        self.spa = SpatialPatternAdapter(cfg)
        self.lgfas = nn.ModuleList(
            LocalGlobalFusionAdapter(cfg.embed_dim, cfg.mhca_heads) for _ in range(cfg.num_stages)
        )
        self.bottleneck_conv = nn.Conv2d(cfg.embed_dim, cfg.resolved_bottleneck_channels, 1)
        self.decoder = CascadeDecoder(cfg)

    def encode(self, images: torch.Tensor, fusion_enabled: bool = True, collect_attention: bool = False):
        """Run both streams through the N fusion stages.

        Per stage i: inject SPA tokens into the frozen stream, run the
        stage's frozen blocks, refresh the SPA tokens from the stage
        output. The trunk's final norm is applied after the loop so the
        stage partition does not change what a full pass computes.
        """
        f_dino = self.backbone.embed(images)
        skips, f_spa = self.spa(images)
        attention = {}
        for i, lgfa in enumerate(self.lgfas):
            if fusion_enabled:
                if collect_attention:
                    f_dino, w = lgfa.inject(f_dino, f_spa, return_weights=True)
                    attention[f"stage{i}/inject"] = w.detach()
                else:
                    f_dino = lgfa.inject(f_dino, f_spa)
            f_dino = self.backbone.run_stage(f_dino, i)
            if fusion_enabled:
                if collect_attention:
                    f_spa, w = lgfa.refresh(f_spa, f_dino, return_weights=True)
                    attention[f"stage{i}/refresh"] = w.detach()
                else:
                    f_spa = lgfa.refresh(f_spa, f_dino)
        f_dino = self.backbone.final_norm(f_dino)
        state = EncoderState(f_dino=f_dino, f_spa=f_spa, skips=skips)
        if collect_attention:
            return state, attention
        return state

    def bottleneck(self, state: EncoderState) -> torch.Tensor:
        """Reshape the routed final stream to its grid, 1x1-conv D down."""
        if self.cfg.bottleneck_route == "dino":
            fmap = tokens_to_map(state.f_dino)
        else:  # spa_deepest
            fmap = tokens_to_map(split_scales(state.f_spa)[-1])
        return self.bottleneck_conv(fmap)

    def decode(self, bottleneck_out: torch.Tensor, skips: MultiScaleFeatures, out_size: tuple) -> torch.Tensor:
        return self.decoder(bottleneck_out, skips, out_size)

    def forward(self, images: torch.Tensor, fusion_enabled: bool = True) -> torch.Tensor:
        state = self.encode(images, fusion_enabled=fusion_enabled)
        return self.decode(self.bottleneck(state), state.skips, images.shape[-2:])

    # -- accounting and trainable-state persistence ----------------------

    def parameter_report(self) -> ParameterReport:
        frozen = trainable = 0
        breakdown = {"backbone": 0, "spa": 0, "lgfa": 0, "bottleneck": 0, "decoder": 0}
        for name, p in self.named_parameters():
            n = p.numel()
            if p.requires_grad:
                trainable += n
            else:
                frozen += n
            if name.startswith("backbone."):
                breakdown["backbone"] += n
            elif name.startswith("spa."):
                breakdown["spa"] += n
            elif name.startswith("lgfas."):
                breakdown["lgfa"] += n
            elif name.startswith("bottleneck_conv."):
                breakdown["bottleneck"] += n
            else:
                breakdown["decoder"] += n
        return ParameterReport(frozen_count=frozen, trainable_count=trainable, breakdown=breakdown)

    def trainable_state(self) -> dict:
        """Everything the optimizer touches plus adapter/decoder buffers
        (BN running stats); the frozen trunk is reconstructable from its
        own checkpoint and is not duplicated here.
        """
        return {k: v for k, v in self.state_dict().items() if not k.startswith("backbone.")}

    def save_trainable(self, path) -> None:
        state = self.trainable_state()
        payload = {
            "state": state,
            "manifest": {k: list(v.shape) for k, v in state.items()},
            "config_hash": model_config_hash(self.cfg),
            "config": dataclasses.asdict(self.cfg),
        }
        torch.save(payload, path)

    def load_trainable(self, path, strict_config: bool = True) -> None:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if strict_config and payload.get("config_hash") != model_config_hash(self.cfg):
            raise ValueError(
                "checkpoint was produced under a different model config "
                f"(hash {payload.get('config_hash')} != {model_config_hash(self.cfg)}); "
                "pass strict_config=False to load anyway"
            )
        state = payload["state"]
        own = self.trainable_state()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"trainable state mismatch; missing={missing} extra={extra}")
        self.load_state_dict(state, strict=False)


def model_config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(cfg: ModelConfig, seed: int | None = None) -> UDFA:
    """Construct a UDFA; with a seed, initialization is bitwise reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return UDFA(cfg)
