"""Configuration objects for U-DFA models and training runs.

A run is fully determined by one flat YAML mapping; keys are split between
ModelConfig (architecture) and TrainConfig (optimization/data). Both are
frozen dataclasses: validate once at load time, share freely afterwards.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Raised when a config file fails to parse or violates an invariant."""


def _as_int_tuple(value, name, length):
    if isinstance(value, (list, tuple)):
        out = tuple(int(v) for v in value)
    elif isinstance(value, int):
        out = (value,) * length
    else:
        raise ConfigError(f"{name} must be an int or a list of {length} ints, got {value!r}")
    if len(out) != length:
        raise ConfigError(f"{name} must have {length} entries, got {len(out)} ({value!r})")
    return out


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults correspond to the full-scale Synapse model: DINOv2-base
    backbone (patch 14, width 768, 12 blocks) split into 3 stages, with
    a three-scale CNN adapter branch.
    """

    patch_size: int = 14
    embed_dim: int = 768
    num_blocks: int = 12
    num_stages: int = 3
    num_classes: int = 9
    spa_scales: tuple = (4, 8, 16)
    spa_channels: tuple = (128, 256, 512)
    mhca_heads: int = 12
    bottleneck_channels: int | None = None  # None -> num_classes
    input_size: tuple = (224, 224)
    backbone_checkpoint: str = "random"
    # heads inside the frozen ViT blocks; None -> embed_dim // 64
    backbone_heads: int | None = None
    # patch grid the positional table is stored on when the backbone is
    # randomly initialized (checkpoints overwrite this with their own grid)
    backbone_native_grid: int = 16
    # which final stream feeds the bottleneck reshape
    bottleneck_route: str = "dino"
    spa_channel_attention: bool = True
    decoder_channels: tuple = (1024, 512, 256)

    def __post_init__(self):
        object.__setattr__(self, "spa_scales", _as_int_tuple(self.spa_scales, "spa_scales", 3))
        object.__setattr__(self, "spa_channels", _as_int_tuple(self.spa_channels, "spa_channels", 3))
        object.__setattr__(self, "input_size", _as_int_tuple(self.input_size, "input_size", 2))
        object.__setattr__(self, "decoder_channels", _as_int_tuple(self.decoder_channels, "decoder_channels", 3))
        self._validate()

    def _validate(self):
        p, d, l, n = self.patch_size, self.embed_dim, self.num_blocks, self.num_stages
        h, w = self.input_size
        for name, v in (("patch_size", p), ("embed_dim", d), ("num_blocks", l), ("num_stages", n)):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if l % n != 0:
            raise ConfigError(f"num_blocks mod num_stages != 0 (num_blocks={l}, num_stages={n})")
        if h % p != 0 or w % p != 0:
            raise ConfigError(f"input_size must be divisible by patch_size (input_size={(h, w)}, patch_size={p})")
        for r in self.spa_scales:
            if h % r != 0 or w % r != 0:
                raise ConfigError(f"input_size must be divisible by every spa_scale (input_size={(h, w)}, scale={r})")
        if list(self.spa_scales) != sorted(set(self.spa_scales)):
            raise ConfigError(f"spa_scales must be strictly increasing, got {self.spa_scales}")
        if d % self.mhca_heads != 0:
            raise ConfigError(f"mhca_heads must divide embed_dim (embed_dim={d}, mhca_heads={self.mhca_heads})")
        heads = self.resolved_backbone_heads
        if d % heads != 0:
            raise ConfigError(f"backbone_heads must divide embed_dim (embed_dim={d}, backbone_heads={heads})")
        if self.bottleneck_route not in ("dino", "spa_deepest"):
            raise ConfigError(f"bottleneck_route must be 'dino' or 'spa_deepest', got {self.bottleneck_route!r}")
        if any(c < 1 for c in self.spa_channels) or any(c < 1 for c in self.decoder_channels):
            raise ConfigError(f"channel counts must be >= 1 (spa_channels={self.spa_channels}, decoder_channels={self.decoder_channels})")
        if self.backbone_native_grid < 1:
            raise ConfigError(f"backbone_native_grid must be >= 1, got {self.backbone_native_grid}")

    @property
    def resolved_bottleneck_channels(self) -> int:
        return self.num_classes if self.bottleneck_channels is None else self.bottleneck_channels

    @property
    def resolved_backbone_heads(self) -> int:
        return self.backbone_heads if self.backbone_heads is not None else max(1, self.embed_dim // 64)

    @property
    def blocks_per_stage(self) -> int:
        return self.num_blocks // self.num_stages

    @property
    def token_grid(self) -> tuple:
        h, w = self.input_size
        return (h // self.patch_size, w // self.patch_size)

    @property
    def num_patch_tokens(self) -> int:
        gh, gw = self.token_grid
        return gh * gw

    @property
    def num_spa_tokens(self) -> int:
        h, w = self.input_size
        return sum((h // r) * (w // r) for r in self.spa_scales)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization, augmentation, and data-location settings."""

    dataset: str = "synapse"
    data_root: str = ""
    output_dir: str = "runs/default"
    batch_size: int = 12
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    max_epochs: int = 150
    max_iterations: int | None = None  # overrides max_epochs when set
    seed: int = 1234
    augment_flip: bool = True
    augment_rotation: bool = True
    augment_intensity: bool = True
    w_dice: float = 1.0
    w_ce: float = 1.0
    num_workers: int = 0
    eval_every: int = 0  # epochs between val evaluations; 0 -> only at the end

    def __post_init__(self):
        self._validate()

    def _validate(self):
        if self.dataset not in ("synapse", "acdc", "synthetic"):
            raise ConfigError(f"dataset must be synapse, acdc, or synthetic, got {self.dataset!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.w_dice < 0 or self.w_ce < 0:
            raise ConfigError(f"loss weights must be >= 0 (w_dice={self.w_dice}, w_ce={self.w_ce})")
        if self.w_dice + self.w_ce <= 0:
            raise ConfigError(f"w_dice + w_ce must be > 0 (w_dice={self.w_dice}, w_ce={self.w_ce})")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _split_mapping(mapping: dict):
    model_kw, train_kw = {}, {}
    for key, value in mapping.items():
        if key in _MODEL_KEYS:
            model_kw[key] = value
        elif key in _TRAIN_KEYS:
            train_kw[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return model_kw, train_kw


def config_from_mapping(mapping: dict) -> tuple:
    """Build (ModelConfig, TrainConfig) from one flat mapping."""
    if not isinstance(mapping, dict):
        raise ConfigError(f"config must be a flat mapping, got {type(mapping).__name__}")
    model_kw, train_kw = _split_mapping(mapping)
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path, overrides: dict | None = None) -> tuple:
    """Read a flat YAML config file, apply overrides, validate everything."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        mapping = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"could not parse {path}: {e}") from e
    if overrides:
        mapping.update(overrides)
    return config_from_mapping(mapping)


def config_to_mapping(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    out = {}
    for cfg in (model_cfg, train_cfg):
        for f in dataclasses.fields(cfg):
            v = getattr(cfg, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def save_config(model_cfg: ModelConfig, train_cfg: TrainConfig, path) -> None:
    """Write the fully-resolved config; load_config round-trips it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_mapping(model_cfg, train_cfg), sort_keys=True))


def parse_override(text: str) -> tuple:
    """Parse one 'key=value' CLI override; values use YAML scalar syntax."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, _, raw = text.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override has an empty key: {text!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"could not parse override value {raw!r}: {e}") from e
    if isinstance(value, str):
        # YAML leaves bare scientific notation like 1e-3 as a string
        try:
            value = float(value)
        except ValueError:
            pass
    return key, value


def default_synapse_config() -> tuple:
    """Full-scale Synapse setup: 8 organ classes + background at 224x224."""
    return ModelConfig(num_classes=9), TrainConfig(dataset="synapse")


def default_acdc_config() -> tuple:
    """Full-scale ACDC setup: RV/Myo/LV + background at 224x224."""
    return ModelConfig(num_classes=4), TrainConfig(dataset="acdc")
