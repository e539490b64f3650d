"""Model configuration: architecture dimensions plus the skip description."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields

from .errors import ConfigError

PHI_KINDS = ("none", "identity", "conv", "dwc", "skipat", "attn_reuse")
PARAMETRIC_PHI_KINDS = ("conv", "dwc", "skipat")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 2
    mlp_ratio: float = 4.0
    num_classes: int = 10
    skip_layers: tuple[int, ...] = field(default=())
    phi_kind: str = "none"
    dwc_kernel: int = 5
    expansion: float = 2.0
    phi_shared: bool = False
    use_cls_token: bool = True

    def __post_init__(self):
        object.__setattr__(self, "skip_layers",
                           tuple(sorted(set(int(l) for l in self.skip_layers))))
        self.validate()

    def validate(self) -> None:
        c = self
        if c.image_size <= 0 or c.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if c.image_size % c.patch_size != 0:
            raise ConfigError(
                f"image_size {c.image_size} not divisible by patch_size {c.patch_size}")
        side = c.image_size // c.patch_size
        n = side * side
        root = math.isqrt(n)
        if root * root != n:
            raise ConfigError(f"token count n={n} must be a perfect square")
        if c.embed_dim <= 0 or c.heads <= 0 or c.embed_dim % c.heads != 0:
            raise ConfigError(
                f"embed_dim {c.embed_dim} must be a positive multiple of heads {c.heads}")
        if c.depth < 0:
            raise ConfigError("depth must be nonnegative")
        if c.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")
        if c.mlp_ratio <= 0 or c.expansion <= 0:
            raise ConfigError("mlp_ratio and expansion must be positive")
        if c.phi_kind not in PHI_KINDS:
            raise ConfigError(f"unknown phi_kind {c.phi_kind!r} (choose from {PHI_KINDS})")
        if c.dwc_kernel % 2 == 0 or c.dwc_kernel < 1:
            raise ConfigError(f"dwc_kernel must be a positive odd integer, got {c.dwc_kernel}")
        if c.skip_layers:
            if c.phi_kind == "none":
                raise ConfigError("skip_layers set but phi_kind is 'none'")
            bad = [l for l in c.skip_layers if l < 2 or l > c.depth]
            if bad:
                raise ConfigError(
                    f"skip_layers {bad} outside {{2..{c.depth}}}; layer 1 must "
                    f"compute a real attention block to seed reuse")

    # -- derived quantities -------------------------------------------------

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.use_cls_token else 0)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return max(1, math.ceil(self.mlp_ratio * self.embed_dim))

    @property
    def phi_dim(self) -> int:
        return max(1, math.ceil(self.expansion * self.embed_dim))

    def is_skipped(self, layer: int) -> bool:
        return layer in self.skip_layers

    # -- JSON ----------------------------------------------------------------

    def to_json(self) -> str:
        obj = {f.name: getattr(self, f.name) for f in fields(self)}
        obj["skip_layers"] = list(self.skip_layers)
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError("config JSON must be an object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "skip_layers" in obj:
            obj["skip_layers"] = tuple(obj["skip_layers"])
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ModelConfig.from_json(fh.read())


def vit_tiny(num_classes: int = 1000, **overrides) -> ModelConfig:
    """ViT-T/16 shape at 224x224 (12 layers, width 192, 3 heads)."""
    base = dict(image_size=224, patch_size=16, in_channels=3, embed_dim=192,
                depth=12, heads=3, num_classes=num_classes)
    base.update(overrides)
    return ModelConfig(**base)


def vit_small(num_classes: int = 1000, **overrides) -> ModelConfig:
    """ViT-S/16 shape at 224x224 (width 384, 6 heads)."""
    base = dict(image_size=224, patch_size=16, in_channels=3, embed_dim=384,
                depth=12, heads=6, num_classes=num_classes)
    base.update(overrides)
    return ModelConfig(**base)


def vit_base(num_classes: int = 1000, **overrides) -> ModelConfig:
    """ViT-B/16 shape at 224x224 (width 768, 12 heads)."""
    base = dict(image_size=224, patch_size=16, in_channels=3, embed_dim=768,
                depth=12, heads=12, num_classes=num_classes)
    base.update(overrides)
    return ModelConfig(**base)


def with_skip(config: ModelConfig, skip_layers=(3, 4, 5, 6, 7, 8),
              phi_kind: str = "skipat", dwc_kernel: int = 5,
              expansion: float = 2.0, phi_shared: bool = False) -> ModelConfig:
    """Copy of `config` with an attention-skip schedule enabled."""
    obj = {f.name: getattr(config, f.name) for f in fields(config)}
    obj.update(skip_layers=tuple(skip_layers), phi_kind=phi_kind,
               dwc_kernel=dwc_kernel, expansion=expansion, phi_shared=phi_shared)
    return ModelConfig(**obj)
