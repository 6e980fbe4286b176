"""Patch-based image encoder.

A small pre-norm transformer over non-overlapping pixel patches. The
features handed to the adapter are the hidden states taken one block
before the last: the final block's weights exist in every checkpoint
but are never run, and no final normalization is applied. All encoder
parameters stay frozen in both training stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .images import GrayImage
from .layers import ConfigError


@dataclass
class VisionConfig:
    image_side: int = 32
    patch_size: int = 8
    d_vision: int = 64
    n_layers: int = 3
    n_heads: int = 4

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ConfigError(
                f"image side {self.image_side} not divisible by patch {self.patch_size}")
        if self.n_layers < 2:
            raise ConfigError("need at least 2 layers so a penultimate layer exists")
        if self.d_vision % self.n_heads:
            raise ConfigError(f"d_vision {self.d_vision} not divisible by {self.n_heads} heads")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2


@dataclass
class PatchFeatures:
    tokens: Tensor           # [num_patches, d_vision]
    source_layer: int        # 1-indexed penultimate block


def patchify(image: GrayImage, patch_size: int) -> Tensor:
    """Non-overlapping patches, row-major patch order, pixels scaled /255."""
    if image.width != image.height:
        raise ConfigError(f"encoder input must be square, got {image.width}x{image.height}")
    side = image.width
    if side % patch_size:
        raise ConfigError(f"side {side} not divisible by patch {patch_size}")
    n = side // patch_size
    px = image.pixels.astype(ad.DEFAULT_DTYPE) / 255.0
    patches = (px.reshape(n, patch_size, n, patch_size)
                 .transpose(0, 2, 1, 3)
                 .reshape(n * n, patch_size * patch_size))
    return ad.constant(patches)


def init_params(cfg: VisionConfig, rng: np.random.Generator,
                params: dict[str, Tensor] | None = None, dtype=None) -> dict[str, Tensor]:
    params = params if params is not None else {}
    dtype = dtype or ad.DEFAULT_DTYPE
    layers.init_linear(params, "vision.patch_embed",
                       cfg.d_vision, cfg.patch_size ** 2, rng, dtype=dtype)
    params["vision.pos_embed"] = Tensor(
        rng.normal(0.0, 0.02, size=(cfg.num_patches, cfg.d_vision)).astype(dtype), dtype=dtype)
    for i in range(cfg.n_layers):
        layers.init_block(params, f"vision.block{i}", cfg.d_vision, rng, dtype=dtype)
    return params


def encode(image: GrayImage, cfg: VisionConfig, params: dict[str, Tensor]) -> PatchFeatures:
    """Embed patches and run every block except the last."""
    patches = patchify(image, cfg.patch_size)
    x = ad.add(layers.linear(patches, params, "vision.patch_embed"),
               params["vision.pos_embed"])
    for i in range(cfg.n_layers - 1):
        x = layers.transformer_block(x, params, f"vision.block{i}", cfg.n_heads, causal=False)
    return PatchFeatures(tokens=x, source_layer=cfg.n_layers - 1)


def freeze_flags(params: dict[str, Tensor]) -> dict[str, bool]:
    """Every encoder parameter is non-trainable in both stages."""
    return {name: True for name in params if name.startswith("vision.")}
