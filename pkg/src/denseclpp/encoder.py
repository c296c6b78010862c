"""Toy vision-transformer encoder with global and dense projection heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Block, LayerNorm, Linear, Module


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 48
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    use_cls_token: bool = True
    proj_hidden: int = 64
    proj_out: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if min(self.image_size, self.patch_size, self.embed_dim, self.heads, self.proj_hidden, self.proj_out) < 1:
            raise ConfigError("encoder dimensions must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class DenseFeatureGrid:
    """Per-view grid of dense features, shape (B, S, S, L)."""

    features: Tensor
    normalized: bool = False
    source: str = "backbone"  # or "dense_head"

    @property
    def grid(self) -> int:
        return self.features.shape[1]

    def flat(self) -> Tensor:
        B, S, _, L = self.features.shape
        return self.features.reshape(B, S * S, L)


@dataclass
class GlobalFeature:
    features: Tensor  # (B, D)
    aggregation: str = "GAP"
    source: str = "backbone"


def patchify(images, patch_size: int):
    """(B,H,W,C) -> (B, S*S, patch*patch*C), patches and pixels row-major.

    Works on numpy arrays and on Tensors.
    """
    B, H, W, C = images.shape
    if H % patch_size or W % patch_size:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {patch_size}")
    s, t = H // patch_size, W // patch_size
    x = images.reshape(B, s, patch_size, t, patch_size, C)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, s * t, patch_size * patch_size * C)


def unpatchify(patches, patch_size: int, channels: int):
    """Inverse of :func:`patchify` for square images."""
    B, n, _ = patches.shape
    s = int(round(np.sqrt(n)))
    if s * s != n:
        raise ConfigError(f"{n} patches do not form a square grid")
    x = patches.reshape(B, s, s, patch_size, patch_size, channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, s * patch_size, s * patch_size, channels)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        E = cfg.embed_dim
        self.patch_embed = Linear(cfg.patch_dim, E, rng)
        self.pos_embed = Tensor(0.02 * rng.standard_normal((cfg.grid**2, E)), requires_grad=True)
        if cfg.use_cls_token:
            self.cls_token = Tensor(0.02 * rng.standard_normal((1, 1, E)), requires_grad=True)
            self.cls_pos = Tensor(0.02 * rng.standard_normal((1, 1, E)), requires_grad=True)
        self.blocks = [Block(E, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(E)

    def __call__(self, images) -> tuple[DenseFeatureGrid, Tensor | None]:
        cfg = self.cfg
        images = ad.as_tensor(images)
        B = images.shape[0]
        tokens = self.patch_embed(patchify(images, cfg.patch_size)) + self.pos_embed
        if cfg.use_cls_token:
            cls = ad.mul(self.cls_token + self.cls_pos, np.ones((B, 1, 1)))
            tokens = ad.concat([cls, tokens], axis=1)
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        S = cfg.grid
        if cfg.use_cls_token:
            cls_out = tokens[:, 0, :]
            tokens = tokens[:, 1:, :]
        else:
            cls_out = None
        dense = DenseFeatureGrid(tokens.reshape(B, S, S, cfg.embed_dim), normalized=False, source="backbone")
        return dense, cls_out


def encode(encoder: Encoder, images) -> tuple[DenseFeatureGrid, Tensor | None]:
    return encoder(images)


def aggregate_global(dense: DenseFeatureGrid, cls: Tensor | None, mode: str = "GAP") -> GlobalFeature:
    """Global feature from the dense grid (GAP) or the class token (CLS)."""
    mode = mode.upper()
    if mode == "GAP":
        return GlobalFeature(dense.flat().mean(axis=1), aggregation="GAP", source=dense.source)
    if mode == "CLS":
        if cls is None:
            raise ConfigError("CLS aggregation requested but the encoder has no CLS token")
        return GlobalFeature(cls, aggregation="CLS", source="backbone")
    raise ConfigError(f"unknown aggregation mode {mode!r}")


class ProjectionHead(Module):
    """Three linear layers with GELU in between; applied to the last axis."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.d_in = d_in
        self.mlp = MLP([d_in, hidden, hidden, d_out], rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ConfigError(f"projection head expects width {self.d_in}, got {x.shape[-1]}")
        return self.mlp(x)


def project(features, head: ProjectionHead):
    """Apply a projection head to a GlobalFeature, DenseFeatureGrid or Tensor."""
    if isinstance(features, DenseFeatureGrid):
        return DenseFeatureGrid(head(features.features), normalized=False, source="dense_head")
    if isinstance(features, GlobalFeature):
        return GlobalFeature(head(features.features), aggregation=features.aggregation, source="global_head")
    return head(ad.as_tensor(features))


class Model(Module):
    """Encoder plus both projection heads."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.global_head = ProjectionHead(cfg.embed_dim, cfg.proj_hidden, cfg.proj_out, rng)
        self.dense_head = ProjectionHead(cfg.embed_dim, cfg.proj_hidden, cfg.proj_out, rng)
