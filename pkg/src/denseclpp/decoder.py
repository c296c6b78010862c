"""Auxiliary reconstruction decoders fed with dense feature grids."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import ConfigError, DenseFeatureGrid, unpatchify
from .nn import Block, Linear, Module, uniform_fan_in

KINDS = ("conv_bicubic", "conv_transposed", "transformer")


@dataclass
class DecoderConfig:
    kind: str = "conv_bicubic"
    channels_per_layer: int = 16
    upsample_factor: int = 4
    latent_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    global_input: bool = False  # decoding reshaped global features is not supported

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown decoder kind {self.kind!r}; expected one of {KINDS}")
        if self.latent_dim < 1 or self.channels_per_layer < 1:
            raise ConfigError("decoder widths must be positive")
        if self.upsample_factor < 2:
            raise ConfigError(f"upsample_factor must be >= 2, got {self.upsample_factor}")
        if self.kind == "transformer" and self.latent_dim % self.heads:
            raise ConfigError(f"latent_dim {self.latent_dim} not divisible by {self.heads} heads")
        if self.global_input:
            raise ConfigError("global-feature decoding is not implemented; use dense inputs")


def upsample_chain(grid: int, image_size: int, factor: int) -> list[int]:
    """Upsampling factors taking ``grid`` to ``image_size``: repeated ``factor``,
    then one remainder factor if needed."""
    if image_size % grid or image_size < 2 * grid:
        raise ConfigError(f"cannot upsample a {grid}x{grid} grid to exactly {image_size}x{image_size}")
    remaining = image_size // grid
    chain = []
    while remaining % factor == 0 and remaining > 1:
        chain.append(factor)
        remaining //= factor
    if remaining > 1:
        chain.append(remaining)
    return chain


def cubic_kernel(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x <= 1.0:
        return (a + 2.0) * x**3 - (a + 3.0) * x**2 + 1.0
    if x < 2.0:
        return a * x**3 - 5.0 * a * x**2 + 8.0 * a * x - 4.0 * a
    return 0.0


def bicubic_matrix(n_in: int, factor: int, a: float = -0.5) -> np.ndarray:
    """(n_in*factor, n_in) interpolation matrix, half-pixel centres, edge clamp."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        base = math.floor(src)
        t = src - base
        for k in range(-1, 3):
            idx = min(max(base + k, 0), n_in - 1)
            m[o, idx] += cubic_kernel(t - k, a)
    return m


def bicubic_upsample(x, factor: int) -> Tensor:
    """Bicubic upsampling of (B,h,w,C) by an integer factor."""
    if factor < 2:
        raise ValueError(f"factor must be >= 2, got {factor}")
    x = ad.as_tensor(x)
    _, h, w, _ = x.shape
    return ad.resample2d(x, bicubic_matrix(h, factor), bicubic_matrix(w, factor))


class ConvDecoder(Module):
    """3x3 convolutions interleaved with bicubic (or transposed-conv) upsampling,
    then a 1x1 convolution to image channels and a sigmoid."""

    def __init__(self, cfg: DecoderConfig, in_dim: int, grid: int, image_size: int, channels: int, rng):
        super().__init__()
        if cfg.kind not in ("conv_bicubic", "conv_transposed"):
            raise ConfigError(f"ConvDecoder cannot build kind {cfg.kind!r}")
        self.cfg = cfg
        self.chain = upsample_chain(grid, image_size, cfg.upsample_factor)
        ch = cfg.channels_per_layer
        self.convs = []
        self.ups = []
        c_in = in_dim
        for i, f in enumerate(self.chain):
            w = uniform_fan_in(rng, 9 * c_in, (3, 3, c_in, ch))
            setattr(self, f"conv{i}_w", w)
            setattr(self, f"conv{i}_b", Tensor(np.zeros(ch), requires_grad=True))
            self.convs.append((w, getattr(self, f"conv{i}_b")))
            if cfg.kind == "conv_transposed":
                tw = uniform_fan_in(rng, ch, (f, f, ch, ch))
                setattr(self, f"up{i}_w", tw)
                setattr(self, f"up{i}_b", Tensor(np.zeros(ch), requires_grad=True))
                self.ups.append((tw, getattr(self, f"up{i}_b")))
            c_in = ch
        self.out_w = uniform_fan_in(rng, ch, (1, 1, ch, channels))
        self.out_b = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        for i, f in enumerate(self.chain):
            w, b = self.convs[i]
            x = ad.gelu(ad.conv2d(x, w, b))
            if self.cfg.kind == "conv_bicubic":
                x = bicubic_upsample(x, f)
            else:
                tw, tb = self.ups[i]
                x = ad.gelu(ad.conv_transpose2d(x, tw, tb))
        return ad.sigmoid(ad.conv2d(x, self.out_w, self.out_b))


class TransformerDecoder(Module):
    """Linear projection to a latent width, transformer blocks, per-token
    linear map to pixel patches."""

    def __init__(self, cfg: DecoderConfig, in_dim: int, grid: int, image_size: int, channels: int, rng):
        super().__init__()
        if image_size % grid:
            raise ConfigError(f"image size {image_size} not divisible by grid {grid}")
        self.cfg = cfg
        self.patch = image_size // grid
        self.channels = channels
        self.embed = Linear(in_dim, cfg.latent_dim, rng)
        self.pos_embed = Tensor(0.02 * rng.standard_normal((grid * grid, cfg.latent_dim)), requires_grad=True)
        self.blocks = [Block(cfg.latent_dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.head = Linear(cfg.latent_dim, self.patch * self.patch * channels, rng)

    def tokens(self, x: Tensor) -> Tensor:
        """(B,S,S,L) -> per-token patch values (B, S*S, patch*patch*C) in [0,1]."""
        B, S, _, L = x.shape
        t = self.embed(x.reshape(B, S * S, L)) + self.pos_embed
        for block in self.blocks:
            t = block(t)
        return ad.sigmoid(self.head(t))

    def __call__(self, x: Tensor) -> Tensor:
        return unpatchify(self.tokens(x), self.patch, self.channels)


def build_decoder(cfg: DecoderConfig, in_dim: int, grid: int, image_size: int, channels: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    if cfg.kind == "transformer":
        return TransformerDecoder(cfg, in_dim, grid, image_size, channels, rng)
    return ConvDecoder(cfg, in_dim, grid, image_size, channels, rng)


def _features(dense) -> Tensor:
    return dense.features if isinstance(dense, DenseFeatureGrid) else ad.as_tensor(dense)


def conv_decode(dense, decoder: ConvDecoder) -> Tensor:
    return decoder(_features(dense))


def transformer_decode(dense, decoder: TransformerDecoder) -> Tensor:
    return decoder(_features(dense))


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]."""
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def export_reconstructions(out_dir, images: np.ndarray, recon: np.ndarray) -> list[float]:
    """Write input_XX.png / recon_XX.png pairs and psnr.csv.

    PSNR is computed on the 8-bit images as written, so it can be recomputed
    from the PNG files alone.
    """
    from pathlib import Path

    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    values = []
    rows = ["index,input,reconstruction,psnr_db"]
    for i, (x, xh) in enumerate(zip(images, recon)):
        a, b = to_uint8(x), to_uint8(xh)
        Image.fromarray(a).save(out / f"input_{i:02d}.png")
        Image.fromarray(b).save(out / f"recon_{i:02d}.png")
        value = psnr(a / 255.0, b / 255.0)
        values.append(value)
        rows.append(f"{i},input_{i:02d}.png,recon_{i:02d}.png,{value!r}")
    (out / "psnr.csv").write_text("\n".join(rows) + "\n")
    return values
