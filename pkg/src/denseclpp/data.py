"""Synthetic multi-label images and the two-view augmentation pipeline."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import ConfigError

SHAPES = ("circle", "square", "triangle")
# every colour has a channel at 0 or 255, which the background never reaches
COLORS = (
    (255, 0, 0),
    (0, 200, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 128, 0),
    (128, 0, 255),
    (128, 255, 0),
    (255, 0, 128),
    (0, 128, 255),
    (255, 255, 255),
)
VOCABULARY = tuple((SHAPES[i % len(SHAPES)], COLORS[i]) for i in range(len(COLORS)))
BACKGROUND_RANGE = (70, 170)  # 8-bit bounds of every background channel

CACHE_MAGIC = b"DCPPDS\x00\x01"
CACHE_VERSION = 1


@dataclass
class SyntheticSpec:
    num_images: int = 2000
    image_size: int = 32
    num_classes: int = 8
    objects_per_image: tuple[int, int] = (1, 4)
    rng_seed: int = 0

    def __post_init__(self):
        self.objects_per_image = tuple(self.objects_per_image)
        lo, hi = self.objects_per_image
        if self.num_classes > len(VOCABULARY):
            raise ConfigError(f"num_classes {self.num_classes} exceeds vocabulary size {len(VOCABULARY)}")
        if not 1 <= lo <= hi or hi > self.num_classes:
            raise ConfigError(f"objects_per_image {self.objects_per_image} invalid for {self.num_classes} classes")
        if self.num_images < 1 or self.image_size < 8:
            raise ConfigError("need num_images >= 1 and image_size >= 8")

    @property
    def shape_vocabulary(self):
        return VOCABULARY[: self.num_classes]


@dataclass
class AugmentParams:
    crop_scale: tuple[float, float] = (0.4, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        self.blur_sigma = tuple(self.blur_sigma)
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale {self.crop_scale} must lie in (0, 1]")
        for p in (self.flip_prob, self.blur_prob):
            if not 0 <= p <= 1:
                raise ConfigError(f"probability {p} outside [0, 1]")
        if not 0 <= self.jitter_strength < 1:
            raise ConfigError("jitter_strength must lie in [0, 1)")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(crop_scale=(1.0, 1.0), flip_prob=0.0, jitter_strength=0.0, blur_prob=0.0)


# -- rendering ----------------------------------------------------------------


def shape_mask(shape: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "triangle":
        # apex up; base at cy + r/2, apex at cy - r
        return (dy >= -r) & (dy <= 0.5 * r) & (np.abs(dx) <= 0.6 * (dy + r))
    raise ValueError(f"unknown shape {shape!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    lo, hi = BACKGROUND_RANGE
    base = rng.uniform(lo + 15, hi - 15, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = rng.uniform(1.0, 3.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    wave = np.sin(2 * np.pi * freq[0] * yy + phase[0]) + np.sin(2 * np.pi * freq[1] * xx + phase[1])
    img = base + 8.0 * wave[..., None] + rng.normal(0.0, 6.0, size=(size, size, 3))
    return np.clip(np.rint(img), lo, hi)


def render_image(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """One 8-bit image (H,W,3) and its label row; every placed object stays visible."""
    size, K = spec.image_size, spec.num_classes
    lo, hi = spec.objects_per_image
    while True:
        img = _background(rng, size)
        count = int(rng.integers(lo, hi + 1))
        classes = rng.choice(K, size=count, replace=False)
        for k in classes:
            shape, color = VOCABULARY[k]
            r = rng.uniform(size / 8, size / 4.5)
            cy, cx = rng.uniform(r, size - r, size=2)
            img[shape_mask(shape, cy, cx, r, size)] = color
        labels = np.zeros(K, dtype=np.uint8)
        for k in classes:
            labels[k] = 1
        if np.array_equal(labels, visible_classes(img, K)):
            return img.astype(np.uint8), labels


def visible_classes(img8: np.ndarray, num_classes: int) -> np.ndarray:
    """Labels read back from pixels: class k iff its colour appears anywhere."""
    flat = np.asarray(img8).reshape(-1, 3)
    out = np.zeros(num_classes, dtype=np.uint8)
    for k in range(num_classes):
        out[k] = np.any(np.all(flat == np.array(VOCABULARY[k][1]), axis=1))
    return out


def generate_dataset(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Images (N,H,W,3) float64 in [0,1] (multiples of 1/255) and labels (N,K)."""
    rng = np.random.default_rng(spec.rng_seed)
    imgs = np.empty((spec.num_images, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    labels = np.empty((spec.num_images, spec.num_classes), dtype=np.uint8)
    for i in range(spec.num_images):
        imgs[i], labels[i] = render_image(rng, spec)
    return imgs.astype(np.float64) / 255.0, labels


# -- dataset cache ------------------------------------------------------------


def save_dataset(path, images: np.ndarray, labels: np.ndarray, spec: SyntheticSpec) -> None:
    """Write the cache file.

    Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON
    header (version, spec, shapes), uint8 images N*H*W*C row-major, uint8
    labels N*K.
    """
    img8 = np.rint(np.asarray(images) * 255.0).astype(np.uint8)
    header = json.dumps(
        {
            "version": CACHE_VERSION,
            "spec": asdict(spec),
            "images_shape": list(img8.shape),
            "labels_shape": list(labels.shape),
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(img8.tobytes())
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, SyntheticSpec]:
    raw = Path(path).read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a dataset cache file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    if header["version"] != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {header['version']}")
    ishape, lshape = header["images_shape"], header["labels_shape"]
    start = 12 + hlen
    n_img = int(np.prod(ishape))
    img8 = np.frombuffer(raw, dtype=np.uint8, count=n_img, offset=start).reshape(ishape)
    labels = np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(lshape)), offset=start + n_img).reshape(lshape)
    return img8.astype(np.float64) / 255.0, labels.copy(), SyntheticSpec(**header["spec"])


def load_or_generate(spec: SyntheticSpec, cache_dir=None) -> tuple[np.ndarray, np.ndarray]:
    if cache_dir is None:
        return generate_dataset(spec)
    key = "synthetic_" + "_".join(
        str(v) for v in (spec.num_images, spec.image_size, spec.num_classes, *spec.objects_per_image, spec.rng_seed)
    )
    path = Path(cache_dir) / f"{key}.bin"
    if path.exists():
        images, labels, cached = load_dataset(path)
        if cached == spec:
            return images, labels
    images, labels = generate_dataset(spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(path, images, labels, spec)
    return images, labels


# -- augmentation -------------------------------------------------------------


def linear_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear weights, half-pixel centres, edge clamp."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def gaussian_blur_matrix(n: int, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    m = np.zeros((n, n))
    for i in range(n):
        for off, w in zip(offsets, kernel):
            m[i, min(max(i + off, 0), n - 1)] += w
    return m


def _crop_box(rng: np.random.Generator, size: int, scale: tuple[float, float]) -> tuple[int, int, int, int]:
    area = size * size
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 1 <= w <= size and 1 <= h <= size:
            y0 = int(rng.integers(0, size - h + 1))
            x0 = int(rng.integers(0, size - w + 1))
            return y0, x0, h, w
    return 0, 0, size, size


def augment_view(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, horizontal flip, colour jitter and Gaussian blur."""
    size = image.shape[0]
    y0, x0, h, w = _crop_box(rng, size, params.crop_scale)
    out = image[y0 : y0 + h, x0 : x0 + w]
    if (h, w) != (size, size):
        out = np.einsum(
            "oh,hwc,pw->opc", linear_resize_matrix(h, size), out, linear_resize_matrix(w, size), optimize=True
        )
    if rng.random() < params.flip_prob:
        out = out[:, ::-1]
    s = params.jitter_strength
    if s > 0:
        b, c, sat = rng.uniform(1 - s, 1 + s, size=3)
        out = out * b
        out = (out - out.mean()) * c + out.mean()
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = gray[..., None] + (out - gray[..., None]) * sat
        out = np.clip(out, 0.0, 1.0)
    if rng.random() < params.blur_prob:
        sigma = rng.uniform(*params.blur_sigma)
        m = gaussian_blur_matrix(size, sigma)
        out = np.einsum("oh,hwc,pw->opc", m, out, m, optimize=True)
    return np.clip(np.ascontiguousarray(out), 0.0, 1.0)


@dataclass
class Batch:
    views: np.ndarray  # (2B, H, W, C); views 2i and 2i+1 come from image i
    image_index: np.ndarray  # (B,) dataset indices
    view_image: np.ndarray = field(default=None)  # (2B,) batch image id per view

    def __post_init__(self):
        if self.view_image is None:
            self.view_image = np.repeat(np.arange(len(self.image_index)), 2)

    @property
    def anchors(self) -> np.ndarray:
        return self.views[0::2]

    @property
    def partners(self) -> np.ndarray:
        return self.views[1::2]


def make_batch(
    images: np.ndarray,
    batch_size: int,
    params: AugmentParams,
    rng: np.random.Generator,
    indices: np.ndarray | None = None,
) -> Batch:
    """Two independent augmentations of ``batch_size`` distinct images."""
    if indices is None:
        if batch_size > len(images):
            raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(images)}")
        indices = rng.choice(len(images), size=batch_size, replace=False)
    indices = np.asarray(indices)
    views = np.empty((2 * len(indices),) + images.shape[1:])
    for i, idx in enumerate(indices):
        views[2 * i] = augment_view(images[idx], params, rng)
        views[2 * i + 1] = augment_view(images[idx], params, rng)
    return Batch(views, indices)
