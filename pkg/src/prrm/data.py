"""Seeded synthetic segmentation datasets in three domains.

Each sample is a 32x32 single-channel image containing up to three
non-overlapping shapes on a textured noisy background: circle -> class 1,
square -> class 2, triangle -> class 3, background -> class 0. Domains A
and B share background level and texture and differ only in foreground
intensities, noise level and shape sizes; domain C inverts the contrast
(bright background, dark shapes) and changes the texture frequency, making
it deliberately dissimilar.

Datasets serialize to the ".prds" container: magic "PRDS", u32 version=1
(little-endian), u32 count, u16 H, u16 W, u8 channels, u8 classes, then per
sample the image as C*H*W float32 little-endian and the mask as H*W u8.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .rng import Rng, derive_seed
from .tensor import Tensor

IMAGE_SIZE = 32
NUM_CLASSES = 4

_PRDS_MAGIC = b"PRDS"
_PRDS_VERSION = 1

_SHAPE_PROB = 0.85  # per-class presence probability
_PLACEMENT_RETRIES = 40
_TEXTURE_AMPLITUDE = 0.05


@dataclass(frozen=True)
class DomainSpec:
    name: str
    size_range: tuple[int, int]          # half-extent of a shape in pixels
    fg_means: tuple[float, float, float]  # per-class foreground intensity
    noise_sigma: float
    texture_freq: float                   # cycles per pixel
    background_level: float


DOMAIN_A = DomainSpec("A", (4, 7), (0.78, 0.55, 0.92), 0.03, 0.08, 0.25)
DOMAIN_B = DomainSpec("B", (3, 6), (0.72, 0.50, 0.88), 0.05, 0.08, 0.25)
DOMAIN_C = DomainSpec("C", (4, 7), (0.25, 0.45, 0.10), 0.04, 0.30, 0.85)

DOMAINS = {"A": DOMAIN_A, "B": DOMAIN_B, "C": DOMAIN_C}


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8 in {0..3}


def _shape_pixels(kind: int, cy: int, cx: int, r: int, size: int) -> np.ndarray:
    """Boolean pixel set of one shape, fully inside the canvas."""
    ii, jj = np.mgrid[0:size, 0:size]
    if kind == 1:  # circle
        return (ii - cy) ** 2 + (jj - cx) ** 2 <= r * r
    if kind == 2:  # square
        return (np.abs(ii - cy) <= r) & (np.abs(jj - cx) <= r)
    # upward isoceles triangle: apex at cy-r, base at cy+r
    dy = ii - (cy - r)
    return (dy >= 0) & (dy <= 2 * r) & (np.abs(jj - cx) <= dy / 2.0)


def _generate_one(spec: DomainSpec, rng: Rng) -> Sample:
    size = IMAGE_SIZE
    lo, hi = spec.size_range

    # textured background
    theta = rng.uniform(0.0, 2.0 * np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = np.sin(
        2.0 * np.pi * spec.texture_freq * (ii * np.cos(theta) + jj * np.sin(theta)) + phase
    )
    img = spec.background_level + _TEXTURE_AMPLITUDE * wave
    mask = np.zeros((size, size), dtype=np.uint8)

    for cls in (1, 2, 3):
        if rng.uniform(0.0, 1.0) >= _SHAPE_PROB:
            continue
        for _ in range(_PLACEMENT_RETRIES):
            r = lo + rng.below(hi - lo + 1)
            cy = r + 1 + rng.below(size - 2 * r - 2)
            cx = r + 1 + rng.below(size - 2 * r - 2)
            pixels = _shape_pixels(cls, cy, cx, r, size)
            if not (pixels & (mask > 0)).any():
                img[pixels] = spec.fg_means[cls - 1]
                mask[pixels] = cls
                break

    noise = rng.normal((size, size), std=spec.noise_sigma).astype(np.float64)
    img = np.clip(img + noise, 0.0, 1.0).astype(np.float32)
    return Sample(image=img[None, :, :], mask=mask)


def generate(spec: DomainSpec, n: int, seed: int) -> list[Sample]:
    """n deterministic samples; sample i depends only on (spec, seed, i)."""
    if n <= 0:
        raise ValueError("n must be positive")
    return [
        _generate_one(spec, Rng(derive_seed(seed, f"sample/{spec.name}/{i}")))
        for i in range(n)
    ]


def autoencoder_target(s: Sample) -> Tensor:
    """(4, H, W) target: every channel is a copy of the input image."""
    return Tensor(np.repeat(s.image, NUM_CLASSES, axis=0))


# ---------------------------------------------------------------------------
# .prds container


def save_dataset(samples: list[Sample], path: str | Path) -> None:
    if not samples:
        raise FormatError("refusing to write an empty dataset")
    c, h, w = samples[0].image.shape
    blob = bytearray()
    blob += _PRDS_MAGIC
    blob += struct.pack("<IIHHBB", _PRDS_VERSION, len(samples), h, w, c, NUM_CLASSES)
    for s in samples:
        if s.image.shape != (c, h, w) or s.mask.shape != (h, w):
            raise FormatError("inconsistent sample shapes in dataset")
        blob += s.image.astype("<f4").tobytes()
        blob += s.mask.astype(np.uint8).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_dataset(path: str | Path) -> list[Sample]:
    raw = Path(path).read_bytes()
    if raw[:4] != _PRDS_MAGIC:
        raise FormatError(f"bad magic in {path}")
    header = struct.unpack("<IIHHBB", raw[4:18])
    version, count, h, w, c, classes = header
    if version != _PRDS_VERSION:
        raise FormatError(f"unsupported .prds version {version}")
    img_nbytes = c * h * w * 4
    mask_nbytes = h * w
    expect = 18 + count * (img_nbytes + mask_nbytes)
    if len(raw) != expect:
        raise FormatError(f"payload length {len(raw)} != expected {expect}")
    samples = []
    off = 18
    for _ in range(count):
        img = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
        off += img_nbytes
        mask = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)
        off += mask_nbytes
        if mask.max(initial=0) >= classes:
            raise FormatError("mask contains out-of-range class ids")
        samples.append(Sample(image=img.astype(np.float32), mask=mask.copy()))
    return samples
