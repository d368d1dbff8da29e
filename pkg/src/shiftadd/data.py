"""Deterministic synthetic colored-shapes dataset and its on-disk container.

Each class is a distinct colored pattern stamped onto a gray background at a
seed-determined position, plus gaussian pixel noise. Pattern pixels are the
informative foreground; everything else is noise, which is exactly the split
the router analysis needs. Same seed, same bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import make_rng

MAGIC = b"SHADDSET"
VERSION = 1

PATTERN_SIDE = 7


class FormatError(ValueError):
    """Malformed dataset container."""


class VersionError(FormatError):
    """Container version not supported."""


def _stencils() -> np.ndarray:
    """Ten 7x7 boolean pattern stencils, one per supported class."""
    s = np.zeros((10, PATTERN_SIDE, PATTERN_SIDE), dtype=bool)
    s[0, 1:6, 1:6] = True                      # solid square
    s[1, 3, :] = s[1, :, 3] = True             # plus
    s[2, ::2, :] = True                        # horizontal stripes
    s[3, :, ::2] = True                        # vertical stripes
    idx = np.arange(PATTERN_SIDE)
    s[4, idx, idx] = s[4, idx[:-1], idx[1:]] = s[4, idx[1:], idx[:-1]] = True  # thick diagonal
    s[5, 0, :] = s[5, -1, :] = s[5, :, 0] = s[5, :, -1] = True                 # frame
    s[6] = (idx[:, None] + idx[None, :]) % 2 == 0                              # checkerboard
    s[7, idx, idx] = s[7, idx, idx[::-1]] = True                               # X
    s[8, 0, :] = s[8, :, 3] = True                                             # T
    s[9, 1::3, 1::3] = True                                                    # dot grid
    return s


STENCILS = _stencils()

COLORS = np.asarray([
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.1, 0.1, 1.0],
    [1.0, 1.0, 0.1],
    [1.0, 0.1, 1.0],
    [0.1, 1.0, 1.0],
    [1.0, 0.6, 0.1],
    [0.6, 0.1, 1.0],
    [0.1, 1.0, 0.6],
    [0.9, 0.9, 0.9],
], dtype=np.float32)

BACKGROUND = 0.5


@dataclass
class SyntheticSpec:
    img: int
    classes: int
    samples_per_class: int
    seed: int
    channels: int = 3
    noise_std: float = 0.15

    def __post_init__(self):
        if min(self.img, self.classes, self.samples_per_class, self.channels) <= 0:
            raise ValueError("all extents must be positive")
        if self.classes > len(STENCILS):
            raise ValueError(f"at most {len(STENCILS)} classes supported, got {self.classes}")
        if self.img < PATTERN_SIDE:
            raise ValueError(f"image side must be at least {PATTERN_SIDE}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass
class Dataset:
    images: np.ndarray     # (N, img, img, channels) float32
    labels: np.ndarray     # (N,) int64

    def __len__(self) -> int:
        return self.labels.shape[0]


def gen_shapes_with_masks(spec: SyntheticSpec):
    """Dataset plus per-image boolean foreground masks."""
    rng = make_rng(spec.seed)
    n = spec.classes * spec.samples_per_class
    images = np.full((n, spec.img, spec.img, spec.channels), BACKGROUND, dtype=np.float32)
    masks = np.zeros((n, spec.img, spec.img), dtype=bool)
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class).astype(np.int64)
    span = spec.img - PATTERN_SIDE + 1
    offsets = rng.integers(0, span, size=(n, 2))
    for i in range(n):
        cls = labels[i]
        r, c = offsets[i]
        stencil = STENCILS[cls]
        color = COLORS[cls][:spec.channels]
        patch = images[i, r:r + PATTERN_SIDE, c:c + PATTERN_SIDE, :]
        patch[stencil] = color
        masks[i, r:r + PATTERN_SIDE, c:c + PATTERN_SIDE] |= stencil
    if spec.noise_std > 0:
        images += rng.normal(0.0, spec.noise_std, size=images.shape).astype(np.float32)
    return Dataset(images=images, labels=labels), masks


def gen_shapes(spec: SyntheticSpec) -> Dataset:
    dataset, _ = gen_shapes_with_masks(spec)
    return dataset


def token_foreground(masks: np.ndarray, patch: int, min_fraction: float = 0.125) -> np.ndarray:
    """Token-level foreground flags: patches whose pattern-pixel fraction is
    at least `min_fraction`. Returns (N, tokens) bool in row-major token
    order, matching the patch embedding."""
    n, img, _ = masks.shape
    side = img // patch
    m = masks.reshape(n, side, patch, side, patch)
    frac = m.transpose(0, 1, 3, 2, 4).reshape(n, side * side, patch * patch).mean(axis=2)
    return frac >= min_fraction


# ---------------------------------------------------------------------------
# container format: magic | version u32 | img u32 | channels u32 | classes-ish
# u32 (stored as max label + 1) | n u32 | labels i32[n] | images f32[...] all
# little-endian

_HEADER = struct.Struct("<8sIIIII")


def save_dataset(path, dataset: Dataset) -> None:
    n = len(dataset)
    img = dataset.images.shape[1]
    channels = dataset.images.shape[3]
    classes = int(dataset.labels.max()) + 1 if n else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, img, channels, classes, n))
        fh.write(dataset.labels.astype("<i4").tobytes())
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} bytes, need {_HEADER.size}")
    magic, version, img, channels, classes, n = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise VersionError(f"container version {version} unsupported (expected {VERSION})")
    offset = _HEADER.size
    labels_bytes = 4 * n
    if len(blob) < offset + labels_bytes:
        raise FormatError(f"truncated labels at offset {offset}")
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=offset).astype(np.int64)
    offset += labels_bytes
    img_count = n * img * img * channels
    if len(blob) < offset + 4 * img_count:
        raise FormatError(f"truncated image payload at offset {offset}")
    images = np.frombuffer(blob, dtype="<f4", count=img_count, offset=offset)
    images = images.reshape(n, img, img, channels).astype(np.float32)
    return Dataset(images=images, labels=labels)
