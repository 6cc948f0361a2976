"""Synthetic weakly-labelled lesion images with held-out masks.

Each sample is an independent "patient": a smooth textured background with
noise, and for positives an anisotropic Gaussian blob whose half-maximum region
is the ground-truth mask. Labels are image-level only; masks exist for
evaluation.

``CADS`` file layout, little-endian::

    b"CADS" | u32 version | u32 count | u32 H | u32 W
    per sample: f32 image[H*W] | u8 label | u8 mask[H*W]
    u32 CRC32 of everything before it
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, RejectedInput

SIDE = 64
MIN_MASK_AREA = 64
MAGIC = b"CADS"
VERSION = 1
_MAX_REDRAWS = 100


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 2500
    pos_frac: float = 0.5
    intensity_min: float = 0.5
    intensity_max: float = 0.9
    radius_min: float = 5.0
    radius_max: float = 9.0
    texture: float = 0.3
    noise: float = 0.05
    seed: int = 0

    def validate(self):
        if self.count < 0:
            raise RejectedInput("count must be nonnegative")
        if not 0 < self.pos_frac < 1:
            raise RejectedInput("positive fraction must lie strictly between 0 and 1")
        if not 0 < self.intensity_min <= self.intensity_max:
            raise RejectedInput("need 0 < intensity_min <= intensity_max")
        if not 0 < self.radius_min <= self.radius_max or 2 * self.radius_max >= SIDE:
            raise RejectedInput(f"need 0 < radius_min <= radius_max < {SIDE // 2}")
        if math.pi * self.radius_max ** 2 < MIN_MASK_AREA:
            raise RejectedInput(
                f"radius_max {self.radius_max} cannot produce the minimum mask area of {MIN_MASK_AREA} pixels"
            )
        if self.texture < 0 or self.noise < 0:
            raise RejectedInput("texture and noise amplitudes must be nonnegative")


@dataclass
class SyntheticSample:
    image: np.ndarray  # (64, 64) float32 in [0, 1]
    label: int
    mask: np.ndarray  # (64, 64) uint8


@dataclass
class Dataset:
    images: np.ndarray  # (N, 64, 64) float32
    labels: np.ndarray  # (N,) uint8
    masks: np.ndarray  # (N, 64, 64) uint8

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> SyntheticSample:
        return SyntheticSample(self.images[i], int(self.labels[i]), self.masks[i])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.masks[index])

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        """Split by sample id; samples are independent so the halves share no patient."""
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.masks, other.masks)
        )

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(np.zeros((0, SIDE, SIDE), np.float32), np.zeros(0, np.uint8), np.zeros((0, SIDE, SIDE), np.uint8))


_YY, _XX = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)


def _texture(rng) -> np.ndarray:
    """Sum of a few low-frequency cosines, rescaled to [0, 1]."""
    field = np.zeros((SIDE, SIDE))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 2.5, size=2) / SIDE
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(2 * np.pi * (fy * _YY + fx * _XX) + phase)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)


def _blob(rng, spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Anisotropic Gaussian of peak ``intensity``; mask is where it reaches half maximum."""
    for _ in range(_MAX_REDRAWS):
        ry, rx = rng.uniform(spec.radius_min, spec.radius_max, size=2)
        margin = max(ry, rx)
        cy, cx = rng.uniform(margin, SIDE - 1 - margin, size=2)
        theta = rng.uniform(0, np.pi)
        peak = rng.uniform(spec.intensity_min, spec.intensity_max)
        # half-maximum radius r <-> sigma = r / sqrt(2 ln 2)
        sy, sx = ry / math.sqrt(2 * math.log(2)), rx / math.sqrt(2 * math.log(2))
        dy, dx = _YY - cy, _XX - cx
        u = np.cos(theta) * dx + np.sin(theta) * dy
        v = -np.sin(theta) * dx + np.cos(theta) * dy
        shape = np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
        mask = (shape >= 0.5).astype(np.uint8)
        if mask.sum() >= MIN_MASK_AREA:
            return peak * shape, mask
    raise RejectedInput("could not draw a blob with the minimum mask area; widen the radius range")


def _sample(spec: DatasetSpec, index: int, positive: bool) -> SyntheticSample:
    rng = np.random.default_rng([spec.seed, index])
    image = spec.texture * _texture(rng) if spec.texture > 0 else np.zeros((SIDE, SIDE))
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=(SIDE, SIDE))
    mask = np.zeros((SIDE, SIDE), np.uint8)
    if positive:
        blob, mask = _blob(rng, spec)
        image = image + blob
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SyntheticSample(image, int(positive), mask)


def generate(spec: DatasetSpec) -> Dataset:
    """Exactly ``round(count * pos_frac)`` positives, placed by a seeded permutation."""
    spec.validate()
    n_pos = int(round(spec.count * spec.pos_frac))
    labels = np.zeros(spec.count, dtype=np.uint8)
    labels[:n_pos] = 1
    labels = labels[np.random.default_rng([spec.seed, 2**31 - 1]).permutation(spec.count)]
    if spec.count == 0:
        return Dataset.empty()
    samples = [_sample(spec, i, bool(labels[i])) for i in range(spec.count)]
    return Dataset(
        np.stack([s.image for s in samples]),
        labels,
        np.stack([s.mask for s in samples]),
    )


def save(dataset: Dataset, path) -> None:
    n = len(dataset)
    parts = [MAGIC, struct.pack("<IIII", VERSION, n, SIDE, SIDE)]
    for i in range(n):
        parts.append(np.ascontiguousarray(dataset.images[i], dtype="<f4").tobytes())
        parts.append(struct.pack("<B", int(dataset.labels[i])))
        parts.append(np.ascontiguousarray(dataset.masks[i], dtype=np.uint8).tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 24 or buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a CADS dataset")
    version, n, h, w = struct.unpack_from("<IIII", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: dataset version {version}, expected {VERSION}")
    record = 4 * h * w + 1 + h * w
    expected = 20 + n * record + 4
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)} (truncated or padded)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    if n == 0:
        return Dataset(np.zeros((0, h, w), np.float32), np.zeros(0, np.uint8), np.zeros((0, h, w), np.uint8))
    raw = np.frombuffer(body, dtype=np.uint8, offset=20).reshape(n, record)
    images = raw[:, : 4 * h * w].copy().view("<f4").reshape(n, h, w).astype(np.float32)
    labels = raw[:, 4 * h * w].copy()
    masks = raw[:, 4 * h * w + 1:].copy().reshape(n, h, w)
    return Dataset(images, labels, masks)
