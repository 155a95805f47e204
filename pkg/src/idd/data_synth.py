"""Procedural shapes-segmentation dataset.

Every sample is a pure function of ``(DatasetSpec, sample_id)``: the per-sample
generator is seeded from ``SeedSequence([spec.seed, sample_id])`` so samples can
be produced in any order or in parallel and still come out bit-identical.

Foreground class ``c`` (1..N-1) draws a shape kind from ``SHAPE_KINDS`` in
rotation, a stripe texture whose orientation is specific to the class, and a
vertical placement bias, so both appearance and absolute position carry
information about the label.
"""
from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

IGNORE = 255
SHAPE_KINDS = ("disk", "rectangle", "triangle", "ring")
MIN_SIDE = 16

MAGIC = b"IDDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI")
_SPEC = struct.Struct("<IIIIIQd")
_COUNT = struct.Struct("<I")
_SAMPLE_ID = struct.Struct("<Q")


class DatasetFormatError(ValueError):
    """Raised for unreadable, truncated or mismatching dataset files."""


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 6
    height: int = 64
    width: int = 64
    train_count: int = 2000
    val_count: int = 200
    seed: int = 0
    ignore_fraction: float = 0.02

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2 (class 0 is background), got {self.num_classes}")
        if self.num_classes > IGNORE:
            raise ValueError(f"num_classes must be <= {IGNORE} to fit 8-bit labels, got {self.num_classes}")
        if self.height < MIN_SIDE or self.width < MIN_SIDE:
            raise ValueError(
                f"height and width must be >= {MIN_SIDE} for shapes to be representable, "
                f"got {self.height}x{self.width}")
        if self.train_count < 0 or self.val_count < 0:
            raise ValueError("train_count and val_count must be non-negative")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if not 0.0 <= self.ignore_fraction <= 0.1:
            raise ValueError(f"ignore_fraction must lie in [0, 0.1], got {self.ignore_fraction}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown dataset fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # float32, 3 x H x W, values in [0, 1]
    labels: np.ndarray  # uint8, H x W, values in [0, N) or IGNORE
    sample_id: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.sample_id == other.sample_id
                and self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.labels, other.labels))


def _class_style(cls: int, num_classes: int):
    kind = SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]
    n_fg = num_classes - 1
    angle = math.pi * (cls - 1) / n_fg
    # vertical centre bias, spread from upper to lower part of the image
    v_bias = 0.3 + 0.4 * (cls - 1) / max(n_fg - 1, 1)
    return kind, angle, v_bias


def _shape_mask(kind: str, yy, xx, cy, cx, radius, rot, rng) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= radius * radius
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= radius * radius) & (d2 >= (0.55 * radius) ** 2)
    c, s = math.cos(rot), math.sin(rot)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if kind == "rectangle":
        half_w = radius * rng.uniform(0.75, 1.0)
        half_h = radius * rng.uniform(0.45, 0.7)
        return (np.abs(u) <= half_w) & (np.abs(v) <= half_h)
    # equilateral triangle with circumradius ~1.2 * radius: three half-planes
    r = 1.2 * radius
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        a = 2.0 * math.pi * k / 3.0
        inside &= (u * math.cos(a) + v * math.sin(a)) <= 0.5 * r
    return inside


def _border_pixels(labels: np.ndarray) -> np.ndarray:
    border = np.zeros(labels.shape, dtype=bool)
    diff_v = labels[1:, :] != labels[:-1, :]
    diff_h = labels[:, 1:] != labels[:, :-1]
    border[1:, :] |= diff_v
    border[:-1, :] |= diff_v
    border[:, 1:] |= diff_h
    border[:, :-1] |= diff_h
    return border


def generate_sample(spec: DatasetSpec, sample_id: int) -> Sample:
    """Render one sample; depends only on ``spec`` and ``sample_id``."""
    spec.validate()
    if sample_id < 0:
        raise ValueError(f"sample_id must be >= 0, got {sample_id}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, sample_id]))
    H, W = spec.height, spec.width
    scale = min(H, W) / 64.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    # low-frequency colour gradient plus pixel noise
    c0, c1 = rng.uniform(0.2, 0.8, size=(2, 3, 1, 1))
    g = rng.uniform(-1.0, 1.0, size=2)
    ramp = ((g[0] * yy / H + g[1] * xx / W) * 0.5 + 0.5)[None]
    image = c0 + (c1 - c0) * ramp

    while True:
        labels = np.zeros((H, W), dtype=np.uint8)
        n_shapes = int(rng.integers(1, 5))
        for _ in range(n_shapes):
            cls = int(rng.integers(1, spec.num_classes))
            kind, angle, v_bias = _class_style(cls, spec.num_classes)
            radius = rng.uniform(7.0, 14.0) * scale
            cy = float(np.clip(rng.normal(v_bias * H, 0.12 * H), radius, H - 1 - radius))
            cx = rng.uniform(radius, W - 1 - radius)
            mask = _shape_mask(kind, yy, xx, cy, cx, radius, rng.uniform(0, 2 * math.pi), rng)
            if not mask.any():
                continue
            base = rng.uniform(0.1, 0.9, size=(3, 1, 1))
            freq = rng.uniform(0.9, 1.3)
            phase = rng.uniform(0, 2 * math.pi)
            stripes = np.sin(freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)[None]
            texture = base + 0.25 * stripes
            image = np.where(mask[None], texture, image)
            labels[mask] = cls
        if (labels > 0).any():
            break

    image = image + rng.normal(0.0, 0.06, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    n_ignore = int(round(spec.ignore_fraction * H * W))
    if n_ignore > 0:
        candidates = np.flatnonzero(_border_pixels(labels))
        chosen = rng.permutation(candidates)[:n_ignore]
        # never erase the last foreground pixel
        flat = labels.reshape(-1).copy()
        flat[chosen] = IGNORE
        if ((flat > 0) & (flat != IGNORE)).any():
            labels = flat.reshape(H, W)
    return Sample(image=image, labels=labels, sample_id=sample_id)


def split_ids(spec: DatasetSpec, split: str) -> range:
    if split == "train":
        return range(0, spec.train_count)
    if split == "val":
        return range(spec.train_count, spec.train_count + spec.val_count)
    raise ValueError(f"unknown split {split!r}; expected 'train' or 'val'")


def generate_dataset(spec: DatasetSpec, split: str) -> List[Sample]:
    spec.validate()
    return [generate_sample(spec, i) for i in split_ids(spec, split)]


def stack_samples(samples: Sequence[Sample]):
    """Return ``(images, labels)`` as contiguous ``(B,3,H,W)`` / ``(B,H,W)`` arrays."""
    images = np.stack([s.image for s in samples]).astype(np.float32, copy=False)
    labels = np.stack([s.labels for s in samples])
    return images, labels


def save_dataset(samples: Iterable[Sample], path, spec: DatasetSpec) -> None:
    """Write samples to the versioned ``IDDS`` container.

    Layout (little-endian): magic ``IDDS``, u32 version, spec record
    ``<IIIIIQd`` (num_classes, height, width, train_count, val_count, seed,
    ignore_fraction), u32 sample count, then per sample a u64 sample_id, the
    float32 image (3*H*W, row-major) and the u8 labels (H*W, 255 = ignore).
    """
    spec.validate()
    samples = list(samples)
    H, W = spec.height, spec.width
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
        f.write(_SPEC.pack(spec.num_classes, H, W, spec.train_count, spec.val_count,
                           spec.seed, float(spec.ignore_fraction)))
        f.write(_COUNT.pack(len(samples)))
        for s in samples:
            if s.image.shape != (3, H, W) or s.labels.shape != (H, W):
                raise ValueError(f"sample {s.sample_id} does not match spec size {H}x{W}")
            f.write(_SAMPLE_ID.pack(s.sample_id))
            f.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())


def read_spec(path) -> DatasetSpec:
    with open(path, "rb") as f:
        spec, _ = _read_header(f, path)
    return spec


def _read_exact(f, n: int, path, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"{path}: truncated file while reading {what} "
                                 f"(wanted {n} bytes, got {len(buf)})")
    return buf


def _read_header(f, path):
    magic, version = _HEADER.unpack(_read_exact(f, _HEADER.size, path, "header"))
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}, "
                                 f"this build reads version {FORMAT_VERSION}")
    fields = _SPEC.unpack(_read_exact(f, _SPEC.size, path, "dataset spec"))
    spec = DatasetSpec(*fields)
    (count,) = _COUNT.unpack(_read_exact(f, _COUNT.size, path, "sample count"))
    return spec, count


def load_dataset(path, num_classes: Optional[int] = None) -> List[Sample]:
    """Read an ``IDDS`` file written by :func:`save_dataset`.

    If ``num_classes`` is given it must match the class count in the header.
    """
    path = Path(path)
    with open(path, "rb") as f:
        spec, count = _read_header(f, path)
        if num_classes is not None and spec.num_classes != num_classes:
            raise DatasetFormatError(
                f"{path}: file holds num_classes={spec.num_classes} but num_classes={num_classes} was requested")
        H, W = spec.height, spec.width
        n_img, n_lab = 3 * H * W * 4, H * W
        samples = []
        for k in range(count):
            (sid,) = _SAMPLE_ID.unpack(_read_exact(f, _SAMPLE_ID.size, path, f"sample {k} id"))
            img = np.frombuffer(_read_exact(f, n_img, path, f"sample {k} image"), dtype="<f4")
            lab = np.frombuffer(_read_exact(f, n_lab, path, f"sample {k} labels"), dtype=np.uint8)
            samples.append(Sample(image=img.reshape(3, H, W).astype(np.float32),
                                  labels=lab.reshape(H, W).copy(), sample_id=sid))
        if f.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes after {count} samples")
    return samples
