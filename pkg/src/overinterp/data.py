"""Image batches, CIFAR-10 binary I/O, normalization, augmentation and
synthetic data generators.

Images are stored as float64 arrays of shape ``(N, H, W, C)``. Raw images
hold byte values in [0, 255]; normalized images carry the
:class:`NormalizationStats` that produced them.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "CIFAR_SHAPE",
    "DataFormatError",
    "DatasetManifest",
    "ImageBatch",
    "NormalizationStats",
    "augment",
    "augment_params",
    "compute_stats",
    "denormalize",
    "load_cifar10",
    "normalize",
    "record_size",
    "synth_dataset",
    "synth_images",
    "write_cifar10",
]

CIFAR_SHAPE = (32, 32, 3)
RAW = "raw"
NORMALIZED = "normalized"


class DataFormatError(ValueError):
    """Malformed dataset file or inconsistent dataset metadata."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel and per-pixel statistics of a training split.

    Attributes
    ----------
    mean, std : ndarray, shape (C,)
        Per-channel mean and standard deviation in raw value space.
    mean_image : ndarray, shape (H, W, C)
        Per-pixel, per-channel dataset mean in raw value space.
    """

    mean: np.ndarray
    std: np.ndarray
    mean_image: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        mean_image = np.asarray(self.mean_image, dtype=np.float64)
        if mean.shape != std.shape:
            raise ValueError("mean and std must have the same length")
        if np.any(~(std > 0)):
            raise ValueError("channel standard deviations must be positive")
        if mean_image.ndim != 3 or mean_image.shape[-1] != mean.shape[0]:
            raise ValueError(
                f"mean image shape {mean_image.shape} does not match {mean.shape[0]} channels"
            )
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "std", _readonly(std))
        object.__setattr__(self, "mean_image", _readonly(mean_image))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.mean_image.shape)

    @classmethod
    def identity(cls, shape: Sequence[int]) -> "NormalizationStats":
        """Stats that leave values unchanged (used for synthetic data)."""
        h, w, c = shape
        return cls(np.zeros(c), np.ones(c), np.zeros((h, w, c)))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "mean_image": self.mean_image.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), np.array(d["mean_image"]))


@dataclass(frozen=True)
class ImageBatch:
    """An immutable batch of images with optional labels.

    ``value_space`` is ``"raw"`` or ``"normalized"``; normalized batches must
    carry the stats they were normalized with.
    """

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    value_space: str = RAW
    stats: Optional[NormalizationStats] = None
    centering: str = "channel"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 4 or min(images.shape[1:]) <= 0:
            raise ValueError(f"images must have shape (N, H, W, C), got {images.shape}")
        if not images.flags.owndata or images.flags.writeable:
            images = images.copy()
        object.__setattr__(self, "images", _readonly(images))
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != images.shape[0]:
                raise ValueError("labels must align with images")
            object.__setattr__(self, "labels", _readonly(labels))
        if self.value_space not in (RAW, NORMALIZED):
            raise ValueError(f"unknown value space {self.value_space!r}")
        if self.value_space == NORMALIZED and self.stats is None:
            raise ValueError("normalized batches must carry their NormalizationStats")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_pixels(self) -> int:
        return self.images.shape[1] * self.images.shape[2]

    def take(self, index) -> "ImageBatch":
        idx = np.arange(len(self))[index]
        idx = np.atleast_1d(idx)
        return ImageBatch(
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            self.value_space,
            self.stats,
            self.centering,
        )

    def with_images(self, images: np.ndarray) -> "ImageBatch":
        return ImageBatch(images, self.labels, self.value_space, self.stats, self.centering)


@dataclass
class DatasetManifest:
    """Provenance for a dataset loaded from disk."""

    paths: list[str]
    record_counts: list[int]
    split: str = "train"
    image_shape: tuple[int, int, int] = CIFAR_SHAPE
    checksums: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.split not in ("train", "test", "extra"):
            raise ValueError(f"unknown split {self.split!r}")
        self.image_shape = tuple(int(s) for s in self.image_shape)

    @property
    def total(self) -> int:
        return int(sum(self.record_counts))

    def to_dict(self) -> dict:
        return {
            "paths": list(self.paths),
            "record_counts": list(self.record_counts),
            "split": self.split,
            "image_shape": list(self.image_shape),
            "checksums": list(self.checksums),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            paths=list(d["paths"]),
            record_counts=[int(n) for n in d["record_counts"]],
            split=d.get("split", "train"),
            image_shape=tuple(d.get("image_shape", CIFAR_SHAPE)),
            checksums=list(d.get("checksums", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# CIFAR-10 binary layout
# ---------------------------------------------------------------------------


def record_size(shape: Sequence[int] = CIFAR_SHAPE) -> int:
    h, w, c = shape
    return 1 + h * w * c


def _parse_records(buf: bytes, shape, source: str, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    rec = record_size(shape)
    if len(buf) % rec != 0:
        n_full = len(buf) // rec
        raise DataFormatError(
            f"{source}: truncated record at byte offset {n_full * rec} "
            f"(length {len(buf)} is not a multiple of {rec})"
        )
    h, w, c = shape
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(
            f"{source}: label byte {labels[i]} > {num_classes - 1} in record {i} "
            f"at byte offset {i * rec}"
        )
    # channel planes, each row-major H x W
    images = raw[:, 1:].reshape(-1, c, h, w).transpose(0, 2, 3, 1)
    return images, labels


def load_cifar10(
    paths, split: str = "train", shape: Sequence[int] = CIFAR_SHAPE, num_classes: int = 10
) -> tuple[ImageBatch, DatasetManifest]:
    """Load one or more files in the CIFAR-10 binary layout.

    Each record is one label byte followed by the pixel bytes as channel
    planes (all of R, then G, then B), each plane row-major. ``shape`` lets
    the same layout carry images of other sizes.

    Returns
    -------
    batch : ImageBatch
        Raw-valued images with labels.
    manifest : DatasetManifest
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    shape = tuple(int(s) for s in shape)
    all_images, all_labels, counts, sums = [], [], [], []
    for p in paths:
        buf = Path(p).read_bytes()
        images, labels = _parse_records(buf, shape, str(p), num_classes)
        all_images.append(images)
        all_labels.append(labels)
        counts.append(int(labels.shape[0]))
        sums.append(hashlib.sha256(buf).hexdigest())
    if not all_images:
        raise DataFormatError("no dataset files given")
    batch = ImageBatch(np.concatenate(all_images), np.concatenate(all_labels), RAW)
    manifest = DatasetManifest([str(p) for p in paths], counts, split, shape, sums)
    return batch, manifest


def to_cifar_bytes(batch: ImageBatch) -> bytes:
    if batch.labels is None:
        raise ValueError("CIFAR-10 layout requires labels")
    if batch.value_space != RAW:
        raise ValueError("only raw-valued batches can be written")
    imgs = batch.images
    if np.any(imgs != np.round(imgs)) or imgs.min(initial=0) < 0 or imgs.max(initial=0) > 255:
        raise ValueError("raw images must hold integer byte values")
    if batch.labels.min(initial=0) < 0 or batch.labels.max(initial=0) > 255:
        raise ValueError("labels must fit in one byte")
    n = len(batch)
    planes = imgs.astype(np.uint8).transpose(0, 3, 1, 2).reshape(n, -1)
    out = np.empty((n, 1 + planes.shape[1]), dtype=np.uint8)
    out[:, 0] = batch.labels
    out[:, 1:] = planes
    return out.tobytes()


def write_cifar10(batch: ImageBatch, path) -> None:
    """Write a raw, labeled batch in the CIFAR-10 binary layout."""
    Path(path).write_bytes(to_cifar_bytes(batch))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def compute_stats(batch: ImageBatch) -> NormalizationStats:
    """Per-channel mean/std (population) and mean image of a raw training batch."""
    if batch.value_space != RAW:
        raise ValueError("statistics are computed on raw training images")
    x = batch.images
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    mean = flat.mean(axis=0)
    std = np.sqrt(((flat - mean) ** 2).mean(axis=0))
    # constant channels would divide by zero
    std = np.where(std > 0, std, 1.0)
    return NormalizationStats(mean, std, x.mean(axis=0))


def normalize(batch: ImageBatch, stats: NormalizationStats, centering: str = "channel") -> ImageBatch:
    """Map a raw batch to normalized space.

    ``centering="channel"`` subtracts the per-channel mean;
    ``centering="image"`` subtracts the per-pixel mean image. Both divide by
    the per-channel standard deviation.
    """
    if batch.value_space != RAW:
        raise ValueError("normalize expects a raw batch")
    if tuple(stats.shape) != batch.shape:
        raise ValueError(f"stats shape {stats.shape} does not match images {batch.shape}")
    if centering == "channel":
        center = stats.mean
    elif centering == "image":
        center = stats.mean_image
    else:
        raise ValueError(f"unknown centering {centering!r}")
    images = (batch.images - center) / stats.std
    return ImageBatch(images, batch.labels, NORMALIZED, stats, centering)


def denormalize(batch: ImageBatch) -> ImageBatch:
    if batch.value_space != NORMALIZED:
        raise ValueError("denormalize expects a normalized batch")
    stats = batch.stats
    center = stats.mean if batch.centering == "channel" else stats.mean_image
    return ImageBatch(batch.images * stats.std + center, batch.labels, RAW)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment_params(n: int, seed, pad: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Draw per-image flip flags and crop offsets ``(dy, dx)`` in [0, 2*pad]."""
    rng = np.random.default_rng(seed)
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    return flips, offsets


def augment(
    batch: ImageBatch,
    seed,
    pad: int = 4,
    fill: float = 0.0,
    force_flip: Optional[bool] = None,
) -> ImageBatch:
    """Random horizontal flip (p=0.5) and padded random crop.

    The padding takes the value ``fill``, which should be the masking
    replacement value (zero in normalized space).
    """
    n = len(batch)
    flips, offsets = augment_params(n, seed, pad)
    if force_flip is not None:
        flips = np.full(n, bool(force_flip))
    x = batch.images
    h, w = x.shape[1:3]
    x = np.where(flips[:, None, None, None], x[:, :, ::-1, :], x)
    if pad > 0:
        padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=fill)
        rows = offsets[:, 0, None] + np.arange(h)
        cols = offsets[:, 1, None] + np.arange(w)
        x = padded[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]
    return batch.with_images(x)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def synth_dataset(
    kind: str,
    n: int,
    shape: Sequence[int] = (4, 4, 1),
    seed=0,
    margin: float = 2.0,
    sigma: float = 1.0,
) -> ImageBatch:
    """Small labeled datasets with known structure, in normalized space.

    ``separable``: two Gaussian classes whose projection on a hidden unit
    direction ``batch.direction`` is pushed at least ``margin * sigma`` away
    from the origin, so the rule ``sign(<x, direction>)`` is exact.
    ``xor``: the label is the XOR of the signs along two orthogonal hidden
    directions. ``constant``: Gaussian images, every label 0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    shape = tuple(int(s) for s in shape)
    d = int(np.prod(shape))
    rng = np.random.default_rng(seed)
    x = sigma * rng.standard_normal((n, d))
    if kind == "constant":
        labels = np.zeros(n, dtype=np.int64)
    elif kind == "separable":
        u = _unit(rng, d)
        labels = rng.integers(0, 2, n)
        sign = np.where(labels == 1, 1.0, -1.0)
        t = np.abs(sigma * rng.standard_normal(n)) + margin * sigma
        x = x - np.outer(x @ u, u) + np.outer(sign * t, u)
    elif kind == "xor":
        u = _unit(rng, d)
        v = rng.standard_normal(d)
        v -= (v @ u) * u
        v /= np.linalg.norm(v)
        a = x @ u
        b = x @ v
        labels = ((a > 0) ^ (b > 0)).astype(np.int64)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    batch = ImageBatch(x.reshape((n,) + shape), labels, NORMALIZED, NormalizationStats.identity(shape))
    if kind == "separable":
        object.__setattr__(batch, "direction", u.reshape(shape))
    elif kind == "xor":
        object.__setattr__(batch, "directions", (u.reshape(shape), v.reshape(shape)))
    return batch


def _smooth_field(rng, n, h, w, c, n_waves):
    """Sums of random low-frequency plane waves, roughly unit variance."""
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.zeros((n, h, w, c))
    for _ in range(n_waves):
        fy = rng.integers(-2, 3, size=(n, 1, 1, c))
        fx = rng.integers(-2, 3, size=(n, 1, 1, c))
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1, c))
        amp = rng.standard_normal((n, 1, 1, c))
        out += amp * np.cos(2 * np.pi * (fy * yy[..., None] + fx * xx[..., None]) + phase)
    return out / np.sqrt(n_waves / 2)


def synth_images(
    n: int,
    shape: Sequence[int] = (16, 16, 3),
    num_classes: int = 10,
    seed=0,
    template_seed: int = 1234,
    signal: float = 0.5,
    clutter: float = 0.5,
    noise: float = 3.0,
) -> ImageBatch:
    """A CIFAR-like stand-in: raw byte images of ``num_classes`` noisy classes.

    Every class owns a fixed smooth color template (drawn from
    ``template_seed``, so train and test splits drawn with different ``seed``
    share classes). Each image is a randomly shifted, scaled template buried
    in smooth clutter and pixel noise, then mapped to bytes with three
    standard deviations spanning the byte range.

    The default levels put a one-hidden-layer MLP at roughly 55% test
    accuracy while a random 5% of pixels carries little class evidence.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    h, w, c = (int(s) for s in shape)
    trng = np.random.default_rng(template_seed)
    templates = _smooth_field(trng, num_classes, h, w, c, n_waves=6)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, n)
    shifts = rng.integers(-2, 3, size=(n, 2))
    scale = rng.uniform(0.6, 1.4, size=(n, 1, 1, 1))
    base = np.stack([np.roll(templates[y], tuple(s), axis=(0, 1)) for y, s in zip(labels, shifts)])
    x = signal * scale * base
    x = x + clutter * _smooth_field(rng, n, h, w, c, n_waves=4)
    x = x + noise * rng.standard_normal((n, h, w, c))
    contrast = 127.5 / (3.0 * np.sqrt(signal ** 2 + clutter ** 2 + noise ** 2))
    raw = np.clip(np.round(127.5 + contrast * x), 0, 255)
    return ImageBatch(raw, labels, RAW)
