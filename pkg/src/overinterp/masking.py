"""Pixel masks, replacement strategies and the ``SISM`` mask container.

A mask is an ``H x W`` boolean grid where ``True`` marks a masked pixel.
Masking always acts on whole pixels: every channel of a masked pixel takes
the replacement value.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Optional, Sequence

import numpy as np

from .data import NORMALIZED, NormalizationStats

__all__ = [
    "Mask",
    "MaskFormatError",
    "MaskingStrategy",
    "apply_mask",
    "mask_difference",
    "mask_disjoint",
    "mask_union",
    "parse_mask",
    "read_masks",
    "serialize_mask",
    "write_masks",
]

MAGIC = b"SISM"
VERSION = 1
_HEADER = struct.Struct("<4sBIII")


class MaskFormatError(ValueError):
    """Malformed ``SISM`` container."""


class Mask:
    """Immutable ``H x W`` binary pixel mask (1 = masked)."""

    __slots__ = ("_bits", "_count")

    def __init__(self, bits):
        bits = np.array(bits, dtype=bool)
        if bits.ndim != 2 or bits.size == 0:
            raise ValueError(f"mask must be a non-empty 2-D grid, got shape {bits.shape}")
        bits.setflags(write=False)
        self._bits = bits
        self._count = int(bits.sum())

    @classmethod
    def empty(cls, shape: Sequence[int]) -> "Mask":
        return cls(np.zeros(tuple(shape)[:2], dtype=bool))

    @classmethod
    def full(cls, shape: Sequence[int]) -> "Mask":
        return cls(np.ones(tuple(shape)[:2], dtype=bool))

    @classmethod
    def from_indices(cls, shape: Sequence[int], indices) -> "Mask":
        h, w = tuple(shape)[:2]
        flat = np.zeros(h * w, dtype=bool)
        flat[np.asarray(indices, dtype=np.int64)] = True
        return cls(flat.reshape(h, w))

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def shape(self) -> tuple[int, int]:
        return self._bits.shape

    @property
    def count(self) -> int:
        return self._count

    @property
    def num_pixels(self) -> int:
        return self._bits.size

    def indices(self) -> np.ndarray:
        """Row-major indices of the masked pixels."""
        return np.flatnonzero(self._bits)

    def invert(self) -> "Mask":
        return Mask(~self._bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask) and self.shape == other.shape and bool(np.all(self._bits == other._bits))

    def __hash__(self):
        return hash((self.shape, self._bits.tobytes()))

    def __repr__(self) -> str:
        return f"Mask(shape={self.shape}, count={self.count})"


def _check_same(a: Mask, b: Mask) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def mask_union(a: Mask, b: Mask) -> Mask:
    _check_same(a, b)
    return Mask(a.bits | b.bits)


def mask_difference(a: Mask, b: Mask) -> Mask:
    """Pixels masked in ``a`` but not in ``b``."""
    _check_same(a, b)
    return Mask(a.bits & ~b.bits)


def mask_disjoint(a: Mask, b: Mask) -> bool:
    _check_same(a, b)
    return not bool(np.any(a.bits & b.bits))


@dataclass(frozen=True)
class MaskingStrategy:
    """Where masked pixels take their values from.

    ``zero``
        Replace with 0. In normalized space with channel centering this is
        the per-channel dataset mean.
    ``mean-image``
        Replace with the per-pixel dataset mean image.
    ``channel-mean``
        Replace with the per-channel dataset mean.

    The last two need ``stats``. Replacement values are expressed in the
    value space of the images being masked.
    """

    kind: str = "zero"
    stats: Optional[NormalizationStats] = None

    KINDS = ("zero", "mean-image", "channel-mean")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown masking strategy {self.kind!r}")
        if self.kind != "zero" and self.stats is None:
            raise ValueError(f"strategy {self.kind!r} needs NormalizationStats")

    def replacement(self, shape: Sequence[int], value_space: str = NORMALIZED, centering: str = "channel") -> np.ndarray:
        h, w, c = shape
        if self.kind == "zero":
            return np.zeros((h, w, c))
        st = self.stats
        if tuple(st.shape) != (h, w, c):
            raise ValueError(f"stats shape {st.shape} does not match images {(h, w, c)}")
        raw = st.mean_image if self.kind == "mean-image" else np.broadcast_to(st.mean, (h, w, c))
        if value_space != NORMALIZED:
            return np.array(raw, dtype=np.float64)
        center = st.mean if centering == "channel" else st.mean_image
        return (raw - center) / st.std

    def to_dict(self) -> dict:
        return {"kind": self.kind}


def _mask_bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)


def apply_mask(image: np.ndarray, mask, replacement) -> np.ndarray:
    """Blend ``image * (1 - M) + replacement * M`` with whole-pixel masking.

    ``image`` may be a single ``(H, W, C)`` image or an ``(N, H, W, C)`` stack
    (with a matching stack of masks). ``replacement`` is an ``(H, W, C)``
    array or a :class:`MaskingStrategy` (normalized space assumed).
    """
    image = np.asarray(image, dtype=np.float64)
    bits = _mask_bits(mask)
    if image.shape[:-1][-2:] != bits.shape[-2:] or image.ndim - 1 != bits.ndim:
        raise ValueError(f"mask shape {bits.shape} does not match image shape {image.shape}")
    if isinstance(replacement, MaskingStrategy):
        replacement = replacement.replacement(image.shape[-3:])
    replacement = np.asarray(replacement, dtype=np.float64)
    return np.where(bits[..., None], replacement, image)


# ---------------------------------------------------------------------------
# SISM container: "SISM", version byte, uint32 H, W, count (little-endian),
# then `count` row-major bit-packed masks, each padded to a byte boundary.
# ---------------------------------------------------------------------------


def serialize_mask(masks: Iterable[Mask], stream: BinaryIO, shape: Optional[Sequence[int]] = None) -> None:
    masks = list(masks)
    if masks:
        h, w = masks[0].shape
    elif shape is not None:
        h, w = tuple(shape)[:2]
    else:
        h, w = 0, 0
    for m in masks:
        if m.shape != (h, w):
            raise ValueError(f"inconsistent mask shapes in one container: {m.shape} vs {(h, w)}")
    stream.write(_HEADER.pack(MAGIC, VERSION, h, w, len(masks)))
    for m in masks:
        stream.write(np.packbits(m.bits.reshape(-1)).tobytes())


def parse_mask(stream: BinaryIO) -> list[Mask]:
    head = stream.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise MaskFormatError(f"truncated header: {len(head)} of {_HEADER.size} bytes at offset 0")
    magic, version, h, w, count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise MaskFormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise MaskFormatError(f"unsupported version {version} at offset 4")
    per = (h * w + 7) // 8
    masks = []
    offset = _HEADER.size
    for i in range(count):
        chunk = stream.read(per)
        if len(chunk) < per:
            raise MaskFormatError(f"truncated payload: mask {i} at byte offset {offset} needs {per} bytes, got {len(chunk)}")
        bits = np.unpackbits(np.frombuffer(chunk, dtype=np.uint8), count=h * w).astype(bool)
        masks.append(Mask(bits.reshape(h, w)))
        offset += per
    return masks


def masks_to_bytes(masks: Iterable[Mask], shape=None) -> bytes:
    buf = io.BytesIO()
    serialize_mask(masks, buf, shape)
    return buf.getvalue()


def masks_from_bytes(data: bytes) -> list[Mask]:
    return parse_mask(io.BytesIO(data))


def write_masks(path, masks: Iterable[Mask], shape=None) -> None:
    with open(path, "wb") as fh:
        serialize_mask(masks, fh, shape)


def read_masks(path) -> list[Mask]:
    with open(path, "rb") as fh:
        return parse_mask(fh)
