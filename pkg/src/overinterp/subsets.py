"""Pixel-subset datasets: keep a fraction of each image's pixels, mask the rest.

Retain masks use 1 for a *kept* pixel (the opposite of a SIS masking grid).
Masked values are filled in at materialization time, so the masking
strategy stays swappable and nothing but the masks is stored.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import DatasetManifest, ImageBatch
from .masking import Mask, MaskingStrategy, read_masks, write_masks
from .sis import SisConfig, backselect
from .smallnet import Classifier, SmallNet, TrainConfig, train

__all__ = [
    "SubsetDataset",
    "SubsetSpec",
    "benchmark_image_set",
    "build_backselect_subsets",
    "build_random_subsets",
    "load_subsets",
    "materialize",
    "retained_count",
    "retrain_on_subsets",
    "save_subsets",
]


def retained_count(rho: float, num_pixels: int) -> int:
    """``floor(rho * p)``, at least 1 (1024 pixels at 5% keep 51)."""
    # rounding guards products like 0.29 * 100 = 28.999999999999996
    return max(1, math.floor(round(rho * num_pixels, 9)))


@dataclass(frozen=True)
class SubsetSpec:
    rho: float
    kind: str
    seed: Optional[int] = None
    model_id: Optional[str] = None
    strategy: str = "zero"
    sis_mode: Optional[str] = None
    sis_k: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.kind not in ("backselect", "random"):
            raise ValueError(f"unknown subset kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SubsetDataset:
    """Per-image retain masks over a source dataset."""

    masks: np.ndarray
    spec: SubsetSpec
    labels: Optional[np.ndarray] = None
    manifest: Optional[DatasetManifest] = None

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=bool)
        if masks.ndim != 3:
            raise ValueError("retain masks must have shape (N, H, W)")
        masks.setflags(write=False)
        self.masks = masks
        keep = retained_count(self.spec.rho, masks.shape[1] * masks.shape[2])
        counts = masks.reshape(len(masks), -1).sum(axis=1)
        bad = np.flatnonzero(counts != keep)
        if bad.size:
            raise ValueError(f"retain mask {bad[0]} keeps {counts[bad[0]]} pixels, expected {keep}")
        if self.manifest is not None and self.manifest.total != len(masks):
            raise ValueError(f"manifest lists {self.manifest.total} images but there are {len(masks)} masks")

    def __len__(self) -> int:
        return self.masks.shape[0]

    @property
    def retained(self) -> int:
        return retained_count(self.spec.rho, self.masks.shape[1] * self.masks.shape[2])


def _ranking_retain(order: np.ndarray, keep: int, shape) -> np.ndarray:
    bits = np.zeros(shape[0] * shape[1], dtype=bool)
    bits[order[len(order) - keep:]] = True
    return bits.reshape(shape)


def backselect_orders(model: Classifier, images: np.ndarray, config: SisConfig) -> list[np.ndarray]:
    """Full least-to-most-critical pixel order for every image.

    Selection follows the model's predicted class on each image; labels are
    never consulted.
    """
    return [backselect(model, img, None, config, None, i).order() for i, img in enumerate(images)]


def build_backselect_subsets(
    model: Classifier,
    dataset: ImageBatch,
    rho: float,
    config: SisConfig = SisConfig(),
    manifest: Optional[DatasetManifest] = None,
) -> SubsetDataset:
    """Keep the last ``floor(rho * p)`` pixels of each image's backward selection."""
    p = dataset.num_pixels
    keep = retained_count(rho, p)
    h, w = dataset.shape[:2]
    orders = backselect_orders(model, dataset.images, config)
    masks = np.stack([_ranking_retain(o, keep, (h, w)) for o in orders])
    spec = SubsetSpec(rho, "backselect", model_id=getattr(model, "model_id", None),
                      strategy=config.strategy.kind, sis_mode=config.mode, sis_k=config.k)
    return SubsetDataset(masks, spec, dataset.labels, manifest)


def build_random_subsets(
    dataset: ImageBatch, rho: float, seed: int, manifest: Optional[DatasetManifest] = None, strategy: str = "zero"
) -> SubsetDataset:
    """Uniform pixel samples without replacement; the seed fixes every mask."""
    n, (h, w) = len(dataset), dataset.shape[:2]
    keep = retained_count(rho, h * w)
    rng = np.random.default_rng(seed)
    masks = np.zeros((n, h * w), dtype=bool)
    for i in range(n):
        masks[i, rng.choice(h * w, keep, replace=False)] = True
    spec = SubsetSpec(rho, "random", seed=seed, strategy=strategy)
    return SubsetDataset(masks.reshape(n, h, w), spec, dataset.labels, manifest)


def materialize(subsets: SubsetDataset, source: ImageBatch, strategy: MaskingStrategy = MaskingStrategy()) -> ImageBatch:
    """Source images with every non-retained pixel replaced; true labels attached."""
    if len(source) != len(subsets):
        raise ValueError(f"subset masks ({len(subsets)}) do not align with source images ({len(source)})")
    if tuple(source.shape[:2]) != subsets.masks.shape[1:]:
        raise ValueError(f"mask shape {subsets.masks.shape[1:]} does not match images {source.shape}")
    r = strategy.replacement(source.shape, source.value_space, source.centering)
    images = np.where(subsets.masks[..., None], source.images, r)
    labels = subsets.labels if subsets.labels is not None else source.labels
    return ImageBatch(images, labels, source.value_space, source.stats, source.centering)


def retrain_on_subsets(
    subsets: SubsetDataset,
    source: ImageBatch,
    config: TrainConfig,
    hidden: Sequence[int] = (512,),
    nonlinearity: str = "relu",
    strategy: MaskingStrategy = MaskingStrategy(),
    num_classes: Optional[int] = None,
) -> SmallNet:
    """Train a fresh model on the materialized subsets.

    Augmentation follows ``config.augment`` (off for the plain setting, on
    for the augmented variant).
    """
    return train(materialize(subsets, source, strategy), config, hidden, nonlinearity, num_classes)


# ---------------------------------------------------------------------------
# persistence: <stem>.sism (retain masks) + <stem>.json (spec sidecar)
# ---------------------------------------------------------------------------


def save_subsets(subsets: SubsetDataset, stem) -> Path:
    stem = Path(stem)
    mask_path = stem.with_suffix(".sism")
    write_masks(mask_path, [Mask(m) for m in subsets.masks], subsets.masks.shape[1:])
    sidecar = {
        "spec": subsets.spec.to_dict(),
        "mask_file": mask_path.name,
        "count": len(subsets),
        "retained": subsets.retained,
        "manifest": None if subsets.manifest is None else subsets.manifest.to_dict(),
    }
    side = stem.with_suffix(".json")
    side.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return side


def load_subsets(sidecar_path, labels: Optional[np.ndarray] = None) -> SubsetDataset:
    sidecar_path = Path(sidecar_path)
    side = json.loads(sidecar_path.read_text())
    masks = read_masks(sidecar_path.parent / side["mask_file"])
    if len(masks) != side["count"]:
        raise ValueError(f"{sidecar_path}: expected {side['count']} masks, found {len(masks)}")
    arr = np.stack([m.bits for m in masks]) if masks else np.zeros((0, 1, 1), bool)
    manifest = None if side.get("manifest") is None else DatasetManifest.from_dict(side["manifest"])
    return SubsetDataset(arr, SubsetSpec(**side["spec"]), labels, manifest)


# ---------------------------------------------------------------------------
# human benchmark image set
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkSet:
    indices: np.ndarray          # source image index per item
    model_index: np.ndarray      # which model's ranking produced the masks
    fractions: tuple
    masks: dict                  # fraction -> (n, H, W) retain masks, nested
    presentation: list = field(default_factory=list)  # per fraction, shuffled item order


def benchmark_image_set(
    models: Sequence[Classifier],
    dataset: ImageBatch,
    fractions: Sequence[float] = (0.05, 0.3, 0.5),
    per_class: int = 10,
    floor: float = 0.99,
    seed: int = 0,
    config: SisConfig = SisConfig(),
) -> BenchmarkSet:
    """Pick ``per_class`` correctly and confidently classified images per class
    and build nested backward-selection subsets at every fraction.

    Each image is assigned one of ``models`` at random; its subsets come from
    that model's ranking, so larger fractions contain the smaller ones.
    Batches are presented in increasing fraction with shuffled order inside.
    """
    rng = np.random.default_rng(seed)
    n = len(dataset)
    assign = rng.integers(0, len(models), n)
    ok = np.zeros(n, dtype=bool)
    for j, m in enumerate(models):
        sel = assign == j
        if sel.any():
            p = m.predict_proba(dataset.images[sel])
            ok[sel] = (p.max(1) >= floor) & (p.argmax(1) == dataset.labels[sel])
    chosen = []
    for c in range(int(dataset.labels.max()) + 1):
        pool = np.flatnonzero(ok & (dataset.labels == c))
        chosen.extend(rng.choice(pool, min(per_class, pool.size), replace=False).tolist())
    chosen = np.array(sorted(chosen), dtype=np.int64)
    h, w = dataset.shape[:2]
    fractions = tuple(sorted(fractions))
    masks = {f: np.zeros((len(chosen), h, w), dtype=bool) for f in fractions}
    for t, i in enumerate(chosen):
        order = backselect(models[assign[i]], dataset.images[i], None, config, None, int(i)).order()
        for f in fractions:
            masks[f][t] = _ranking_retain(order, retained_count(f, h * w), (h, w))
    presentation = [rng.permutation(len(chosen)) for _ in fractions]
    return BenchmarkSet(chosen, assign[chosen], fractions, masks, presentation)
