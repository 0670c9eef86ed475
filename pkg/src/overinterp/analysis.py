"""Aggregate analyses over SIS and pixel-subset results.

Everything here is a fixed-order reduction, so repeated runs on the same
models and data give identical numbers. Confidence intervals are two-sided
normal-approximation intervals; for differences of means the standard error
is the unpooled (Welch) one.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np

from .data import ImageBatch
from .masking import Mask, MaskingStrategy
from .sis import SisConfig, _probs, _replacement, backselect, find_sis
from .smallnet import Classifier
from .subsets import SubsetDataset, materialize

__all__ = [
    "DropStats",
    "EnsembleComparison",
    "Heatmap",
    "SizeStats",
    "TransferMatrix",
    "accuracy",
    "confidence_drop",
    "ensemble_sis_comparison",
    "heatmap",
    "mean_ci",
    "render_heatmap",
    "sis_size_curves",
    "transfer_matrix",
    "welch_ci",
    "write_drop_csv",
    "write_size_curves_csv",
    "write_transfer_csv",
]


def _z(level: float) -> float:
    return NormalDist().inv_cdf(0.5 + level / 2)


def mean_ci(a, level: float = 0.95) -> tuple[float, float]:
    """Sample mean and normal-approximation CI half-width (ddof=1)."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return math.nan, math.nan
    if a.size < 2:
        return float(a.mean()), math.nan
    return float(a.mean()), _z(level) * float(a.std(ddof=1)) / math.sqrt(a.size)


def welch_ci(a, b, level: float = 0.95) -> tuple[float, float]:
    """Difference ``mean(a) - mean(b)`` and its Welch CI half-width.

    ``z * sqrt(s_a^2/n_a + s_b^2/n_b)`` with unbiased sample variances.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return math.nan, math.nan
    diff = float(a.mean() - b.mean())
    if a.size < 2 or b.size < 2:
        return diff, math.nan
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    return diff, _z(level) * se


def accuracy(model: Classifier, batch: ImageBatch) -> float:
    """Top-1 accuracy in percent against the batch's true labels."""
    if batch.labels is None:
        raise ValueError("accuracy needs labels")
    return 100.0 * float(np.mean(model.predict(batch.images) == batch.labels))


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Heatmap:
    """Per-pixel containment counts; ``frequency = counts / count``."""

    counts: np.ndarray
    count: int
    mean_confidence: Optional[float] = None

    @property
    def frequency(self) -> np.ndarray:
        return self.counts / self.count

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape


def _bits(m) -> np.ndarray:
    return m.bits if isinstance(m, Mask) else np.asarray(m, dtype=bool)


def heatmap(masks, mean_confidence: Optional[float] = None) -> Heatmap:
    """Fraction of masks containing each pixel.

    ``masks`` is a list of :class:`Mask` / boolean grids or an ``(N, H, W)``
    array. Integer counts are kept alongside, so the mass identity
    ``sum(counts) == total retained pixels`` holds exactly.
    """
    if isinstance(masks, np.ndarray) and masks.ndim == 3:
        stack = masks.astype(bool)
    else:
        masks = list(masks)
        if not masks:
            raise ValueError("heatmap needs at least one mask")
        shapes = {_bits(m).shape for m in masks}
        if len(shapes) != 1:
            raise ValueError(f"masks have inconsistent shapes {sorted(shapes)}")
        stack = np.stack([_bits(m) for m in masks])
    if stack.shape[0] == 0:
        raise ValueError("heatmap needs at least one mask")
    counts = stack.sum(axis=0, dtype=np.int64)
    counts.setflags(write=False)
    return Heatmap(counts, int(stack.shape[0]), mean_confidence)


def render_heatmap(h: Heatmap, path) -> tuple[Path, Path]:
    """Write ``<path>.pgm`` (binary 8-bit graymap) and ``<path>.csv``.

    Gray level is ``floor(255 * f + 0.5)``. The CSV holds each frequency
    with ``repr`` precision so it reads back exactly.
    """
    path = Path(path)
    pgm, csv_path = path.with_suffix(".pgm"), path.with_suffix(".csv")
    f = h.frequency
    gray = np.floor(255.0 * f + 0.5).astype(np.uint8)
    rows, cols = gray.shape
    with open(pgm, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for row in f:
            wr.writerow([repr(float(v)) for v in row])
    return pgm, csv_path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# confidence drop and transfer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DropStats:
    mean: float
    std: float
    drops: np.ndarray


def confidence_drop(
    model: Classifier, originals: ImageBatch, subsets: SubsetDataset, strategy: MaskingStrategy = MaskingStrategy()
) -> DropStats:
    """Predicted-class confidence on full images minus that on their subsets.

    The class is the prediction on the full image. ``std`` is the population
    standard deviation. A negative mean means subsets are more confident.
    """
    masked = materialize(subsets, originals, strategy)
    full = model.predict_proba(originals.images)
    c = full.argmax(axis=1)
    sub = model.predict_proba(masked.images)
    idx = np.arange(len(c))
    drops = full[idx, c] - sub[idx, c]
    return DropStats(float(drops.mean()), float(drops.std()), drops)


@dataclass(frozen=True)
class TransferMatrix:
    """``accuracy[i, j]``: model ``j`` on subsets built from model ``i`` (percent)."""

    accuracy: np.ndarray
    labels: tuple

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.accuracy)


def transfer_matrix(
    models: Sequence[Classifier],
    subsets: Sequence[SubsetDataset],
    source: ImageBatch,
    strategy: MaskingStrategy = MaskingStrategy(),
    labels: Optional[Sequence[str]] = None,
) -> TransferMatrix:
    if len(models) != len(subsets):
        raise ValueError("need one subset dataset per model")
    shapes = {(m.input_shape, m.num_classes) for m in models}
    if len(shapes) != 1:
        raise ValueError("all models must share input shape and class count")
    m = len(models)
    acc = np.zeros((m, m))
    for i, s in enumerate(subsets):
        batch = materialize(s, source, strategy)
        for j, model in enumerate(models):
            acc[i, j] = accuracy(model, batch)
    names = tuple(labels) if labels is not None else tuple(f"model{i}" for i in range(m))
    acc.setflags(write=False)
    return TransferMatrix(acc, names)


# ---------------------------------------------------------------------------
# SIS size curves
# ---------------------------------------------------------------------------


@dataclass
class SizeStats:
    """SIS size (fraction of pixels) as a function of threshold.

    Array fields are indexed like ``thresholds``. ``sizes[t]`` holds per-image
    sizes with NaN for images below that threshold.
    """

    thresholds: np.ndarray
    count: np.ndarray
    mean: np.ndarray
    ci: np.ndarray
    empty: np.ndarray
    count_correct: np.ndarray
    count_incorrect: np.ndarray
    mean_correct: np.ndarray
    mean_incorrect: np.ndarray
    diff: np.ndarray
    diff_ci: np.ndarray
    pct_increase: np.ndarray
    pct_ci: np.ndarray
    conf_correct: np.ndarray
    conf_incorrect: np.ndarray
    sizes: np.ndarray = field(repr=False, default=None)


def per_image_sis_sizes(model: Classifier, images: np.ndarray, thresholds, config: SisConfig):
    """Size fraction of each image's SIS at each threshold from one ranking.

    Returns ``(sizes, pred, conf)`` with ``sizes`` of shape
    ``(len(thresholds), N)`` and NaN where the image's confidence is below
    the threshold. The ranking is computed once per qualifying image, so the
    sizes of an image are non-decreasing in the threshold.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    n = len(images)
    sizes = np.full((len(thresholds), n), np.nan)
    pred = np.zeros(n, dtype=np.int64)
    conf = np.zeros(n)
    for i, image in enumerate(images):
        p = _probs(model, image, np.zeros(image.shape[:2], dtype=bool), _replacement(config, image))
        pred[i], conf[i] = int(np.argmax(p)), float(p.max())
        todo = np.flatnonzero(conf[i] >= thresholds)
        if todo.size == 0:
            continue
        ranking = backselect(model, image, None, config, int(pred[i]), i)
        for t in todo:
            res = find_sis(model, image, config, ranking, threshold=float(thresholds[t]))
            sizes[t, i] = res.size_fraction
    return sizes, pred, conf


def sis_size_curves(
    model: Classifier, batch: ImageBatch, thresholds: Sequence[float], config: SisConfig = SisConfig(), level: float = 0.95
) -> SizeStats:
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("threshold grid must be sorted ascending")
    if batch.labels is None:
        raise ValueError("size curves need true labels")
    sizes, pred, conf = per_image_sis_sizes(model, batch.images, thresholds, config)
    correct = pred == batch.labels
    T = len(thresholds)
    out = {k: np.full(T, np.nan) for k in (
        "mean", "ci", "mean_correct", "mean_incorrect", "diff", "diff_ci",
        "pct_increase", "pct_ci", "conf_correct", "conf_incorrect")}
    count, nc, ni = (np.zeros(T, dtype=np.int64) for _ in range(3))
    for t in range(T):
        have = ~np.isnan(sizes[t])
        s = sizes[t, have]
        count[t] = s.size
        out["mean"][t], out["ci"][t] = mean_ci(s, level)
        sc, si = sizes[t, have & correct], sizes[t, have & ~correct]
        nc[t], ni[t] = sc.size, si.size
        if sc.size:
            out["mean_correct"][t] = sc.mean()
            out["conf_correct"][t] = conf[have & correct].mean()
        if si.size:
            out["mean_incorrect"][t] = si.mean()
            out["conf_incorrect"][t] = conf[have & ~correct].mean()
        d, h = welch_ci(sc, si, level)
        out["diff"][t], out["diff_ci"][t] = d, h
        base = out["mean_incorrect"][t]
        if si.size and base > 0:
            out["pct_increase"][t] = 100.0 * d / base
            out["pct_ci"][t] = 100.0 * h / base
    return SizeStats(thresholds, count, out["mean"], out["ci"], count == 0, nc, ni,
                     out["mean_correct"], out["mean_incorrect"], out["diff"], out["diff_ci"],
                     out["pct_increase"], out["pct_ci"], out["conf_correct"], out["conf_incorrect"], sizes)


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleComparison:
    threshold: float
    ensemble_size: float
    ensemble_size_ci: float
    member_sizes: tuple
    member_size_mean: float
    diff: float
    diff_ci: float
    ensemble_accuracy: float
    ensemble_accuracy_ci: float
    member_accuracies: tuple
    member_accuracy_mean: float
    member_accuracy_ci: float


def _acc_ci(model, batch, z):
    hits = (model.predict(batch.images) == batch.labels).astype(np.float64)
    return 100.0 * hits.mean(), 100.0 * z * math.sqrt(hits.mean() * (1 - hits.mean()) / hits.size)


def ensemble_sis_comparison(
    ensemble: Classifier,
    members: Sequence[Classifier],
    batch: ImageBatch,
    threshold: float = 0.99,
    config: SisConfig = SisConfig(),
    level: float = 0.95,
) -> EnsembleComparison:
    """Mean SIS size of an ensemble against the mean of member mean sizes.

    Each model is summarized over the images it classifies with confidence at
    least ``threshold``. The difference's half-width combines the ensemble's
    standard error with the members' as ``sqrt(se_e^2 + sum(se_i^2) / m^2)``,
    treating the samples as independent. Accuracies (percent) come with
    binomial normal-approximation intervals.
    """
    z = _z(level)

    def summary(model):
        s = per_image_sis_sizes(model, batch.images, [threshold], config)[0][0]
        s = s[~np.isnan(s)]
        if s.size == 0:
            return math.nan, math.nan
        se = float(s.std(ddof=1)) / math.sqrt(s.size) if s.size > 1 else 0.0
        return float(s.mean()), se

    e_mean, e_se = summary(ensemble)
    ms = [summary(m) for m in members]
    m = len(ms)
    member_mean = float(np.mean([a for a, _ in ms]))
    diff_se = math.sqrt(e_se ** 2 + sum(se ** 2 for _, se in ms) / m ** 2)
    e_acc, e_acc_ci = _acc_ci(ensemble, batch, z)
    accs = [_acc_ci(mm, batch, z) for mm in members]
    acc_mean = float(np.mean([a for a, _ in accs]))
    acc_ci = math.sqrt(sum(h ** 2 for _, h in accs)) / m
    return EnsembleComparison(
        threshold, e_mean, z * e_se, tuple(a for a, _ in ms), member_mean,
        e_mean - member_mean, z * diff_se, e_acc, e_acc_ci, tuple(a for a, _ in accs), acc_mean, acc_ci,
    )


# ---------------------------------------------------------------------------
# CSV writers
# ---------------------------------------------------------------------------

SIZE_CURVE_COLUMNS = [
    "tau", "n", "mean_size", "ci_half", "empty",
    "n_correct", "n_incorrect", "mean_size_correct", "mean_size_incorrect",
    "diff", "diff_ci_half", "pct_increase", "pct_ci_half", "mean_conf_correct", "mean_conf_incorrect",
]
DROP_COLUMNS = ["image_id", "drop"]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_size_curves_csv(stats: SizeStats, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SIZE_CURVE_COLUMNS)
        for t in range(len(stats.thresholds)):
            wr.writerow([_fmt(v) for v in (
                stats.thresholds[t], int(stats.count[t]), stats.mean[t], stats.ci[t], int(stats.empty[t]),
                int(stats.count_correct[t]), int(stats.count_incorrect[t]), stats.mean_correct[t],
                stats.mean_incorrect[t], stats.diff[t], stats.diff_ci[t], stats.pct_increase[t],
                stats.pct_ci[t], stats.conf_correct[t], stats.conf_incorrect[t])])


def write_transfer_csv(tm: TransferMatrix, path) -> None:
    """Header row of evaluating models; first column names the subset source."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["source"] + list(tm.labels))
        for name, row in zip(tm.labels, tm.accuracy):
            wr.writerow([name] + [_fmt(v) for v in row])


def write_drop_csv(stats: DropStats, path) -> None:
    """Per-image drops followed by ``mean`` and ``std`` summary rows."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(DROP_COLUMNS)
        for i, d in enumerate(stats.drops):
            wr.writerow([i, _fmt(d)])
        wr.writerow(["mean", _fmt(stats.mean)])
        wr.writerow(["std", _fmt(stats.std)])
