"""Sufficient input subsets by backward selection.

Two ways to rank pixels from least to most critical for a fixed class ``c``:

* :func:`backselect_exact` evaluates the class confidence with every
  remaining pixel additionally masked and masks the one whose removal hurts
  least (``k`` at a time when ``k > 1``).
* :func:`backselect_gradient` orders the remaining pixels by the gradient
  of the confidence with respect to the mask and masks the top ``k`` per
  gradient evaluation.

:func:`find_sis` then restores blocks from the top of the ranking until the
confidence reaches the threshold. Masks in a :class:`SisResult` mark SIS
pixels with 1; a collection accumulates the union of found subsets as its
exclusion set.

Ties between equal scores always go to the lowest row-major pixel index.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .masking import Mask, MaskingStrategy, apply_mask, write_masks
from .smallnet import Classifier, confidence_grad_wrt_mask, softmax

__all__ = [
    "EXACT",
    "BATCHED",
    "RemovalRanking",
    "SisCollection",
    "SisConfig",
    "SisResult",
    "backselect",
    "backselect_exact",
    "backselect_gradient",
    "find_sis",
    "sis_batch",
    "sis_collection",
    "write_sis_results",
    "RESULT_COLUMNS",
]

EXACT = "exact"
BATCHED = "batched-gradient"


@dataclass(frozen=True)
class SisConfig:
    threshold: float = 0.99
    k: int = 1
    mode: str = EXACT
    strategy: MaskingStrategy = field(default_factory=MaskingStrategy)
    max_collection: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.k < 1:
            raise ValueError("block size k must be >= 1")
        if self.mode not in (EXACT, BATCHED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_collection is not None and self.max_collection < 1:
            raise ValueError("max_collection must be >= 1")

    @classmethod
    def defaults_for(cls, shape: Sequence[int], **overrides) -> "SisConfig":
        """Exact selection at 0.99 up to 32x32 images; batched k=100 at 0.9 above."""
        h, w = tuple(shape)[:2]
        if h * w <= 32 * 32:
            base = dict(threshold=0.99, k=1, mode=EXACT)
        else:
            base = dict(threshold=0.9, k=100, mode=BATCHED)
        base.update(overrides)
        return cls(**base)


@dataclass
class RemovalRanking:
    """Stack of pixel blocks; ``blocks[0]`` was masked first (least critical)."""

    blocks: list
    shape: tuple
    start_mask: Mask
    target_class: int
    start_confidence: float
    mode: str
    k: int
    forward_evals: int = 0
    gradient_evals: int = 0
    model_id: Optional[str] = None
    image_id: Optional[int] = None

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def num_pixels(self) -> int:
        return int(sum(len(b) for b in self.blocks))

    def order(self) -> np.ndarray:
        """All ranked pixels, least critical first."""
        if not self.blocks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.blocks)


@dataclass
class SisResult:
    target_class: int
    mask: Mask
    confidence: float
    threshold: float
    ranking: RemovalRanking
    forward_evals: int
    last_block: Optional[np.ndarray] = None
    image_id: Optional[int] = None

    @property
    def size(self) -> int:
        return self.mask.count

    @property
    def size_fraction(self) -> float:
        return self.mask.count / self.mask.num_pixels

    @property
    def gradient_evals(self) -> int:
        return self.ranking.gradient_evals


@dataclass
class SisCollection:
    target_class: int
    results: list
    residual_confidence: float

    def __len__(self) -> int:
        return len(self.results)

    def exclusion_mask(self, shape) -> Mask:
        bits = np.zeros(tuple(shape)[:2], dtype=bool)
        for r in self.results:
            bits |= r.mask.bits
        return Mask(bits)


def _replacement(config: SisConfig, image: np.ndarray) -> np.ndarray:
    return np.broadcast_to(config.strategy.replacement(image.shape), image.shape)


def _probs(model: Classifier, image: np.ndarray, masked_bits: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Class probabilities on one image with ``masked_bits`` replaced.

    Every confidence a selection decision or a threshold check depends on
    goes through here, one image at a time, so repeated queries of the same
    masked input agree bit for bit.
    """
    return softmax(model.logits(apply_mask(image, masked_bits, r)[None]))[0]


def _start(model, image, start_mask, config, target_class):
    image = np.asarray(image, dtype=np.float64)
    if tuple(image.shape) != tuple(model.input_shape):
        raise ValueError(f"image shape {image.shape} does not match model input {model.input_shape}")
    h, w = image.shape[:2]
    if start_mask is None:
        start_mask = Mask.empty((h, w))
    elif not isinstance(start_mask, Mask):
        start_mask = Mask(start_mask)
    if start_mask.shape != (h, w):
        raise ValueError(f"start mask shape {start_mask.shape} does not match image {(h, w)}")
    r = _replacement(config, image)
    p = _probs(model, image, start_mask.bits, r)
    c = int(np.argmax(p)) if target_class is None else int(target_class)
    if not 0 <= c < model.num_classes:
        raise ValueError(f"target class {c} out of range")
    return image, start_mask, r, c, float(p[c])


def _top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` largest values, descending, ties to lowest position."""
    n = values.shape[0]
    if k >= n:
        return np.argsort(-values, kind="stable")
    thr = np.partition(values, n - k)[n - k]
    above = np.flatnonzero(values > thr)
    ties = np.flatnonzero(values == thr)[: k - above.size]
    sel = np.concatenate([above, ties])
    return sel[np.lexsort((sel, -values[sel]))]


def backselect_exact(
    model: Classifier,
    image: np.ndarray,
    start_mask=None,
    config: SisConfig = SisConfig(),
    target_class: Optional[int] = None,
    image_id: Optional[int] = None,
) -> RemovalRanking:
    """Greedy backward selection by direct confidence evaluation.

    Each iteration scores every still-unmasked pixel by the class confidence
    with that pixel additionally masked, then masks the ``k`` best-scoring
    pixels (the removals that decrease confidence least).
    """
    image, start_mask, r, c, conf0 = _start(model, image, start_mask, config, target_class)
    h, w, ch = image.shape
    cur = apply_mask(image, start_mask.bits, r)
    cur_flat = cur.reshape(h * w, ch)
    r_flat = r.reshape(h * w, ch)
    remaining = np.flatnonzero(~start_mask.bits.reshape(-1))
    blocks = []
    evals = 1
    while remaining.size:
        deltas = r_flat[remaining] - cur_flat[remaining]
        scores = softmax(model.candidate_logits(cur, remaining, deltas))[:, c]
        evals += remaining.size
        kk = min(config.k, remaining.size)
        pick = np.array([int(np.argmax(scores))]) if kk == 1 else np.argsort(-scores, kind="stable")[:kk]
        block = remaining[pick]
        cur_flat[block] = r_flat[block]
        blocks.append(block)
        remaining = np.delete(remaining, pick)
    return RemovalRanking(
        blocks, (h, w), start_mask, c, conf0, EXACT, config.k,
        forward_evals=evals, model_id=getattr(model, "model_id", None), image_id=image_id,
    )


def backselect_gradient(
    model: Classifier,
    image: np.ndarray,
    start_mask=None,
    config: SisConfig = SisConfig(mode=BATCHED, k=100),
    target_class: Optional[int] = None,
    image_id: Optional[int] = None,
) -> RemovalRanking:
    """Batched gradient backward selection.

    One gradient of the class confidence with respect to the mask per
    iteration; the ``k`` unmasked pixels with the largest entries are masked
    together. The last block may hold fewer than ``k`` pixels.
    """
    if not model.differentiable:
        model.logit_vjp(image, None)
    image, start_mask, r, c, conf0 = _start(model, image, start_mask, config, target_class)
    h, w, _ = image.shape
    bits = start_mask.bits.reshape(-1).copy()
    remaining = np.flatnonzero(~bits)
    blocks = []
    grads = 0
    while remaining.size:
        g = confidence_grad_wrt_mask(model, image, bits.reshape(h, w), c, r).reshape(-1)
        grads += 1
        pick = _top_k(g[remaining], min(config.k, remaining.size))
        block = remaining[pick]
        bits[block] = True
        blocks.append(block)
        remaining = np.delete(remaining, pick)
    return RemovalRanking(
        blocks, (h, w), start_mask, c, conf0, BATCHED, config.k,
        forward_evals=1, gradient_evals=grads,
        model_id=getattr(model, "model_id", None), image_id=image_id,
    )


def backselect(model, image, start_mask=None, config: SisConfig = SisConfig(), target_class=None, image_id=None) -> RemovalRanking:
    fn = backselect_exact if config.mode == EXACT else backselect_gradient
    return fn(model, image, start_mask, config, target_class, image_id)


def find_sis(
    model: Classifier,
    image: np.ndarray,
    config: SisConfig,
    ranking: RemovalRanking,
    threshold: Optional[float] = None,
) -> Optional[SisResult]:
    """Restore ranked blocks, most critical first, until confidence >= threshold.

    Starts from every ranked pixel masked. Returns ``None`` when even the
    fully restored ranking stays below the threshold. The confidence of the
    fully restored state is the ranking's start confidence, so it is never
    re-evaluated.
    """
    image = np.asarray(image, dtype=np.float64)
    if tuple(image.shape[:2]) != tuple(ranking.shape):
        raise ValueError(f"ranking shape {ranking.shape} does not match image {image.shape[:2]}")
    tau = config.threshold if threshold is None else threshold
    r = _replacement(config, image)
    c = ranking.target_class
    n = len(ranking.blocks)
    bits = np.ones(image.shape[0] * image.shape[1], dtype=bool)
    evals = 0

    def confidence(j):
        nonlocal evals
        if j == n:
            return ranking.start_confidence
        evals += 1
        return float(_probs(model, image, bits.reshape(ranking.shape), r)[c])

    j = 0
    conf = confidence(0)
    while conf < tau and j < n:
        bits[ranking.blocks[n - 1 - j]] = False
        j += 1
        conf = confidence(j)
    if conf < tau:
        return None
    sis = np.zeros_like(bits)
    for b in ranking.blocks[n - j:]:
        sis[b] = True
    return SisResult(
        c, Mask(sis.reshape(ranking.shape)), conf, tau, ranking, evals,
        last_block=ranking.blocks[n - j] if j else None, image_id=ranking.image_id,
    )


def sis_collection(model: Classifier, image: np.ndarray, config: SisConfig, image_id: Optional[int] = None) -> SisCollection:
    """Disjoint SIS for one image until the remaining pixels fall below threshold.

    The class is the prediction on the unmasked image and stays fixed. An
    empty SIS ends the collection after it is recorded once.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    r = _replacement(config, image)
    excl = np.zeros((h, w), dtype=bool)
    p = _probs(model, image, excl, r)
    c = int(np.argmax(p))
    residual = float(p[c])
    results = []
    while residual >= config.threshold:
        ranking = backselect(model, image, Mask(excl), config, c, image_id)
        res = find_sis(model, image, config, ranking)
        if res is None:
            break
        results.append(res)
        excl |= res.mask.bits
        residual = float(_probs(model, image, excl, r)[c])
        if res.size == 0 or (config.max_collection and len(results) >= config.max_collection):
            break
    return SisCollection(c, results, residual)


def sis_batch(model: Classifier, batch, config: SisConfig, floor: Optional[float] = None) -> list:
    """One SIS per image whose predicted-class confidence reaches ``floor``.

    ``floor`` defaults to the SIS threshold. Skipped images yield ``None`` in
    the returned list, which is aligned with the batch.
    """
    images = getattr(batch, "images", batch)
    floor = config.threshold if floor is None else floor
    out = []
    for i, image in enumerate(images):
        r = _replacement(config, image)
        p = _probs(model, image, np.zeros(image.shape[:2], dtype=bool), r)
        if p.max() < floor:
            out.append(None)
            continue
        ranking = backselect(model, image, None, config, int(np.argmax(p)), i)
        out.append(find_sis(model, image, config, ranking))
    return out


RESULT_COLUMNS = [
    "image_id", "class", "tau", "k", "mode", "size", "confidence",
    "findsis_forward_evals", "ranking_forward_evals", "gradient_evals",
]


def write_sis_results(results, mask_path, csv_path, shape) -> None:
    """Persist results: SIS masks in a SISM container plus a CSV sidecar.

    Row ``i`` of the CSV describes mask ``i`` of the container; ``None``
    entries are dropped.
    """
    kept = [r for r in results if r is not None]
    write_masks(mask_path, [r.mask for r in kept], shape)
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(RESULT_COLUMNS)
        for r in kept:
            wr.writerow([
                r.image_id, r.target_class, repr(r.threshold), r.ranking.k, r.ranking.mode,
                r.size, repr(r.confidence), r.forward_evals, r.ranking.forward_evals, r.gradient_evals,
            ])


def read_sis_table(csv_path) -> list[dict]:
    with open(csv_path, newline="") as fh:
        return list(csv.DictReader(fh))


def exact_eval_bound(p: int) -> int:
    """Forward evaluations allowed for one exact ranking over ``p`` pixels."""
    return p * (p + 1) // 2 + p


def batched_eval_count(p: int, k: int) -> int:
    return math.ceil(p / k)
