"""Small differentiable classifiers: softmax regression, MLPs, and ensembles.

All computation is float64. A classifier maps ``(N, H, W, C)`` images to
``(N, K)`` logits; probabilities are the softmax of the logits. The SIS code
only relies on the :class:`Classifier` interface, so any model exposing it
(including non-differentiable wrappers around plain callables) can be
explained with exact backward selection.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import ImageBatch, NormalizationStats, augment
from .masking import MaskingStrategy, apply_mask

__all__ = [
    "CheckpointError",
    "CallableClassifier",
    "Classifier",
    "ConstantClassifier",
    "EnsembleClassifier",
    "NotDifferentiableError",
    "SmallNet",
    "TrainConfig",
    "TrainingDivergedError",
    "confidence_grad_wrt_mask",
    "ensemble_predict",
    "load_checkpoint",
    "predict_proba",
    "save_checkpoint",
    "softmax",
    "train",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SISNET01"


class NotDifferentiableError(TypeError):
    """Raised when a gradient is requested from a model that has none."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}, learning rate {lr}")
        self.epoch, self.batch, self.lr, self.loss = epoch, batch, lr, loss


class CheckpointError(ValueError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_images(model: "Classifier", x) -> tuple[np.ndarray, bool]:
    if isinstance(x, ImageBatch):
        x = x.images
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ValueError(f"input shape {x.shape[1:] if x.ndim == 4 else x.shape} does not match model input shape {tuple(model.input_shape)}")
    return x, single


class Classifier:
    """Base class. Subclasses implement :meth:`_logits` on a checked 4-D batch.

    Differentiable subclasses set ``differentiable = True`` and implement
    :meth:`logit_vjp`.
    """

    differentiable = False

    def __init__(self, input_shape: Sequence[int], num_classes: int):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)

    # evaluation -----------------------------------------------------------
    def _logits(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def logits(self, x) -> np.ndarray:
        x, single = _as_images(self, x)
        z = self._logits(x)
        return z[0] if single else z

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def candidate_logits(self, image: np.ndarray, pixels: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        """Logits of ``len(pixels)`` variants of one image.

        Variant ``i`` adds ``deltas[i]`` (one value per channel) to pixel
        ``pixels[i]`` (row-major index). The default builds every variant;
        subclasses may do better.
        """
        h, w, c = self.input_shape
        out = np.empty((len(pixels), self.num_classes))
        step = max(1, 4096 // max(1, h * w * c // 256))
        for s in range(0, len(pixels), step):
            px = pixels[s:s + step]
            imgs = np.repeat(image.reshape(1, h * w, c), len(px), axis=0)
            imgs[np.arange(len(px)), px] += deltas[s:s + step]
            out[s:s + step] = self._logits(imgs.reshape(-1, h, w, c))
        return out

    # gradients -------------------------------------------------------------
    def logit_vjp(self, image: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Gradient of ``v . logits(image)`` with respect to the image."""
        raise NotDifferentiableError(
            f"{type(self).__name__} is not differentiable; use exact backward selection (mode='exact')"
        )

    def input_gradient(self, image: np.ndarray, target: int) -> np.ndarray:
        """Gradient of the softmax probability of ``target`` w.r.t. one image."""
        if not self.differentiable:
            self.logit_vjp(image, None)
        image, _ = _as_images(self, image)
        p = softmax(self._logits(image))[0]
        v = -p[target] * p
        v[target] += p[target]
        return self.logit_vjp(image[0], v)


class SmallNet(Classifier):
    """Fully connected network; no hidden layers means softmax regression.

    Parameters are stored as ``(W, b)`` pairs with ``W`` of shape
    ``(fan_in, fan_out)``; inputs are flattened row-major over ``(H, W, C)``.
    """

    differentiable = True
    NONLINEARITIES = ("relu", "tanh")

    def __init__(self, input_shape, num_classes, hidden=(), nonlinearity="relu", params=None, init="uniform", seed=0):
        super().__init__(input_shape, num_classes)
        if nonlinearity not in self.NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        self.hidden = tuple(int(h) for h in hidden)
        self.nonlinearity = nonlinearity
        sizes = self.layer_sizes
        if params is None:
            rng = np.random.default_rng(seed)
            params = []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                if init == "zeros":
                    params.append((np.zeros((fan_in, fan_out)), np.zeros(fan_out)))
                elif init == "uniform":
                    bound = 1.0 / np.sqrt(fan_in)
                    params.append((rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)))
                else:
                    raise ValueError(f"unknown init {init!r}")
        params = [(np.array(W, dtype=np.float64), np.array(b, dtype=np.float64)) for W, b in params]
        if [W.shape for W, _ in params] != list(zip(sizes[:-1], sizes[1:])):
            raise ValueError("parameter shapes do not match the architecture")
        self.params = params
        self._set_writeable(False)

    def _set_writeable(self, flag: bool) -> None:
        for W, b in self.params:
            W.setflags(write=flag)
            b.setflags(write=flag)
        h, w, c = self.input_shape
        self._w0 = self.params[0][0].reshape(h * w, c, -1)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (int(np.prod(self.input_shape)),) + self.hidden + (self.num_classes,)

    @property
    def architecture(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "nonlinearity": self.nonlinearity,
        }

    @property
    def model_id(self) -> str:
        if getattr(self, "_model_id", None) is None or self.params[0][0].flags.writeable:
            self._model_id = self.fingerprint()
        return self._model_id

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.architecture, sort_keys=True).encode())
        for W, b in self.params:
            h.update(W.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()[:16]

    def _act(self, z):
        return np.maximum(z, 0.0) if self.nonlinearity == "relu" else np.tanh(z)

    def _dact(self, z, a):
        return (z > 0).astype(np.float64) if self.nonlinearity == "relu" else 1.0 - a * a

    def _from_first(self, z: np.ndarray) -> np.ndarray:
        for W, b in self.params[1:]:
            z = self._act(z) @ W + b
        return z

    def _logits(self, x):
        W, b = self.params[0]
        return self._from_first(x.reshape(x.shape[0], -1) @ W + b)

    def candidate_logits(self, image, pixels, deltas):
        W, b = self.params[0]
        z0 = image.reshape(-1) @ W + b
        z = z0 + np.einsum("mc,mch->mh", deltas, self._w0[pixels])
        return self._from_first(z)

    def _forward_cache(self, x2d):
        acts, pre = [x2d], []
        a = x2d
        for i, (W, b) in enumerate(self.params):
            z = a @ W + b
            pre.append(z)
            a = self._act(z) if i < len(self.params) - 1 else z
            acts.append(a)
        return pre, acts

    def _backward(self, pre, acts, dz):
        """Backpropagate ``dz`` (gradient at the logits) to all params and input."""
        grads = [None] * len(self.params)
        for i in range(len(self.params) - 1, -1, -1):
            W, _ = self.params[i]
            grads[i] = (acts[i].T @ dz, dz.sum(axis=0))
            dx = dz @ W.T
            if i > 0:
                dz = dx * self._dact(pre[i - 1], acts[i])
        return grads, dx

    def logit_vjp(self, image, v):
        x = np.asarray(image, dtype=np.float64).reshape(1, -1)
        pre, acts = self._forward_cache(x)
        _, dx = self._backward(pre, acts, np.asarray(v, dtype=np.float64).reshape(1, -1))
        return dx.reshape(self.input_shape)

    def loss_and_grads(self, x, y, weight_decay=0.0):
        """Mean cross-entropy over the batch and its parameter gradients."""
        n = x.shape[0]
        pre, acts = self._forward_cache(x.reshape(n, -1))
        z = acts[-1]
        zmax = z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        loss = float(np.mean(logsum - z[np.arange(n), y]))
        p = softmax(z)
        p[np.arange(n), y] -= 1.0
        grads, _ = self._backward(pre, acts, p / n)
        if weight_decay:
            grads = [(gW + weight_decay * W, gb) for (gW, gb), (W, _) in zip(grads, self.params)]
        return loss, grads


class ConstantClassifier(Classifier):
    """Outputs the same probability vector for every input."""

    differentiable = True

    def __init__(self, input_shape, probs):
        probs = np.asarray(probs, dtype=np.float64)
        super().__init__(input_shape, probs.shape[0])
        self.probs = probs / probs.sum()
        self._z = np.log(self.probs)

    def _logits(self, x):
        return np.broadcast_to(self._z, (x.shape[0], self.num_classes)).copy()

    def candidate_logits(self, image, pixels, deltas):
        return np.broadcast_to(self._z, (len(pixels), self.num_classes)).copy()

    def logit_vjp(self, image, v):
        return np.zeros(self.input_shape)


class CallableClassifier(Classifier):
    """Wraps ``fn(images) -> probabilities``; usable only with exact selection."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], input_shape, num_classes):
        super().__init__(input_shape, num_classes)
        self.fn = fn

    def _logits(self, x):
        p = np.asarray(self.fn(x), dtype=np.float64)
        with np.errstate(divide="ignore"):
            return np.log(p)


class EnsembleClassifier(Classifier):
    """Softmax of the arithmetic mean of the members' logits."""

    def __init__(self, members: Sequence[Classifier]):
        members = list(members)
        if not members:
            raise ValueError("an ensemble needs at least one member")
        first = members[0]
        for m in members[1:]:
            if m.input_shape != first.input_shape or m.num_classes != first.num_classes:
                raise ValueError(
                    f"ensemble members disagree: {m.input_shape}/{m.num_classes} vs {first.input_shape}/{first.num_classes}"
                )
        super().__init__(first.input_shape, first.num_classes)
        self.members = members
        self.differentiable = all(m.differentiable for m in members)

    def _logits(self, x):
        return sum(m._logits(x) for m in self.members) / len(self.members)

    def candidate_logits(self, image, pixels, deltas):
        return sum(m.candidate_logits(image, pixels, deltas) for m in self.members) / len(self.members)

    def logit_vjp(self, image, v):
        if not self.differentiable:
            return super().logit_vjp(image, v)
        return sum(m.logit_vjp(image, v) for m in self.members) / len(self.members)


def predict_proba(model: Classifier, batch) -> np.ndarray:
    """Class probabilities for an :class:`ImageBatch`, a 4-D stack or one image."""
    return model.predict_proba(batch)


def ensemble_predict(ensemble: EnsembleClassifier, batch) -> np.ndarray:
    return ensemble.predict_proba(batch)


def confidence_grad_wrt_mask(model: Classifier, image: np.ndarray, mask, target_class: int, replacement) -> np.ndarray:
    """Gradient of the ``target_class`` probability with respect to the mask.

    The masked input is ``x * (1 - M) + r * M``, so each entry is
    ``sum_c (r - x)[i, j, c] * df/dx~[i, j, c]`` at the masked input.
    Returns an ``(H, W)`` grid.
    """
    if not model.differentiable:
        model.logit_vjp(image, None)
    if not 0 <= target_class < model.num_classes:
        raise ValueError(f"target class {target_class} out of range for {model.num_classes} classes")
    image = np.asarray(image, dtype=np.float64)
    if isinstance(replacement, MaskingStrategy):
        replacement = replacement.replacement(image.shape)
    replacement = np.broadcast_to(np.asarray(replacement, dtype=np.float64), image.shape)
    masked = apply_mask(image, mask, replacement)
    g = model.input_gradient(masked, target_class)
    return np.sum((replacement - image) * g, axis=-1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """SGD with Nesterov momentum and step learning-rate decay.

    Defaults follow the reference CIFAR-10 recipe: 200 epochs, batch 128,
    learning rate 0.1 divided by 5 after epochs 60, 120 and 160, momentum
    0.9 and weight decay 5e-4.
    """

    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: tuple[int, ...] = (60, 120, 160)
    decay_factor: float = 5.0
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not self.decay_factor > 1:
            raise ValueError("decay factor must be > 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        steps = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr / self.decay_factor ** steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


def train(
    dataset: ImageBatch,
    config: TrainConfig,
    hidden: Sequence[int] = (512,),
    nonlinearity: str = "relu",
    num_classes: Optional[int] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> SmallNet:
    """Train a :class:`SmallNet` with mini-batch SGD.

    Deterministic given ``config.seed``. The returned model carries the
    per-epoch mean training loss in ``model.history``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.labels is None:
        raise ValueError("training needs labels")
    y = dataset.labels
    k = int(num_classes if num_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    model = SmallNet(dataset.shape, k, hidden, nonlinearity, seed=np.random.default_rng(seeds[0]))
    model._set_writeable(True)
    params = model.params
    velocity = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]
    rng = np.random.default_rng(seeds[1])
    n = len(dataset)
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        x_all = dataset.images
        if config.augment:
            x_all = augment(dataset, int(rng.integers(2**63))).images
        losses = []
        for bi, s in enumerate(range(0, n, config.batch_size)):
            idx = order[s:s + config.batch_size]
            loss, grads = model.loss_and_grads(x_all[idx], y[idx], config.weight_decay)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, bi, lr, loss)
            for p, v, g in zip(params, velocity, grads):
                for j in range(2):
                    v[j] *= config.momentum
                    v[j] += g[j]
                    p[j][...] -= lr * (g[j] + config.momentum * v[j])
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if callback is not None:
            callback(epoch, history[-1])
        log.debug("epoch %d lr %.4g loss %.4f", epoch, lr, history[-1])
    model._set_writeable(False)
    model.history = history
    return model


# ---------------------------------------------------------------------------
# checkpoints: b"SISNET01", uint32 header length, JSON header, then every
# parameter array as little-endian float64 in row-major order.
# ---------------------------------------------------------------------------


def save_checkpoint(model: SmallNet, path, stats: Optional[NormalizationStats] = None, meta: Optional[dict] = None) -> None:
    header = {
        "version": 1,
        "architecture": model.architecture,
        "num_classes": model.num_classes,
        "shapes": [[list(W.shape), list(b.shape)] for W, b in model.params],
        "normalization": None if stats is None else stats.to_dict(),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for W, b in model.params:
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[SmallNet, Optional[NormalizationStats]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    off = 12 + hlen
    params = []
    for wshape, bshape in header["shapes"]:
        arrs = []
        for shape in (wshape, bshape):
            n = int(np.prod(shape))
            chunk = data[off:off + 8 * n]
            if len(chunk) != 8 * n:
                raise CheckpointError(f"{path}: truncated parameters at byte offset {off}")
            arrs.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64))
            off += 8 * n
        params.append(tuple(arrs))
    arch = header["architecture"]
    model = SmallNet(arch["input_shape"], arch["num_classes"], arch["hidden"], arch["nonlinearity"], params=params)
    model.meta = header.get("meta", {})
    stats = header.get("normalization")
    return model, (None if stats is None else NormalizationStats.from_dict(stats))
