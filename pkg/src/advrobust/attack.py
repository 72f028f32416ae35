"""Fast Gradient Sign Method.

``x_adv = clip(x + eps * sign(grad_x J(theta, x, y)))`` with ``sign(0) = 0``.
The attack is untargeted: it raises the loss of each sample's true label.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import serialize
from .data import Dataset, one_hot
from .model import Model, forward, predict
from .tensor import Graph, Tensor, backward
from .train import cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    clip: Optional[tuple[float, float]] = (0.0, 1.0)

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.clip is not None and not self.clip[0] < self.clip[1]:
            raise ValueError(f"clip range must satisfy lo < hi, got {self.clip}")

    @classmethod
    def for_data(cls, epsilon: float, data: Dataset, clip: bool = True) -> "AttackConfig":
        """Clip to the dataset's valid pixel range (none for standardized data)."""
        return cls(epsilon, data.normalization.valid_range() if clip else None)


@dataclass
class AdvBatch:
    x_adv: np.ndarray
    ids: np.ndarray
    flipped: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def input_gradient(model: Model, x: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input batch (inference mode)."""
    with Graph() as g:
        xi = g.input(x)
        loss = cross_entropy(forward(model, xi, training=False), onehot)
    return backward(g, loss, want_input_grad=True).by_input


def perturb(x: np.ndarray, grad: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Apply one signed-gradient step of size ``cfg.epsilon``.

    Elements with zero gradient (or epsilon 0) are returned bit-exactly.
    """
    if cfg.epsilon == 0:
        return np.array(x, copy=True)
    step = np.sign(grad).astype(x.dtype) * x.dtype.type(cfg.epsilon)
    out = x + step
    if cfg.clip is not None:
        lo, hi = cfg.clip
        if x.size and (x.min() < lo or x.max() > hi):
            log.warning("input values fall outside the clip range %s; was the input normalized?", cfg.clip)
        out = np.clip(out, lo, hi)
        # never move a pixel further than epsilon, even if it started out of range
        out = np.clip(out, x - x.dtype.type(cfg.epsilon), x + x.dtype.type(cfg.epsilon))
    out = np.where(step == 0, x, out)
    return _within_epsilon(x, out, cfg.epsilon)


def _within_epsilon(x: np.ndarray, out: np.ndarray, eps: float) -> np.ndarray:
    # x + eps rounds to the nearest float and can overshoot eps slightly; round toward x instead
    x64 = x.astype(np.float64)
    over = np.abs(out - x64) > eps
    if over.any():
        out[over] = (x64[over] + np.sign(out[over] - x64[over]) * eps).astype(out.dtype)
        still = np.abs(out - x64) > eps
        out[still] = np.nextafter(out[still], x[still])
    return out


def _check_batch(model: Model, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1:] != model.config.input_shape:
        raise ValueError(f"input shape {x.shape} does not match model input {model.config.input_shape}")


def fgsm_example(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    """Adversarial version of a single (1,C,H,W) sample with one-hot label ``y``."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float32).reshape(1, -1)
    _check_batch(model, x)
    if x.shape[0] != 1:
        raise ValueError("fgsm_example takes a single sample; use fgsm_batch for batches")
    if cfg.epsilon == 0:
        return x.copy()
    return perturb(x, input_gradient(model, x, y), cfg)


def fgsm_images(model: Model, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """FGSM on a batch of images with integer labels.

    Samples do not interact in inference mode, so the batched gradient of
    the mean loss has the same sign pattern as per-sample gradients.
    """
    _check_batch(model, images)
    if cfg.epsilon == 0:
        return np.array(images, dtype=np.float32, copy=True)
    grad = input_gradient(model, images, one_hot(labels, model.num_classes))
    return perturb(images, grad, cfg)


def fgsm_batch(model: Model, data: Dataset, cfg: AttackConfig, batch_size: int = 256) -> AdvBatch:
    """Attack every sample of ``data`` against its own true label."""
    _check_batch(model, data.images)
    chunks = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        chunks.append(fgsm_images(model, data.images[sl], data.labels[sl], cfg))
    x_adv = np.concatenate(chunks) if chunks else np.zeros_like(data.images)
    clean_pred = predict(model, data.images)
    adv_pred = predict(model, x_adv)
    return AdvBatch(x_adv, np.arange(len(data)), clean_pred != adv_pred, clean_pred, adv_pred)


def adversarial_accuracy(model: Model, data: Dataset, cfg: AttackConfig, batch_size: int = 256) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        adv = fgsm_images(model, data.images[sl], data.labels[sl], cfg)
        correct += int((predict(model, adv) == data.labels[sl]).sum())
    return correct / len(data)


def epsilon_sweep(model: Model, data: Dataset, epsilons: Sequence[float],
                  clip: Optional[tuple[float, float]] = (0.0, 1.0)) -> list[tuple[float, float]]:
    """Accuracy under FGSM for each epsilon, as ``[(eps, accuracy), ...]``."""
    if len(epsilons) == 0:
        raise ValueError("epsilon list is empty")
    if any(not e >= 0 for e in epsilons):
        raise ValueError("epsilons must be non-negative")
    return [(float(e), adversarial_accuracy(model, data, AttackConfig(float(e), clip))) for e in epsilons]


def save_adversarial(path, batch: AdvBatch, epsilon: float, labels: np.ndarray) -> None:
    """Export an attacked set in the model-file tensor block format."""
    header = {"kind": "adversarial_batch", "epsilon": float(epsilon), "n": len(batch)}
    serialize.write_tensor_file(path, header, {
        "x_adv": batch.x_adv,
        "labels": np.asarray(labels, dtype=np.float32),
        "ids": batch.ids.astype(np.float32),
    })


def load_adversarial(path) -> tuple[dict, dict[str, np.ndarray]]:
    header, tensors = serialize.read_tensor_file(path)
    if header.get("kind") != "adversarial_batch":
        raise serialize.FormatError(f"{path}: not an adversarial batch file")
    return header, tensors
