"""Cross-entropy loss, SGD/Adam, and the shuffled minibatch training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .data import Dataset, one_hot
from .model import Model, forward
from .serialize import atomic_write_bytes
from .tensor import Graph, Gradients, Tensor, backward, record

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def _check_one_hot(onehot: np.ndarray) -> None:
    ok = np.all((onehot == 0) | (onehot == 1), axis=1) & (onehot.sum(axis=1) == 1)
    if not np.all(ok):
        row = int(np.flatnonzero(~ok)[0])
        raise ValueError(f"row {row} of the label matrix is not one-hot")


def cross_entropy(probs: Tensor, onehot) -> Tensor:
    """Mean of ``-log(p_true)`` over rows, with probabilities floored at 1e-12.

    The floor only guards the logarithm; the backward pass divides by the
    actual probability (floored at the dtype's smallest normal) so confident
    mistakes still produce a gradient.
    """
    y = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot)
    if y.shape != probs.shape:
        raise ValueError(f"label shape {y.shape} does not match probabilities {probs.shape}")
    _check_one_hot(y)
    p = probs.data
    dtype = p.dtype
    y = y.astype(dtype)
    n = p.shape[0]
    p_true = (p * y).sum(axis=1)
    loss = -np.log(np.maximum(p_true, dtype.type(PROB_FLOOR))).mean(dtype=dtype)

    def grad_fn(g, needs):
        denom = np.maximum(p, np.finfo(dtype).tiny)
        return (-(g / dtype.type(n)) * y / denom,)

    return record("cross_entropy", (probs,), np.asarray(loss, dtype=dtype), grad_fn)


def per_sample_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p_true = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p_true, PROB_FLOOR))


# --------------------------------------------------------------------------
# optimizers

def _grad_for(grads, name: str) -> np.ndarray:
    try:
        return grads[name]
    except KeyError:
        raise KeyError(f"no gradient for parameter {name!r}") from None


class SGD:
    """Plain gradient descent, ``theta <- theta - lr * g``."""

    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr

    def step(self, params: dict[str, Tensor], grads: Mapping[str, np.ndarray] | Gradients) -> None:
        for name, p in params.items():
            g = _grad_for(grads, name)
            new = p.data - np.float32(self.lr) * g.astype(p.data.dtype)
            params[name] = Tensor._wrap(new, requires_grad=True, name=name)


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: Mapping[str, np.ndarray] | Gradients) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = _grad_for(grads, name).astype(np.float32)
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            params[name] = Tensor._wrap((p.data - update).astype(np.float32), requires_grad=True, name=name)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    seed: int = 0
    patience: int = 5
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("validation fraction must be in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    clean_loss: Optional[float] = None
    adv_loss: Optional[float] = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    @property
    def adversarial(self) -> bool:
        return any(r.adv_loss is not None for r in self.records)

    def to_csv(self, path) -> None:
        fields = list(HISTORY_FIELDS)
        if self.adversarial:
            fields += ["clean_loss", "adv_loss"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in fields[1:]])
        atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def evaluate(model: Model, data: Dataset, batch_size: int = 512) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in inference mode."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        x = data.images[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        probs = forward(model, x, training=False).data
        total_loss += float(per_sample_cross_entropy(probs, y).astype(np.float64).sum())
        correct += int((probs.argmax(axis=1) == y).sum())
    return total_loss / len(data), correct / len(data)


@dataclass
class StepResult:
    loss: float
    correct: int
    count: int
    clean_loss: Optional[float] = None
    adv_loss: Optional[float] = None


# (model, images, labels, optimizer, epoch, sample ids) -> StepResult
StepFn = Callable[[Model, np.ndarray, np.ndarray, object, int, np.ndarray], StepResult]


def plain_step(model: Model, x: np.ndarray, labels: np.ndarray, optimizer, epoch: int,
               ids: np.ndarray) -> StepResult:
    y = one_hot(labels, model.num_classes)
    with Graph() as g:
        probs = forward(model, x, training=True)
        loss = cross_entropy(probs, y)
    grads = backward(g, loss, params=model.parameter_list())
    optimizer.step(model.params, grads)
    correct = int((probs.data.argmax(axis=1) == labels).sum())
    return StepResult(loss.item(), correct, len(labels))


def run_epochs(model: Model, data: Dataset, config: TrainConfig, step: StepFn,
               on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> tuple[Model, TrainHistory]:
    """Epoch loop shared by plain and adversarial training."""
    if len(data) == 0:
        raise ValueError("training set is empty")
    train, val = data.split(config.val_fraction)
    n, bs = len(train), config.batch_size
    if bs > n:
        raise ValueError(f"batch size {bs} exceeds training-set size {n}")
    history = TrainHistory()
    if config.epochs == 0:
        return model, history

    optimizer = make_optimizer(config.optimizer, config.lr)
    best_loss, best_state, stale = math.inf, None, 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        model.reset_dropout_rng(epoch)
        loss_sum = clean_sum = adv_sum = 0.0
        correct = seen = 0
        adversarial = False
        nbatches = n // bs
        for b in range(nbatches):
            idx = order[b * bs:(b + 1) * bs]
            res = step(model, train.images[idx], train.labels[idx], optimizer, epoch, idx)
            loss_sum += res.loss
            correct += res.correct
            seen += res.count
            if res.adv_loss is not None:
                adversarial = True
                clean_sum += res.clean_loss
                adv_sum += res.adv_loss
        val_loss, val_acc = evaluate(model, val) if len(val) else (math.nan, math.nan)
        rec = EpochRecord(epoch + 1, loss_sum / nbatches, correct / seen, val_loss, val_acc)
        if adversarial:
            rec.clean_loss, rec.adv_loss = clean_sum / nbatches, adv_sum / nbatches
        history.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                 rec.epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc)

        if len(val):
            if val_loss < best_loss:
                best_loss, best_state, stale = val_loss, model.state(), 0
                history.best_epoch = epoch + 1
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    history.stopped_early = True
                    break
    if best_state is not None:
        model.load_state(best_state)
    return model, history


def fit(model: Model, data: Dataset, config: TrainConfig,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> tuple[Model, TrainHistory]:
    """Train ``model`` in place on ``data`` (normalized, integer labels).

    Each epoch shuffles with a generator seeded by ``(seed, epoch)`` and runs
    ``floor(n / B)`` full batches; the remainder is dropped.  When a
    validation split exists the parameters with the lowest validation loss
    are restored at the end.
    """
    return run_epochs(model, data, config, plain_step, on_epoch)
