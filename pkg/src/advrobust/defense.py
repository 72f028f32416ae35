"""Adversarial training against FGSM.

For every minibatch ``(x, y)``: take the input gradient at the current
parameters, build ``x_adv`` with FGSM, train on ``[x, x_adv]`` with labels
``[y, y]`` using the unweighted mean loss over all 2B rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .attack import AttackConfig, fgsm_images
from .data import Dataset, one_hot
from .model import Model, build_model, forward
from .tensor import Graph, backward
from .train import (
    EpochRecord, StepResult, TrainConfig, TrainHistory, cross_entropy,
    per_sample_cross_entropy, run_epochs,
)


@dataclass
class AdvTrainConfig:
    base: TrainConfig = field(default_factory=TrainConfig)
    epsilon: float = 0.1
    clip: Optional[tuple[float, float]] = (0.0, 1.0)
    from_scratch: bool = True

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")


@dataclass
class MixedBatch:
    """What one adversarial-training step saw; passed to ``on_batch`` hooks."""

    epoch: int
    ids: np.ndarray
    x: np.ndarray
    x_adv: np.ndarray
    x_mix: np.ndarray
    y_mix: np.ndarray
    params_before: dict[str, np.ndarray]


def mix_minibatch(x: np.ndarray, x_adv: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stack clean rows over adversarial rows and duplicate the labels in the same order."""
    x, x_adv, y = np.asarray(x), np.asarray(x_adv), np.asarray(y)
    if x.shape != x_adv.shape:
        raise ValueError(f"clean batch {x.shape} and adversarial batch {x_adv.shape} differ in shape")
    if len(y) != len(x):
        raise ValueError(f"{len(x)} samples but {len(y)} label rows")
    return np.concatenate([x, x_adv]), np.concatenate([y, y])


def make_adversarial_step(cfg: AdvTrainConfig, on_batch: Optional[Callable[[MixedBatch], None]] = None):
    attack = AttackConfig(cfg.epsilon, cfg.clip)

    def step(model: Model, x: np.ndarray, labels: np.ndarray, optimizer, epoch: int,
             ids: np.ndarray) -> StepResult:
        x_adv = fgsm_images(model, x, labels, attack)
        y = one_hot(labels, model.num_classes)
        x_mix, y_mix = mix_minibatch(x, x_adv, y)
        if on_batch is not None:
            on_batch(MixedBatch(epoch, ids, x, x_adv, x_mix, y_mix, model.state()))
        with Graph() as g:
            probs = forward(model, x_mix, training=True)
            loss = cross_entropy(probs, y_mix)
        grads = backward(g, loss, params=model.parameter_list())
        optimizer.step(model.params, grads)

        b = len(labels)
        per_row = per_sample_cross_entropy(probs.data, np.concatenate([labels, labels]))
        correct = int((probs.data.argmax(axis=1) == np.concatenate([labels, labels])).sum())
        return StepResult(loss.item(), correct, 2 * b,
                          clean_loss=float(per_row[:b].mean()), adv_loss=float(per_row[b:].mean()))

    return step


def adversarial_fit(model: Model, data: Dataset, cfg: AdvTrainConfig,
                    on_batch: Optional[Callable[[MixedBatch], None]] = None,
                    on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> tuple[Model, TrainHistory]:
    """Adversarially train on ``data``.

    With ``from_scratch`` the parameters are re-initialized from the model's
    config seed before training; otherwise ``model`` is fine-tuned in place.
    Early stopping watches the loss on the clean validation split.
    """
    if cfg.from_scratch:
        model = build_model(model.config)
    return run_epochs(model, data, cfg.base, make_adversarial_step(cfg, on_batch), on_epoch)
