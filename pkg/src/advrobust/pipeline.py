"""Dataset selection and the train -> attack -> defend -> re-attack pipeline."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (
    CIFAR10_CLASSES, FASHION_CLASSES, MNIST_CLASSES, Dataset, Normalization,
    apply_normalization, load_cifar10_bin, load_mnist_dir, normalize, synth_dataset,
)
from .defense import AdvTrainConfig, adversarial_fit
from .model import Model, build_model, default_config
from .report import RobustnessReport, accuracy, robustness_report
from .train import TrainConfig, TrainHistory, fit

log = logging.getLogger(__name__)

DATASETS = ("mnist", "fashion-mnist", "cifar10", "synth")


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 2000
    n_test: int = 1000
    channels: int = 1
    size: int = 16
    classes: int = 4
    separation: float = 2.0
    seed: int = 0


def class_names(name: str, k: int):
    return {"mnist": MNIST_CLASSES, "fashion-mnist": FASHION_CLASSES,
            "cifar10": CIFAR10_CLASSES}.get(name, tuple(str(i) for i in range(k)))


def load_raw(name: str, data_dir=None, split: str = "train", synth: SynthSpec = SynthSpec()) -> Dataset:
    """Unnormalized split of a named dataset."""
    if name == "synth":
        full = synth_dataset(synth.n_train + synth.n_test, synth.channels, synth.size, synth.size,
                             synth.classes, synth.separation, synth.seed)
        part = slice(0, synth.n_train) if split == "train" else slice(synth.n_train, len(full))
        return full.take(part)
    if data_dir is None:
        raise ValueError(f"dataset {name!r} needs a data directory")
    data_dir = Path(data_dir)
    if name in ("mnist", "fashion-mnist"):
        ds = load_mnist_dir(data_dir, split, name)
    elif name == "cifar10":
        ds = load_cifar10_bin(data_dir, split)
    else:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
    return replace(ds, name=name)


def preprocess_train(raw: Dataset) -> Dataset:
    """Grayscale data is divided by 255, color data standardized; synthetic data is left as is."""
    if raw.name == "synth":
        return raw
    if raw.images.shape[1] == 1:
        return normalize(raw, "div255")
    return normalize(raw, "standardize")


def subset(data: Dataset, n: Optional[int], seed: int = 0) -> Dataset:
    """First ``n`` samples of a seeded permutation (all samples when ``n`` is None)."""
    if n is None or n >= len(data):
        return data
    idx = np.random.default_rng([seed, 0x5B]).permutation(len(data))[:n]
    return data.take(np.sort(idx))


def load_split(name: str, data_dir, split: str, norm: Optional[Normalization] = None,
               limit: Optional[int] = None, seed: int = 0, synth: SynthSpec = SynthSpec()) -> Dataset:
    """Load and normalize a split; ``norm`` (e.g. a model's training statistics) is reused if given."""
    raw = subset(load_raw(name, data_dir, split, synth), limit, seed)
    if norm is not None:
        return apply_normalization(raw, norm)
    return preprocess_train(raw)


def new_model(train: Dataset, seed: int, head: Optional[str] = None) -> Model:
    config = default_config(train.sample_shape, train.num_classes, head=head, seed=seed)
    config.normalization = train.normalization.to_dict()
    return build_model(config)


@dataclass
class PipelineResult:
    plain: Model
    defended: Model
    plain_history: TrainHistory
    defended_history: TrainHistory
    train_acc: float
    report: RobustnessReport
    extra_reports: list


def run_pipeline(train: Dataset, test: Dataset, train_cfg: TrainConfig, epsilon: float,
                 eval_epsilons: tuple[float, ...] = (), adv_cfg: Optional[AdvTrainConfig] = None,
                 seed: int = 0, head: Optional[str] = None) -> PipelineResult:
    """Train plainly, attack, adversarially train, and attack again."""
    clip = train.normalization.valid_range()
    plain = new_model(train, seed, head)
    plain, hist = fit(plain, train, train_cfg)
    log.info("plain model trained; best epoch %s", hist.best_epoch)
    cfg = adv_cfg or AdvTrainConfig(base=train_cfg, epsilon=epsilon, clip=clip)
    defended, adv_hist = adversarial_fit(plain.copy(), train, cfg)
    report = robustness_report(plain, defended, test, epsilon, test.name, seed=seed)
    extra = [robustness_report(plain, defended, test, e, test.name, seed=seed)
             for e in eval_epsilons if e != epsilon]
    return PipelineResult(plain, defended, hist, adv_hist, accuracy(plain, train), report, extra)
