"""Small-CNN adversarial robustness toolkit: FGSM attacks and adversarial training in numpy."""

from .attack import AdvBatch, AttackConfig, epsilon_sweep, fgsm_batch, fgsm_example
from .data import Dataset, Normalization, load_cifar10_bin, load_idx, normalize, one_hot, synth_dataset
from .defense import AdvTrainConfig, adversarial_fit, mix_minibatch
from .model import (
    LayerSpec, Model, ModelConfig, build_model, default_config, forward, linear_config,
    load_model, predict, save_model,
)
from .pipeline import SynthSpec, load_split, run_pipeline
from .report import RobustnessReport, accuracy, dump_image_pair, export_report, robustness_report
from .tensor import Graph, Tensor, backward, finite_difference_check, precision
from .train import Adam, SGD, TrainConfig, TrainHistory, cross_entropy, fit

__version__ = "0.1.0"
