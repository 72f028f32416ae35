"""Combined CNN: layer specs, default architectures, forward pass, persistence."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import serialize
from .tensor import (
    Tensor, affine, conv2d, conv_output_size, crop2d, flatten, maxpool2d,
    multiply_const, relu, softmax,
)

LAYER_KINDS = ("conv", "maxpool", "flatten", "dense", "dropout", "softmax")
HEADS = ("small_K", "large_K")


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: Optional[int] = None
    kernel: Optional[int] = None
    stride: int = 1
    padding: int = 0
    activation: Optional[str] = None
    pool: Optional[int] = None
    truncate: bool = True
    neurons: Optional[int] = None
    rate: Optional[float] = None

    def __post_init__(self):
        k = self.kind
        if k not in LAYER_KINDS:
            raise ModelConfigError(f"unknown layer kind {k!r}")
        if self.activation not in (None, "relu"):
            raise ModelConfigError(f"unsupported activation {self.activation!r}")
        if k == "conv" and not (self.filters and self.kernel and self.filters > 0 and self.kernel > 0):
            raise ModelConfigError("conv layer needs positive filters and kernel")
        if k == "maxpool" and not (self.pool and self.pool > 0):
            raise ModelConfigError("maxpool layer needs a positive pool size")
        if k == "dense" and not (self.neurons and self.neurons > 0):
            raise ModelConfigError("dense layer needs a positive neuron count")
        if k == "dropout" and (self.rate is None or not 0.0 <= self.rate < 1.0):
            raise ModelConfigError(f"dropout rate must be in [0, 1), got {self.rate}")

    @classmethod
    def conv(cls, filters: int, kernel: int = 3, activation: Optional[str] = "relu",
             stride: int = 1, padding: int = 0) -> "LayerSpec":
        return cls("conv", filters=filters, kernel=kernel, activation=activation,
                   stride=stride, padding=padding)

    @classmethod
    def maxpool(cls, pool: int = 2, truncate: bool = True) -> "LayerSpec":
        return cls("maxpool", pool=pool, truncate=truncate)

    @classmethod
    def dense(cls, neurons: int, activation: Optional[str] = "relu") -> "LayerSpec":
        return cls("dense", neurons=neurons, activation=activation)

    @classmethod
    def dropout(cls, rate: float = 0.5) -> "LayerSpec":
        return cls("dropout", rate=rate)

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


FLATTEN = LayerSpec("flatten")
SOFTMAX = LayerSpec("softmax")


@dataclass
class ModelConfig:
    """Architecture description.

    ``head`` names the classification-head branch the layer list must follow;
    ``None`` leaves the stack unconstrained (e.g. a plain linear softmax model).
    ``normalization`` carries the input preprocessing so that a saved model
    knows how its inputs were scaled.
    """

    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[LayerSpec]
    head: Optional[str] = "small_K"
    seed: int = 0
    normalization: Optional[dict] = None

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.validate()

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ModelConfigError(f"input shape must be positive (C,H,W), got {self.input_shape}")
        if self.num_classes < 1:
            raise ModelConfigError("need at least one class")
        if self.seed < 0:
            raise ModelConfigError("seed must be unsigned")
        layers = self.layers
        if len(layers) < 2 or layers[-1].kind != "softmax":
            raise ModelConfigError("last layer must be softmax")
        out = layers[-2]
        if out.kind != "dense" or out.neurons != self.num_classes or out.activation is not None:
            raise ModelConfigError(
                f"layer before softmax must be a linear dense layer with {self.num_classes} neurons")
        if self.head is None:
            return
        if self.head not in HEADS:
            raise ModelConfigError(f"head must be one of {HEADS} or None, got {self.head!r}")
        try:
            start = max(i for i, l in enumerate(layers) if l.kind == "flatten") + 1
        except ValueError:
            raise ModelConfigError("head variants require a flatten layer") from None
        head = [l.kind for l in layers[start:-2]]
        expected = ["dense"] if self.head == "small_K" else ["dense", "dropout", "dense"]
        if head != expected:
            raise ModelConfigError(
                f"{self.head} head expects {'->'.join(expected)} before the output layer, "
                f"got {'->'.join(head) or 'nothing'}")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
            "head": self.head,
            "seed": self.seed,
            "normalization": self.normalization,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(input_shape=tuple(d["input_shape"]), num_classes=d["num_classes"],
                   layers=[LayerSpec(**l) for l in d["layers"]], head=d.get("head"),
                   seed=d.get("seed", 0), normalization=d.get("normalization"))


def default_config(input_shape: Sequence[int], num_classes: int, head: Optional[str] = None,
                   seed: int = 0, dropout: float = 0.5) -> ModelConfig:
    """Default architecture; grayscale inputs get the small head, color the large one."""
    c = input_shape[0]
    if head is None:
        head = "small_K" if c == 1 else "large_K"
    if head == "small_K":
        layers = [LayerSpec.conv(32), LayerSpec.maxpool(2),
                  LayerSpec.conv(64), LayerSpec.maxpool(2),
                  FLATTEN, LayerSpec.dense(128)]
    elif head == "large_K":
        layers = [LayerSpec.conv(32), LayerSpec.maxpool(2),
                  LayerSpec.conv(64), LayerSpec.maxpool(2),
                  LayerSpec.conv(128), FLATTEN,
                  LayerSpec.dense(256), LayerSpec.dropout(dropout), LayerSpec.dense(128)]
    else:
        raise ModelConfigError(f"unknown head {head!r}")
    layers += [LayerSpec.dense(num_classes, activation=None), SOFTMAX]
    return ModelConfig(tuple(input_shape), num_classes, layers, head=head, seed=seed)


def linear_config(input_shape: Sequence[int], num_classes: int, seed: int = 0) -> ModelConfig:
    """Softmax regression: flatten -> dense(K) -> softmax."""
    return ModelConfig(tuple(input_shape), num_classes,
                       [FLATTEN, LayerSpec.dense(num_classes, activation=None), SOFTMAX],
                       head=None, seed=seed)


class Model:
    """Parameters plus the config they were built from.

    ``params`` maps names such as ``"conv0.weight"`` to tensors.  Optimizers
    replace entries of this dict; tensors themselves are never mutated.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], trace: list[tuple[str, tuple]]):
        self.config = config
        self.params = params
        self.trace = trace
        self.reset_dropout_rng()

    def reset_dropout_rng(self, stream: int = 0) -> None:
        self._rng = np.random.default_rng([self.config.seed, 0xD0, stream])

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def parameter_list(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            if state[k].shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {self.params[k].shape}")
            self.params[k] = Tensor._wrap(np.array(state[k], dtype=np.float32), requires_grad=True, name=k)

    def copy(self) -> "Model":
        m = Model(self.config, dict(self.params), list(self.trace))
        return m

    def __repr__(self) -> str:
        n = sum(p.size for p in self.params.values())
        return f"Model(head={self.config.head}, classes={self.num_classes}, params={n})"


def _shape_trace(config: ModelConfig) -> list[tuple[str, tuple]]:
    shape: tuple = tuple(config.input_shape)
    trace = [("input", shape)]
    for i, layer in enumerate(config.layers):
        where = f"layer {i} ({layer.kind})"
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ModelConfigError(f"{where}: conv needs a (C,H,W) input, got {shape}")
            c, h, w = shape
            k, s, p = layer.kernel, layer.stride, layer.padding
            if h + 2 * p < k or w + 2 * p < k:
                raise ModelConfigError(f"{where}: kernel {k} larger than padded input {h}x{w}")
            shape = (layer.filters, conv_output_size(h, k, s, p), conv_output_size(w, k, s, p))
        elif layer.kind == "maxpool":
            if len(shape) != 3:
                raise ModelConfigError(f"{where}: maxpool needs a (C,H,W) input, got {shape}")
            c, h, w = shape
            p = layer.pool
            if (h % p or w % p) and not layer.truncate:
                raise ModelConfigError(f"{where}: extent {h}x{w} not divisible by pool {p}")
            if h < p or w < p:
                raise ModelConfigError(f"{where}: extent {h}x{w} smaller than pool {p}")
            shape = (c, h // p, w // p)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
            if shape[0] <= 0:
                raise ModelConfigError(f"{where}: flatten size must be positive")
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ModelConfigError(f"{where}: dense needs a flat input, got {shape}; add flatten")
            shape = (layer.neurons,)
        elif layer.kind == "softmax":
            if len(shape) != 1:
                raise ModelConfigError(f"{where}: softmax needs a flat input")
        trace.append((where, shape))
    return trace


def build_model(config: ModelConfig) -> Model:
    """Validate shapes and allocate He-initialized parameters from ``config.seed``."""
    config.validate()
    trace = _shape_trace(config)
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    shape = config.input_shape
    for i, layer in enumerate(config.layers):
        if layer.kind == "conv":
            fan_in = shape[0] * layer.kernel ** 2
            w = rng.standard_normal((layer.filters, shape[0], layer.kernel, layer.kernel))
            params[f"conv{i}.weight"] = (w * np.sqrt(2.0 / fan_in)).astype(np.float32)
            params[f"conv{i}.bias"] = np.zeros(layer.filters, dtype=np.float32)
        elif layer.kind == "dense":
            fan_in = shape[0]
            w = rng.standard_normal((fan_in, layer.neurons))
            params[f"dense{i}.weight"] = (w * np.sqrt(2.0 / fan_in)).astype(np.float32)
            params[f"dense{i}.bias"] = np.zeros(layer.neurons, dtype=np.float32)
        shape = trace[i + 1][1]
    tensors = {k: Tensor._wrap(v, requires_grad=True, name=k) for k, v in params.items()}
    return Model(config, tensors, trace)


def _as_tensor(batch) -> Tensor:
    if isinstance(batch, Tensor):
        return batch
    return Tensor._wrap(np.asarray(batch, dtype=np.float32))


def forward(model: Model, batch, training: bool = False) -> Tensor:
    """Class probabilities for an (n,C,H,W) batch.

    Dropout is active only when ``training`` is true and uses inverted
    scaling, so inference needs no correction.
    """
    x = _as_tensor(batch)
    if x.data.ndim != 4 or x.shape[1:] != model.config.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match model input (n, {model.config.input_shape})")
    p = model.params
    for i, layer in enumerate(model.config.layers):
        if layer.kind == "conv":
            x = conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], layer.stride, layer.padding)
            if layer.activation == "relu":
                x = relu(x)
        elif layer.kind == "maxpool":
            h, w = x.shape[2], x.shape[3]
            q = layer.pool
            if h % q or w % q:
                x = crop2d(x, h - h % q, w - w % q)
            x = maxpool2d(x, q)
        elif layer.kind == "flatten":
            x = flatten(x)
        elif layer.kind == "dense":
            x = affine(x, p[f"dense{i}.weight"], p[f"dense{i}.bias"])
            if layer.activation == "relu":
                x = relu(x)
        elif layer.kind == "dropout":
            if training and layer.rate > 0:
                keep = 1.0 - layer.rate
                mask = (model._rng.random(x.shape) < keep).astype(x.data.dtype) / x.data.dtype.type(keep)
                x = multiply_const(x, mask)
        elif layer.kind == "softmax":
            x = softmax(x)
    return x


def predict(model: Model, batch, batch_size: int = 512) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest index."""
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float32)
    out = []
    for start in range(0, len(data), batch_size):
        probs = forward(model, data[start:start + batch_size], training=False).data
        out.append(np.argmax(probs, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def save_model(model: Model, path) -> None:
    header = {"kind": "model", "config": model.config.to_dict()}
    serialize.write_tensor_file(path, header, model.state())


def load_model(path) -> Model:
    header, tensors = serialize.read_tensor_file(path)
    if header.get("kind") != "model" or "config" not in header:
        raise serialize.FormatError(f"{path}: not a model file (kind={header.get('kind')!r})")
    config = ModelConfig.from_dict(header["config"])
    model = build_model(config)
    missing = [k for k in model.params if k not in tensors]
    if missing:
        raise serialize.FormatError(f"{path}: truncated, missing parameters {missing}")
    extra = [k for k in tensors if k not in model.params]
    if extra:
        raise serialize.FormatError(f"{path}: unexpected tensors {extra}")
    model.load_state(tensors)
    return model
