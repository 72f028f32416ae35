"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Graph` (entered with a
``with`` block).  ``backward`` walks the tape once in reverse and returns
gradients for the parameters and, optionally, for the input tensor
registered with :meth:`Graph.input`.  The input gradient is what FGSM uses.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Graph",
    "Gradients",
    "tensor_new",
    "precision",
    "get_dtype",
    "backward",
    "conv2d",
    "maxpool2d",
    "crop2d",
    "affine",
    "relu",
    "softmax",
    "flatten",
    "multiply_const",
    "scale",
    "add",
    "mul",
    "tsum",
    "record",
    "finite_difference_check",
]

_state = threading.local()


def get_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    Reference computations in tests run under ``precision(np.float64)``.
    """
    prev = get_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """Immutable n-dimensional array of reals.

    ``data`` is a read-only, C-contiguous numpy array.  Constructing a tensor
    from user values copies them and rejects non-finite entries.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, values, shape: Optional[Sequence[int]] = None,
                 requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(values, dtype=get_dtype(), copy=True, order="C")
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s < 0 for s in shape):
                raise ValueError(f"negative dimension in shape {shape}")
            if int(np.prod(shape, dtype=np.int64)) != arr.size:
                raise ValueError(
                    f"shape {shape} holds {int(np.prod(shape))} values, got {arr.size}")
            arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False,
              name: Optional[str] = None) -> "Tensor":
        # internal fast path: takes ownership of ``arr`` without copying or checks
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = name
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"


def tensor_new(shape: Sequence[int], values: Iterable[float]) -> Tensor:
    """Build a tensor from a shape and a flat row-major list of values."""
    flat = np.asarray(list(values) if not isinstance(values, np.ndarray) else values)
    if flat.ndim != 1:
        flat = flat.reshape(-1)
    return Tensor(flat, shape=shape)


# --------------------------------------------------------------------------
# tape

@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray, tuple[bool, ...]], tuple[Optional[np.ndarray], ...]]
    saved: dict = field(default_factory=dict)


class Graph:
    """Tape of operations recorded during one forward pass.

    Use as a context manager; operations executed inside the block are
    appended in execution order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_tensor: Optional[Tensor] = None
        self._produced: dict[int, int] = {}

    def __enter__(self) -> "Graph":
        stack = getattr(_state, "graphs", None)
        if stack is None:
            stack = _state.graphs = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.graphs.pop()

    def input(self, x) -> Tensor:
        """Register ``x`` as the graph input whose gradient may be requested."""
        arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=get_dtype())
        t = Tensor._wrap(np.array(arr, dtype=arr.dtype), requires_grad=True, name="<input>")
        self.input_tensor = t
        return t

    def add(self, node: Node) -> None:
        self._produced[id(node.output)] = len(self.nodes)
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


def _active_graph() -> Optional[Graph]:
    stack = getattr(_state, "graphs", None)
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn, **saved) -> Tensor:
    """Wrap ``out`` as a tensor and, when a graph is active, log the op.

    ``grad_fn(grad_out, needs)`` must return one gradient (or None) per input;
    ``needs[i]`` says whether input ``i`` wants a gradient.
    """
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs_grad)
    graph = _active_graph()
    if graph is not None and needs_grad:
        graph.add(Node(op, tuple(inputs), result, grad_fn, saved))
    return result


@dataclass
class Gradients:
    by_parameter: dict[str, np.ndarray]
    by_input: Optional[np.ndarray] = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.by_parameter[name]

    def __contains__(self, name: str) -> bool:
        return name in self.by_parameter

    def keys(self):
        return self.by_parameter.keys()


def _param_key(t: Tensor) -> str:
    return t.name if t.name is not None else f"tensor@{id(t):x}"


def backward(graph: Graph, loss: Tensor, want_input_grad: bool = False,
             params: Optional[Iterable[Tensor]] = None) -> Gradients:
    """Reverse-mode sweep over ``graph`` from the scalar ``loss``.

    Every leaf tensor with ``requires_grad`` that took part in the pass gets
    a gradient.  Tensors listed in ``params`` but unused get zeros.
    """
    if len(graph.nodes) == 0:
        raise ValueError("backward called on an empty graph")
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if id(loss) not in graph._produced:
        raise ValueError("loss tensor was not produced by this graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    last = graph._produced[id(loss)]
    for node in reversed(graph.nodes[: last + 1]):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        g_ins = node.grad_fn(g_out, needs)
        for t, need, g in zip(node.inputs, needs, g_ins):
            if not need or g is None:
                continue
            key = id(t)
            if id(t) not in graph._produced:
                leaves[key] = t
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    by_param: dict[str, np.ndarray] = {}
    by_input = None
    for key, t in leaves.items():
        g = grads.get(key)
        if t is graph.input_tensor:
            by_input = g
            continue
        by_param[_param_key(t)] = g
    if params is not None:
        for p in params:
            by_param.setdefault(_param_key(p), np.zeros_like(p.data))
    if want_input_grad:
        if graph.input_tensor is None:
            raise ValueError("input gradient requested but no graph input was registered")
        if by_input is None:
            by_input = np.zeros_like(graph.input_tensor.data)
    else:
        by_input = None
    return Gradients(by_param, by_input)


# --------------------------------------------------------------------------
# operations

def _check_rank(x: Tensor, rank: int, what: str) -> None:
    if x.data.ndim != rank:
        raise ValueError(f"{what} expects a rank-{rank} tensor, got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (n,C,H,W) input with (F,C,k,k) kernels plus bias."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(kernels, 4, "conv2d kernels")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kh != kw:
        raise ValueError(f"kernels must be square, got {kh}x{kw}")
    if kc != c:
        raise ValueError(f"input has {c} channels but kernels expect {kc}")
    if bias.shape != (f,):
        raise ValueError(f"bias shape {bias.shape} does not match {f} filters")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"kernel {k}x{k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = kernels.data.reshape(f, c * k * k)
    out = cols @ wmat.T
    out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def grad_fn(g, needs):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dx = dk = db = None
        if needs[0]:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if needs[1]:
            dk = (g2.T @ cols).reshape(kernels.shape)
        if needs[2]:
            db = g2.sum(axis=0)
        return dx, dk, db

    return record("conv2d", (x, kernels, bias), out, grad_fn, stride=stride, padding=padding)


def maxpool2d(x: Tensor, pool: int) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first maximum in each window."""
    if pool <= 0:
        raise ValueError(f"pool size must be positive, got {pool}")
    _check_rank(x, 4, "maxpool2d input")
    n, c, h, w = x.shape
    if h % pool or w % pool:
        raise ValueError(f"spatial extent {h}x{w} is not divisible by pool {pool}")
    ho, wo = h // pool, w // pool
    win = (x.data.reshape(n, c, ho, pool, wo, pool)
           .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, pool * pool))
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def grad_fn(g, needs):
        dwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(dwin, idx, g[..., None], axis=-1)
        dx = (dwin.reshape(n, c, ho, wo, pool, pool)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        return (dx,)

    return record("maxpool2d", (x,), out, grad_fn, pool=pool, windows=win)


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` region of each map."""
    _check_rank(x, 4, "crop2d input")
    n, c, h, w = x.shape
    if not (0 < height <= h and 0 < width <= w):
        raise ValueError(f"cannot crop {h}x{w} to {height}x{width}")
    out = x.data[:, :, :height, :width]

    def grad_fn(g, needs):
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, :, :height, :width] = g
        return (dx,)

    return record("crop2d", (x,), out, grad_fn)


def affine(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``x @ weights + bias`` for (n,D) inputs and (D,M) weights."""
    _check_rank(x, 2, "affine input")
    _check_rank(weights, 2, "affine weights")
    if x.shape[1] != weights.shape[0]:
        raise ValueError(f"cannot multiply {x.shape} by {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
    out = x.data @ weights.data
    out += bias.data

    def grad_fn(g, needs):
        return (g @ weights.data.T if needs[0] else None,
                x.data.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return record("affine", (x, weights, bias), out, grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)

    def grad_fn(g, needs):
        return (g * mask,)

    return record("relu", (x,), out, grad_fn)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of an (n,K) tensor."""
    _check_rank(x, 2, "softmax input")
    if x.shape[1] < 1:
        raise ValueError("softmax needs at least one class")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g, needs):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record("softmax", (x,), p, grad_fn)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def grad_fn(g, needs):
        return (g.reshape(shape),)

    return record("flatten", (x,), out, grad_fn)


def multiply_const(x: Tensor, factor: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (used for dropout masks)."""
    factor = np.asarray(factor, dtype=x.data.dtype)
    out = x.data * factor

    def grad_fn(g, needs):
        return (g * factor,)

    return record("multiply_const", (x,), out, grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.data.dtype.type(c)

    def grad_fn(g, needs):
        return (g * g.dtype.type(c),)

    return record("scale", (x,), out, grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return record("add", (a, b), a.data + b.data, lambda g, needs: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")

    def grad_fn(g, needs):
        return (g * b.data if needs[0] else None, g * a.data if needs[1] else None)

    return record("mul", (a, b), a.data * b.data, grad_fn)


def tsum(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.data.dtype
    out = np.asarray(x.data.sum(dtype=dtype), dtype=dtype)

    def grad_fn(g, needs):
        return (np.full(shape, g, dtype=g.dtype),)

    return record("sum", (x,), out, grad_fn)


# --------------------------------------------------------------------------
# gradient checking

def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    Both sides are evaluated in float64.  The relative error of an element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        with Graph() as g:
            xi = g.input(base)
            out = f(xi)
        analytic = backward(g, out, want_input_grad=True).by_input

        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor._wrap(base.copy())).item()
            flat[i] = orig - h
            fm = f(Tensor._wrap(base.copy())).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
