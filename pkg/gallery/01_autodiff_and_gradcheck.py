"""Record a forward pass on a tape, run it backwards, and check against finite differences."""
import numpy as np

from advrobust import Graph, Tensor, backward, precision
from advrobust.tensor import affine, conv2d, finite_difference_check, flatten, relu, softmax, tsum
from advrobust.train import cross_entropy

rng = np.random.default_rng(0)
kernels = Tensor(rng.normal(size=(4, 1, 3, 3)), requires_grad=True, name="k")
bias = Tensor(np.zeros(4), requires_grad=True, name="b")
weights = Tensor(rng.normal(size=(4 * 6 * 6, 3)) * 0.1, requires_grad=True, name="w")
labels = np.eye(3)[[0, 2]]


def loss_fn(x):
    h = relu(conv2d(x, kernels, bias))
    return cross_entropy(softmax(affine(flatten(h), weights, Tensor(np.zeros(3)))), labels)


x = rng.uniform(0, 1, size=(2, 1, 8, 8))
with Graph() as tape:
    loss = loss_fn(tape.input(x))
grads = backward(tape, loss, want_input_grad=True)

print(f"loss {loss.item():.4f}, {len(tape)} recorded ops")
for name in grads.keys():
    print(f"  d loss / d {name}: shape {grads[name].shape}, norm {np.linalg.norm(grads[name]):.4f}")
print(f"  d loss / d input: shape {grads.by_input.shape}")

# central differences in float64; a correct backward pass agrees to ~1e-7
err = finite_difference_check(loss_fn, x, h=1e-3)
print(f"max relative error vs finite differences: {err:.2e}")

with precision(np.float64):
    print("relu sum check:", finite_difference_check(lambda t: tsum(relu(t)), np.array([0.5, 2.0])))
