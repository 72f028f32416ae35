import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advrobust.tensor import (
    Graph, Tensor, add, affine, backward, conv2d, crop2d, finite_difference_check, flatten,
    maxpool2d, mul, multiply_const, precision, relu, scale, softmax, tensor_new, tsum,
)
from advrobust.train import cross_entropy
from oracles import conv2d_ref, matmul_ref, maxpool_ref, softmax_ref


def param(arr, name):
    return Tensor(arr, requires_grad=True, name=name)


# -- construction -----------------------------------------------------------

def test_tensor_new_row_major():
    t = tensor_new([2, 3], [1, 2, 3, 4, 5, 6])
    assert t.shape == (2, 3)
    assert t.numpy()[1, 0] == 4


def test_tensor_shape_mismatch():
    with pytest.raises(ValueError, match="holds 6 values"):
        tensor_new([2, 3], [1, 2, 3])


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_tensor_rejects_non_finite(bad):
    with pytest.raises(ValueError, match="finite"):
        Tensor([1.0, bad])


def test_tensor_is_immutable_and_copies_input():
    src = np.ones(3)
    t = Tensor(src)
    src[0] = 5
    assert t.numpy()[0] == 1
    with pytest.raises(ValueError):
        t.data[0] = 2


def test_item_requires_scalar():
    assert Tensor([[3.5]]).item() == 3.5
    with pytest.raises(ValueError):
        Tensor([1.0, 2.0]).item()


def test_precision_context_restores_dtype():
    with precision(np.float64):
        assert Tensor([1]).data.dtype == np.float64
    assert Tensor([1]).data.dtype == np.float32


# -- worked examples ----------------------------------------------------------

def test_conv2d_ones_kernel():
    x = Tensor(np.arange(16, dtype=float).reshape(1, 1, 4, 4))
    out = conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor([1.0]))
    assert out.shape == (1, 1, 3, 3)
    assert out.numpy()[0, 0, 0, 0] == 0 + 1 + 4 + 5 + 1


def test_conv2d_padding_stride_shape():
    x = Tensor(np.zeros((2, 3, 7, 7)))
    out = conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), stride=2, padding=1)
    assert out.shape == (2, 4, 4, 4)


def test_conv2d_errors():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    with pytest.raises(ValueError, match="channels"):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor([0.0]))
    with pytest.raises(ValueError, match="larger than"):
        conv2d(x, Tensor(np.zeros((1, 2, 7, 7))), Tensor([0.0]))
    with pytest.raises(ValueError, match="bias"):
        conv2d(x, Tensor(np.zeros((2, 2, 3, 3))), Tensor([0.0]))


def test_maxpool_example_and_tie_break():
    x = Tensor(np.array([[1, 3, 2, 2], [3, 0, 2, 2]], dtype=float).reshape(1, 1, 2, 4))
    with Graph() as g:
        xi = g.input(x)
        out = maxpool2d(xi, 2)
        loss = tsum(out)
    np.testing.assert_array_equal(out.numpy().ravel(), [3, 2])
    gx = backward(g, loss, want_input_grad=True).by_input[0, 0]
    # first row-major maximum wins each window
    np.testing.assert_array_equal(gx, [[0, 1, 1, 0], [0, 0, 0, 0]])


def test_maxpool_rejects_non_divisible():
    with pytest.raises(ValueError, match="not divisible"):
        maxpool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)
    with pytest.raises(ValueError):
        maxpool2d(Tensor(np.zeros((1, 1, 4, 4))), 0)


def test_affine_shape_error():
    with pytest.raises(ValueError, match="cannot multiply"):
        affine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))


def test_relu_gradient_at_zero_is_zero():
    with Graph() as g:
        xi = g.input(np.array([-1.0, 0.0, 2.0]))
        loss = tsum(relu(xi))
    np.testing.assert_array_equal(backward(g, loss, want_input_grad=True).by_input, [0, 0, 1])


def test_softmax_large_logits_stable():
    p = softmax(Tensor([[1000.0, 1000.0, -1000.0]])).numpy()
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p[0], [0.5, 0.5, 0.0], atol=1e-7)


# -- backward bookkeeping ------------------------------------------------------

def test_backward_errors():
    with Graph() as g:
        pass
    with pytest.raises(ValueError, match="empty"):
        backward(g, Tensor(1.0))
    with Graph() as g:
        out = relu(g.input(np.ones((2, 2))))
    with pytest.raises(ValueError, match="scalar"):
        backward(g, out)
    with Graph() as other:
        foreign = tsum(other.input(np.ones(2)))
    with pytest.raises(ValueError, match="not produced"):
        backward(g, foreign)


def test_unused_parameter_gets_zero_gradient():
    w = param(np.ones(3), "w")
    unused = param(np.ones((2, 2)), "unused")
    with Graph() as g:
        loss = tsum(mul(g.input(np.arange(3.0)), w))
    grads = backward(g, loss, params=[w, unused])
    np.testing.assert_array_equal(grads["w"], [0, 1, 2])
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_gradient_accumulates_over_reuse():
    w = param(np.array([2.0, 3.0]), "w")
    with Graph() as g:
        loss = tsum(add(mul(w, w), w))
    np.testing.assert_allclose(backward(g, loss)["w"], [5.0, 7.0])


def test_ops_outside_graph_are_not_recorded():
    out = relu(Tensor([1.0, -1.0]))
    np.testing.assert_array_equal(out.numpy(), [1, 0])


# -- oracle equivalence on random shapes ---------------------------------------

@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), f=st.integers(1, 3), k=st.integers(1, 3),
       extra=st.integers(0, 3), stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 2**16))
def test_conv2d_matches_oracle(n, c, f, k, extra, stride, pad, seed):
    r = np.random.default_rng(seed)
    x, w, b = r.normal(size=(n, c, k + extra, k + extra + 1)), r.normal(size=(f, c, k, k)), r.normal(size=f)
    with precision(np.float64):
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).numpy()
    np.testing.assert_allclose(out, conv2d_ref(x, w, b, stride, pad), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(p=st.integers(1, 3), ho=st.integers(1, 3), wo=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_maxpool_matches_oracle(p, ho, wo, seed):
    x = np.random.default_rng(seed).normal(size=(2, 2, p * ho, p * wo))
    np.testing.assert_array_equal(maxpool2d(Tensor(x), p).numpy(), maxpool_ref(x.astype(np.float32), p))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 4), d=st.integers(1, 6), m=st.integers(1, 5), seed=st.integers(0, 2**16))
def test_affine_matches_oracle(n, d, m, seed):
    r = np.random.default_rng(seed)
    x, w, b = r.normal(size=(n, d)), r.normal(size=(d, m)), r.normal(size=m)
    with precision(np.float64):
        out = affine(Tensor(x), Tensor(w), Tensor(b)).numpy()
    np.testing.assert_allclose(out, matmul_ref(x, w) + b, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 4), k=st.integers(1, 8), spread=st.floats(0.1, 50), seed=st.integers(0, 2**16))
def test_softmax_rows_sum_to_one(n, k, spread, seed):
    z = np.random.default_rng(seed).normal(scale=spread, size=(n, k))
    p = softmax(Tensor(z)).numpy()
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)
    if spread < 20:
        np.testing.assert_allclose(p, softmax_ref(z), atol=1e-6)


def test_forward_deterministic(rng):
    x, w, b = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    a = conv2d(Tensor(x), Tensor(w), Tensor(b)).numpy()
    assert np.array_equal(a, conv2d(Tensor(x), Tensor(w), Tensor(b)).numpy())


# -- finite-difference checks ---------------------------------------------------

def _no_ties(rng, shape):
    # distinct values 0.05 apart keep each window's max stable under +-h
    return rng.permutation(np.prod(shape)).reshape(shape).astype(float) * 0.05


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 2)])
def test_fd_conv2d(rng, stride, pad):
    w, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    side = (5 + 2 * pad - 3) // stride + 1
    c = rng.normal(size=(1, 2, side, side))

    def f(x):
        return tsum(mul(conv2d(x, Tensor(w), Tensor(b), stride, pad), Tensor(c)))

    assert finite_difference_check(f, rng.normal(size=(1, 2, 5, 5))) < 1e-3


def test_fd_conv2d_kernel_and_bias(rng):
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    b = rng.normal(size=3)
    assert finite_difference_check(lambda k: tsum(relu(conv2d(x, k, Tensor(b)))),
                                   rng.normal(size=(3, 2, 3, 3))) < 1e-3
    k = rng.normal(size=(3, 2, 3, 3))
    c = rng.normal(size=(2, 3, 3, 3))
    assert finite_difference_check(lambda bb: tsum(mul(conv2d(x, Tensor(k), bb), Tensor(c))),
                                   rng.normal(size=3)) < 1e-3


def test_fd_maxpool(rng):
    x = _no_ties(rng, (1, 2, 4, 6))
    c = rng.normal(size=(1, 2, 2, 3))
    assert finite_difference_check(lambda t: tsum(mul(maxpool2d(t, 2), Tensor(c))), x) < 1e-3


def test_fd_affine_relu_softmax_ce(rng):
    w, b = rng.normal(size=(5, 4)), rng.normal(size=4)
    y = np.eye(4)[[0, 3, 1]]

    def f(x):
        return cross_entropy(softmax(affine(relu(x), Tensor(w), Tensor(b))), y)

    x = rng.normal(size=(3, 5))
    x[np.abs(x) < 0.05] = 0.5  # away from the ReLU kink
    assert finite_difference_check(f, x) < 1e-3
    by_weight = lambda W: cross_entropy(softmax(affine(Tensor(x), W, Tensor(b))), y)
    assert finite_difference_check(by_weight, w) < 1e-3


def test_fd_elementwise_ops(rng):
    c = rng.normal(size=(2, 3))
    mask = rng.integers(0, 2, size=(2, 3)) * 2.0
    x = rng.normal(size=(2, 3))
    assert finite_difference_check(lambda t: tsum(mul(scale(t, -1.5), Tensor(c))), x) < 1e-3
    assert finite_difference_check(lambda t: tsum(mul(multiply_const(t, mask), t)), x) < 1e-3
    assert finite_difference_check(lambda t: tsum(mul(add(t, t), t)), x) < 1e-3


def test_fd_flatten_crop(rng):
    c = rng.normal(size=(1, 2 * 3 * 2))
    f = lambda t: tsum(mul(flatten(crop2d(t, 3, 2)), Tensor(c)))
    assert finite_difference_check(f, rng.normal(size=(1, 2, 4, 5))) < 1e-3


def test_fd_check_detects_wrong_gradient():
    from advrobust.tensor import record

    def bad_square(x):
        return record("bad", (x,), (x.data ** 2).sum(), lambda g, needs: (g * x.data,))

    assert finite_difference_check(bad_square, np.array([1.0, 2.0])) > 0.4


def test_empty_tensor_allowed():
    assert tensor_new([0], []).shape == (0,)


def test_zero_kernels_give_bias(rng):
    out = conv2d(Tensor(rng.normal(size=(1, 2, 5, 5))), Tensor(np.zeros((3, 2, 3, 3))), Tensor([1.0, -2.0, 0.5]))
    for f, b in enumerate([1.0, -2.0, 0.5]):
        assert np.all(out.numpy()[0, f] == b)


def test_conv_ones_all_fours():
    out = conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))
    np.testing.assert_array_equal(out.numpy(), np.full((1, 1, 3, 3), 4.0))


def test_maxpool_constant_input_gradient_to_first():
    with Graph() as g:
        loss = tsum(maxpool2d(g.input(np.full((1, 1, 2, 2), 7.0)), 2))
    np.testing.assert_array_equal(backward(g, loss, want_input_grad=True).by_input[0, 0], [[1, 0], [0, 0]])


def test_affine_small_cases():
    x = np.array([[3.0, 4.0]])
    assert affine(Tensor(x), Tensor([[1.0], [1.0]]), Tensor([0.0])).numpy()[0, 0] == 7
    np.testing.assert_array_equal(affine(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2))).numpy(), x)


def test_sum_gives_ones_and_zero_scale_gives_zeros():
    with Graph() as g:
        xi = g.input(np.arange(6.0).reshape(2, 3))
        loss = tsum(xi)
    np.testing.assert_array_equal(backward(g, loss, want_input_grad=True).by_input, np.ones((2, 3)))
    with Graph() as g:
        loss = tsum(scale(g.input(np.arange(3.0)), 0.0))
    np.testing.assert_array_equal(backward(g, loss, want_input_grad=True).by_input, np.zeros(3))


def test_fd_check_sum_of_squares():
    assert finite_difference_check(lambda t: tsum(mul(t, t)), np.array([1.0, 2.0])) < 1e-4
    assert finite_difference_check(lambda t: tsum(scale(t, 3.0)), np.array([1.0, -2.0])) < 1e-9
