"""Acceptance gate: one test per criterion, each printed as PASS/FAIL/SKIP in the summary.

Criteria 6-10 need the real datasets.  Point ``ADVROBUST_DATA`` at a
directory containing ``mnist/`` and ``fashion-mnist/`` (IDX files, gzip or
not) and ``cifar10/`` (the binary batches).
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from advrobust.attack import AttackConfig, fgsm_images
from advrobust.data import Dataset, Normalization, normalize, one_hot, synth_dataset
from advrobust.defense import AdvTrainConfig, adversarial_fit
from advrobust.model import LayerSpec, FLATTEN, SOFTMAX, ModelConfig, build_model, default_config, forward, linear_config
from advrobust.pipeline import SynthSpec, load_raw, load_split, run_pipeline, subset
from advrobust.tensor import (
    Graph, Tensor, add, affine, conv2d, crop2d, finite_difference_check, flatten, maxpool2d, mul,
    multiply_const, precision, relu, scale, softmax, tsum,
)
from advrobust.train import TrainConfig, cross_entropy, fit
from oracles import kink_margin, conv2d_ref, cross_entropy_ref, matmul_ref, maxpool_ref, softmax_ref

criterion = pytest.mark.criterion
DATA_ROOT = os.environ.get("ADVROBUST_DATA")


# ---------------------------------------------------------------------------
# property criteria

@criterion(1, "finite-difference gradients of every op and a 2-conv CNN, rel. error < 1e-3, < 1 min")
def test_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    h = 1e-3
    errors = {}

    def away_from_kinks(shape):
        x = rng.normal(size=shape)
        return np.where(np.abs(x) < 0.05, 0.5, x)

    weights = {}

    def weighted(out):
        # fixed random projection per output shape turns any op into a scalar
        if out.shape not in weights:
            weights[out.shape] = rng.normal(size=out.shape)
        return tsum(mul(out, Tensor(weights[out.shape])))

    k, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    x_conv = rng.normal(size=(2, 2, 6, 6))
    errors["conv2d/input"] = finite_difference_check(lambda t: weighted(conv2d(t, Tensor(k), Tensor(b), 1, 0)), x_conv, h)
    errors["conv2d/kernel"] = finite_difference_check(
        lambda t: weighted(conv2d(Tensor(x_conv), t, Tensor(b), 2, 1)), k, h)
    errors["conv2d/bias"] = finite_difference_check(
        lambda t: weighted(conv2d(Tensor(x_conv), Tensor(k), t, 2, 1)), b, h)
    # distinct values 0.05 apart: no window max changes under a step of h
    pool_in = rng.permutation(96).reshape(2, 2, 4, 6) * 0.05
    errors["maxpool2d"] = finite_difference_check(lambda t: weighted(maxpool2d(t, 2)), pool_in, h)
    errors["crop2d"] = finite_difference_check(lambda t: weighted(crop2d(t, 3, 2)), rng.normal(size=(2, 2, 4, 4)), h)
    W, c, x_flat = rng.normal(size=(18, 4)), rng.normal(size=4), rng.normal(size=(2, 18))
    errors["affine/input"] = finite_difference_check(lambda t: weighted(affine(t, Tensor(W), Tensor(c))), x_flat, h)
    errors["affine/weight"] = finite_difference_check(lambda t: weighted(affine(Tensor(x_flat), t, Tensor(c))), W, h)
    errors["affine/bias"] = finite_difference_check(lambda t: weighted(affine(Tensor(x_flat), Tensor(W), t)), c, h)
    errors["flatten"] = finite_difference_check(lambda t: weighted(flatten(t)), rng.normal(size=(2, 2, 3, 3)), h)
    errors["relu"] = finite_difference_check(lambda t: weighted(relu(t)), away_from_kinks((2, 4)), h)
    errors["softmax"] = finite_difference_check(lambda t: weighted(softmax(t)), rng.normal(size=(2, 4)), h)
    y = one_hot([1, 3], 4)
    errors["softmax+cross_entropy"] = finite_difference_check(
        lambda t: cross_entropy(softmax(t), y), rng.normal(size=(2, 4)) * 3, h)
    mask = rng.integers(0, 2, size=(2, 4)) * 2.0
    errors["multiply_const"] = finite_difference_check(lambda t: weighted(multiply_const(t, mask)), rng.normal(size=(2, 4)), h)
    errors["scale"] = finite_difference_check(lambda t: weighted(scale(t, -0.7)), rng.normal(size=(2, 4)), h)
    errors["add/mul"] = finite_difference_check(lambda t: tsum(mul(add(t, t), t)), rng.normal(size=(2, 4)), h)

    layers = [LayerSpec.conv(3), LayerSpec.maxpool(2), LayerSpec.conv(4), FLATTEN,
              LayerSpec.dense(5), LayerSpec.dense(3, activation=None), SOFTMAX]
    model = build_model(ModelConfig((1, 10, 10), 3, layers, head=None, seed=3))
    labels = one_hot([0, 1, 2], 3)
    with precision(np.float64):
        model.params = {n: Tensor(p.data, requires_grad=True, name=n) for n, p in model.params.items()}
        # resample until no ReLU input or pooling near-tie lies within reach of a step of h
        for _ in range(500):
            x_img = rng.uniform(0, 1, size=(3, 1, 10, 10))
            with Graph() as g:
                forward(model, g.input(x_img))
            if kink_margin(g) > 5 * h:
                break
        else:
            pytest.fail("no kink-free evaluation point found")
        errors["cnn/input"] = finite_difference_check(lambda t: cross_entropy(forward(model, t), labels), x_img, h)
        for name in ("conv0.weight", "conv2.weight", "dense5.weight"):
            def f(t, name=name):
                saved = model.params[name]
                model.params[name] = t
                try:
                    return cross_entropy(forward(model, Tensor(x_img)), labels)
                finally:
                    model.params[name] = saved
            errors[f"cnn/{name}"] = finite_difference_check(f, model.params[name].data, h)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-3, f"{worst}: {errors[worst]:.2e}"
    assert elapsed < 60, f"gradient suite took {elapsed:.1f}s"


@criterion(2, "ops match brute-force oracles within 1e-5 on 200 random instances, < 1 min")
def test_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for i in range(200):
        op = ("conv2d", "maxpool2d", "affine", "softmax", "cross_entropy")[i % 5]
        if op == "conv2d":
            n, c, f, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
            s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
            hgt, wid = k + rng.integers(0, 4), k + rng.integers(0, 4)
            x, w, b = rng.normal(size=(n, c, hgt, wid)), rng.normal(size=(f, c, k, k)), rng.normal(size=f)
            got = conv2d(Tensor(x), Tensor(w), Tensor(b), s, p).numpy()
            ref = conv2d_ref(x, w, b, s, p)
        elif op == "maxpool2d":
            q = int(rng.integers(1, 4))
            x = rng.normal(size=(2, 2, q * rng.integers(1, 4), q * rng.integers(1, 4)))
            got, ref = maxpool2d(Tensor(x), q).numpy(), maxpool_ref(x, q)
        elif op == "affine":
            n, d, m = rng.integers(1, 5), rng.integers(1, 8), rng.integers(1, 6)
            x, w, b = rng.normal(size=(n, d)), rng.normal(size=(d, m)), rng.normal(size=m)
            got, ref = affine(Tensor(x), Tensor(w), Tensor(b)).numpy(), matmul_ref(x, w) + b
        elif op == "softmax":
            z = rng.normal(scale=3, size=(rng.integers(1, 5), rng.integers(1, 10)))
            got, ref = softmax(Tensor(z)).numpy(), softmax_ref(z)
        else:
            k = int(rng.integers(2, 10))
            p = softmax_ref(rng.normal(scale=2, size=(int(rng.integers(1, 6)), k)))
            labels = rng.integers(0, k, size=len(p))
            got = np.array(cross_entropy(Tensor(p), one_hot(labels, k)).item())
            ref = np.array(cross_entropy_ref(p, labels))
        worst[op] = max(worst.get(op, 0.0), float(np.max(np.abs(got - ref))) if got.size else 0.0)
    elapsed = time.perf_counter() - start
    assert all(v <= 1e-5 for v in worst.values()), worst
    assert elapsed < 60


@criterion(3, "FGSM: L-inf <= eps on 1000 samples, eps=0 bit-exact, linear-model loss never decreases")
def test_fgsm_contracts():
    rng = np.random.default_rng(2)
    model = build_model(default_config((1, 28, 28), 10, seed=2))
    x = rng.uniform(0, 1, size=(1000, 1, 28, 28)).astype(np.float32)
    labels = rng.integers(0, 10, size=1000)
    for chunk, eps in zip(np.split(np.arange(1000), 4), (0.01, 0.03, 0.1, 0.3)):
        adv = fgsm_images(model, x[chunk], labels[chunk], AttackConfig(eps, (0.0, 1.0)))
        assert np.max(np.abs(adv.astype(np.float64) - x[chunk])) <= eps
        assert adv.min() >= 0 and adv.max() <= 1
    same = fgsm_images(model, x, labels, AttackConfig(0.0, (0.0, 1.0)))
    assert same.tobytes() == x.tobytes()

    data = synth_dataset(1200, 1, 10, 10, 4, 2.0, seed=3)
    train, test = data.take(slice(0, 1000)), data.take(slice(1000, 1200))
    linear, _ = fit(build_model(linear_config((1, 10, 10), 4)), train,
                    TrainConfig(lr=5e-3, epochs=10, batch_size=32, val_fraction=0.0))
    W = linear.params["dense1.weight"].data.astype(np.float64)
    b = linear.params["dense1.bias"].data.astype(np.float64)

    def losses(images):
        z = images.reshape(len(images), -1).astype(np.float64) @ W + b
        z -= z.max(axis=1, keepdims=True)
        return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(z)), train.labels]

    adv = fgsm_images(linear, train.images, train.labels, AttackConfig(0.1, None))
    before, after = losses(train.images), losses(adv)
    assert np.all(after >= before), int(np.sum(after < before))
    assert np.mean(after - before) > 0


@criterion(4, "adversarial training: 2B mixed batches, duplicated labels, FGSM regenerated at current parameters")
def test_algorithm_structure():
    data = synth_dataset(200, 1, 12, 12, 4, 2.0, seed=4)
    seen = []
    cfg = AdvTrainConfig(TrainConfig(epochs=2, batch_size=20, val_fraction=0.0), epsilon=0.1, clip=None)
    model, _ = adversarial_fit(build_model(default_config((1, 12, 12), 4)), data, cfg, on_batch=seen.append)
    assert len(seen) == 2 * 10
    probe = build_model(model.config)
    prev_params = None
    for batch in seen:
        B = len(batch.ids)
        assert batch.x_mix.shape[0] == 2 * B and batch.y_mix.shape[0] == 2 * B
        assert np.array_equal(batch.y_mix[:B], batch.y_mix[B:])
        assert np.array_equal(batch.y_mix[:B].argmax(1), data.labels[batch.ids])
        assert np.array_equal(batch.x_mix[:B], batch.x) and np.array_equal(batch.x_mix[B:], batch.x_adv)
        probe.load_state(batch.params_before)
        expected = fgsm_images(probe, batch.x, data.labels[batch.ids], AttackConfig(0.1, None))
        assert np.array_equal(batch.x_adv, expected)
        if prev_params is not None:
            # parameters moved since the previous minibatch, so the attack was regenerated, not reused
            assert any(not np.array_equal(prev_params[k], batch.params_before[k]) for k in prev_params)
        prev_params = batch.params_before


SYNTH = SynthSpec(n_train=2000, n_test=1000, channels=1, size=16, classes=4, separation=2.0, seed=0)
SYNTH_TRAIN = TrainConfig(lr=1e-3, epochs=15, batch_size=32, seed=0, patience=5, val_fraction=0.1)


@criterion(5, "synthetic data: FGSM eps=0.1 costs >= 10 points, adversarial training gains >= 5, < 5 min")
def test_synthetic_robustness_story():
    start = time.perf_counter()
    train = load_split("synth", None, "train", synth=SYNTH)
    test = load_split("synth", None, "test", synth=SYNTH)
    result = run_pipeline(train, test, SYNTH_TRAIN, epsilon=0.1, seed=0)
    r = result.report
    print(r.summary())
    elapsed = time.perf_counter() - start
    assert r.reduction >= 0.10, r.summary()
    assert r.defended_attacked_acc - r.attacked_acc >= 0.05, r.summary()
    assert elapsed < 300, f"took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# real-data criteria

def _data_dir(name):
    if not DATA_ROOT:
        pytest.skip("ADVROBUST_DATA is not set; real datasets unavailable")
    path = Path(DATA_ROOT) / name
    if not path.is_dir():
        pytest.skip(f"{path} not found")
    return path


GRAY_TRAIN = TrainConfig(lr=1e-3, epochs=5, batch_size=64, seed=0, patience=2, val_fraction=0.1)
CIFAR_TRAIN = TrainConfig(lr=1e-3, epochs=20, batch_size=64, seed=0, patience=5, val_fraction=0.1)
BUDGET = 45 * 60


def _gray_pipeline(name):
    root = _data_dir(name)
    start = time.perf_counter()
    train = load_split(name, root, "train")
    test = load_split(name, root, "test", train.normalization)
    result = run_pipeline(train, test, GRAY_TRAIN, epsilon=0.1, seed=0)
    return result, time.perf_counter() - start


@pytest.fixture(scope="module")
def mnist_run():
    return _gray_pipeline("mnist")


@pytest.fixture(scope="module")
def fashion_run():
    return _gray_pipeline("fashion-mnist")


@pytest.mark.dataset
@criterion(6, "MNIST clean test accuracy >= 85% and within 5 points of 86.22%")
def test_mnist_clean(mnist_run):
    result, elapsed = mnist_run
    acc = 100 * result.report.clean_acc
    print(f"MNIST clean {acc:.2f}%")
    assert acc >= 85 and abs(acc - 86.22) <= 5
    assert elapsed < BUDGET


@pytest.mark.dataset
@criterion(7, "MNIST FGSM eps=0.1 reduces test accuracy by >= 15 points")
def test_mnist_attack(mnist_run):
    result, _ = mnist_run
    print(result.report.summary())
    assert 100 * result.report.reduction >= 15


@pytest.mark.dataset
@criterion(8, "MNIST adversarial training at eps=0.1 gives attacked accuracy >= 75%")
def test_mnist_defense(mnist_run):
    result, _ = mnist_run
    assert 100 * result.report.defended_attacked_acc >= 75


@pytest.mark.dataset
@criterion(9, "Fashion-MNIST: clean >= 82%, reduction >= 15 points, defended attacked >= 70%")
def test_fashion(fashion_run):
    result, elapsed = fashion_run
    r = result.report
    print(r.summary())
    assert 100 * r.clean_acc >= 82
    assert 100 * r.reduction >= 15
    assert 100 * r.defended_attacked_acc >= 70
    assert elapsed < BUDGET


@pytest.mark.dataset
@criterion(10, "CIFAR-10 (10k subset, <= 20 epochs): clean >= 55%, drop >= 10 at eps 0.03 and 0.1, half recovered")
def test_cifar():
    root = _data_dir("cifar10")
    start = time.perf_counter()
    raw = subset(load_raw("cifar10", root, "train"), 10000, seed=0)
    train = normalize(raw, "standardize")
    test = load_split("cifar10", root, "test", train.normalization)
    result = run_pipeline(train, test, CIFAR_TRAIN, epsilon=0.1, eval_epsilons=(0.03,), seed=0)
    elapsed = time.perf_counter() - start
    assert 100 * result.report.clean_acc >= 55
    for r in [result.report] + result.extra_reports:
        print(r.summary())
        assert 100 * r.reduction >= 10
        assert r.defended_attacked_acc - r.attacked_acc >= 0.5 * r.reduction
    assert elapsed < BUDGET
