import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mscnn.layers import (
    BatchNorm,
    Conv2d,
    Linear,
    batchnorm,
    conv2d,
    dropout,
    linear,
    log_softmax,
    maxpool2d,
    relu,
    softmax,
)
from mscnn.tensor import ShapeError, Tape, Tensor, backward, gradcheck

from .conftest import SEEDS


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- conv ---------------------------------------------------------------------


def test_conv_all_ones_counts_neighbours():
    out = conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], dtype=float)
    assert np.array_equal(out.data[0, 0], expected)


def test_conv_stride_two_shape():
    conv = Conv2d(1, 32, 3, 2, np.random.default_rng(0))
    assert conv(Tensor(np.zeros((1, 1, 32, 32)))).shape == (1, 32, 16, 16)


def _conv_reference(x, w, b, stride):
    # direct loops: independent of the im2col path
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = -(-h // stride), -(-wd // stride)
    out = np.zeros((bsz, o, oh, ow))
    for n in range(bsz):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, f, i, j] = (patch * w[f]).sum() + b[f]
    return out


@settings(max_examples=25, deadline=None)
@given(
    k=st.sampled_from([3, 5, 7]),
    stride=st.integers(1, 2),
    h=st.integers(1, 9),
    w=st.integers(1, 9),
    c=st.integers(1, 3),
    seed=st.integers(0, 1000),
)
def test_conv_matches_direct_loops(k, stride, h, w, c, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, c, h, w))
    wt = rng.normal(size=(2, c, k, k))
    b = rng.normal(size=2)
    out = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride)
    assert out.shape == (2, 2, -(-h // stride), -(-w // stride))
    np.testing.assert_allclose(out.data, _conv_reference(x, wt, b, stride), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("k,stride", [(3, 1), (5, 2), (7, 1)])
def test_conv_gradcheck(seed, k, stride):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(1, 1, 6, 6)))
    w = leaf(rng.normal(size=(2, 1, k, k)))
    b = leaf(rng.normal(size=2))
    gradcheck(lambda x, w, b: conv2d(x, w, b, stride), [x, w, b])


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 1, 0, 4))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        Conv2d(1, 1, 4, 1, np.random.default_rng(0))


# -- pooling ------------------------------------------------------------------


def test_maxpool_examples():
    assert maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 4.0
    assert maxpool2d(Tensor(np.zeros((1, 1, 16, 16)))).shape == (1, 1, 8, 8)


def test_maxpool_tie_routes_to_first():
    x = leaf(np.ones((1, 1, 2, 2)))
    with Tape() as tape:
        loss = maxpool2d(x).sum()
    backward(tape, loss)
    expected = np.zeros((2, 2))
    expected[0, 0] = 1.0  # first in scan order
    assert np.array_equal(x.grad[0, 0], expected)


def test_maxpool_odd_extent():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    out = maxpool2d(x)
    assert out.shape == (1, 1, 2, 2)
    assert out.data[0, 0].tolist() == [[4.0, 5.0], [7.0, 8.0]]


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradcheck(seed):
    x = leaf(np.random.default_rng(seed).normal(size=(2, 2, 5, 4)))
    gradcheck(maxpool2d, [x])


# -- batchnorm ----------------------------------------------------------------


def _bn_state(c):
    return leaf(np.ones(c)), leaf(np.zeros(c)), np.zeros(c), np.ones(c)


def test_batchnorm_examples():
    g, b, rm, rv = _bn_state(1)
    out = batchnorm(Tensor(np.full((4, 1), 3.0)), g, b, rm, rv, train=True)
    assert np.all(out.data == 0.0)
    out = batchnorm(Tensor([[0.0], [2.0]]), g, b, rm.copy(), rv.copy(), train=True, eps=1e-12)
    np.testing.assert_allclose(out.data[:, 0], [-1.0, 1.0], atol=1e-9)
    x = np.random.default_rng(0).normal(size=(5, 3))
    g, b, rm, rv = _bn_state(3)
    out = batchnorm(Tensor(x), g, b, rm, rv, train=False)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_running_stats_and_eval_purity():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=(8, 2, 3, 3))
    g, b, rm, rv = _bn_state(2)
    batchnorm(Tensor(x), g, b, rm, rv, train=True, momentum=0.1)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var, rtol=1e-12)
    assert np.all(rv >= 0)
    before = (rm.copy(), rv.copy())
    o1 = batchnorm(Tensor(x), g, b, rm, rv, train=False).data
    o2 = batchnorm(Tensor(x), g, b, rm, rv, train=False).data
    assert o1.tobytes() == o2.tobytes()
    assert np.array_equal(before[0], rm) and np.array_equal(before[1], rv)


def test_batchnorm_rejects_single_sample_in_train():
    g, b, rm, rv = _bn_state(2)
    with pytest.raises(ValueError):
        batchnorm(Tensor(np.ones((1, 2))), g, b, rm, rv, train=True)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shape", [(4, 3), (3, 2, 3, 3)])
@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradcheck(seed, shape, train):
    rng = np.random.default_rng(seed)
    c = shape[1]
    x = leaf(rng.normal(size=shape))
    g = leaf(rng.uniform(0.5, 1.5, size=c))
    b = leaf(rng.normal(size=c))
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2, size=c)
    # weighting the output keeps the sum from being constant in x
    wts = Tensor(rng.normal(size=shape))
    gradcheck(lambda x, g, b: batchnorm(x, g, b, rm.copy(), rv.copy(), train) * wts, [x, g, b])


# -- pointwise / dense --------------------------------------------------------


def test_relu_examples():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    x = Tensor(np.random.default_rng(0).normal(size=50))
    assert np.array_equal(relu(relu(x)).data, relu(x).data)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradcheck_away_from_zero(seed):
    v = np.random.default_rng(seed).normal(size=(4, 5))
    v[np.abs(v) < 0.1] = 0.5
    gradcheck(relu, [leaf(v)], rtol=1e-6)


def test_linear_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4)))
    assert np.array_equal(linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x.data)
    fc = Linear(7168, 3584, np.random.default_rng(0), dtype=np.float32)
    assert fc(Tensor(np.zeros((1, 7168)), dtype=np.float32)).shape == (1, 3584)
    with pytest.raises(ShapeError):
        linear(x, Tensor(np.eye(3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradcheck(seed):
    rng = np.random.default_rng(seed)
    gradcheck(linear, [leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2))), leaf(rng.normal(size=2))])


def test_dropout_modes():
    x = Tensor(np.random.default_rng(0).normal(size=100))
    assert dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert dropout(x, 0.5, False) is x
    for p in (-0.1, 1.0):
        with pytest.raises(ValueError):
            dropout(x, p, True, np.random.default_rng(0))


def test_dropout_statistics():
    x = Tensor(np.ones(10**6))
    out = dropout(x, 0.5, True, np.random.default_rng(7)).data
    kept = np.mean(out != 0)
    assert abs(kept - 0.5) < 0.01
    assert abs(out.mean() - 1.0) < 0.01


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout_gradcheck(seed):
    x = leaf(np.random.default_rng(seed).normal(size=(3, 4)))
    gradcheck(lambda x: dropout(x, 0.5, True, np.random.default_rng(seed)), [x])


def test_softmax_examples():
    s = softmax(Tensor(np.zeros((1, 10)))).data
    np.testing.assert_allclose(s, 0.1, rtol=1e-15)
    z = np.random.default_rng(0).normal(size=(6, 5)) * 30
    np.testing.assert_allclose(softmax(Tensor(z + 123.0)).data, softmax(Tensor(z)).data, rtol=1e-12)
    np.testing.assert_allclose(softmax(Tensor(z)).data.sum(1), 1.0, atol=1e-12)
    assert np.all(softmax(Tensor(z)).data > 0)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_and_log_softmax_gradcheck(seed):
    rng = np.random.default_rng(seed)
    z = leaf(rng.normal(size=(3, 4)))
    wts = Tensor(rng.normal(size=(3, 4)))
    gradcheck(lambda z: softmax(z) * wts, [z])
    gradcheck(lambda z: log_softmax(z) * wts, [z])


def test_he_normal_scale():
    fc = Linear(2000, 500, np.random.default_rng(0))
    assert abs(fc.weight.data.std() - np.sqrt(2 / 2000)) < 1e-3
    assert np.all(fc.bias.data == 0)
    bn = BatchNorm(4)
    assert np.all(bn.gamma.data == 1) and np.all(bn.beta.data == 0)
