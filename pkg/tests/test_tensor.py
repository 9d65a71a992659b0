import numpy as np
import pytest

from orientdetr import tensor as T
from orientdetr.tensor import DimensionError, Tensor

from gradcheck import check_gradients

TOL = 1e-6
rng = np.random.default_rng(7)


def away_from_zero(shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-3) * margin, x)


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 0.5),
    "matmul": lambda a, b: T.matmul(a.reshape(3, 4), b.reshape(4, 3)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert check_gradients(BINARY[name], a, b) <= TOL


def test_broadcast_gradients():
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))
    assert check_gradients(lambda x, y: x * y + y / (x * x + 1.0), a, b) <= TOL


UNARY = {
    "neg": (lambda x: -x, rng.normal(size=(3, 4))),
    "pow": (lambda x: x**3, rng.normal(size=(3, 4))),
    "relu": (T.relu, away_from_zero((3, 4))),
    "sigmoid": (T.sigmoid, 4 * rng.normal(size=(3, 4))),
    "tanh": (T.tanh, rng.normal(size=(3, 4))),
    "exp": (T.exp, rng.normal(size=(3, 4))),
    "log": (T.log, rng.uniform(0.5, 2.0, size=(3, 4))),
    "sqrt": (T.sqrt, rng.uniform(0.5, 2.0, size=(3, 4))),
    "sin": (T.sin, rng.normal(size=(3, 4))),
    "cos": (T.cos, rng.normal(size=(3, 4))),
    "abs": (T.absolute, away_from_zero((3, 4))),
    "clamp": (lambda x: T.clamp(x, -0.5, 0.5), np.array([-1.2, -0.3, 0.1, 0.45, 0.9])),
    "inverse_sigmoid": (T.inverse_sigmoid, rng.uniform(0.1, 0.9, size=(3, 4))),
    "wrap_angle": (T.wrap_angle, np.array([-4.0, -1.0, 0.3, 2.0, 5.0])),
    "softplus": (T.softplus, 5 * rng.normal(size=(3, 4))),
    "sum": (lambda x: x.sum(axis=1), rng.normal(size=(3, 4))),
    "mean": (lambda x: x.mean(axis=0, keepdims=True), rng.normal(size=(3, 4))),
    "reshape": (lambda x: x.reshape(4, 3) * x.reshape(4, 3), rng.normal(size=(3, 4))),
    "transpose": (lambda x: x.transpose(2, 0, 1) ** 2, rng.normal(size=(2, 3, 4))),
    "slice": (lambda x: x[1:, ::2] ** 2, rng.normal(size=(3, 4))),
    "fancy_index": (lambda x: x[np.array([0, 2, 0]), np.array([1, 1, 1])] ** 2, rng.normal(size=(3, 4))),
    "gather": (lambda x: T.gather(x, np.array([[0, 0, 3], [2, 1, 1], [3, 3, 3]]), axis=1) ** 2,
               rng.normal(size=(3, 4))),
    "softmax": (lambda x: T.softmax(x, axis=-1), rng.normal(size=(3, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn, x = UNARY[name]
    assert check_gradients(fn, x) <= TOL


def test_where_concat_stack_gradients():
    cond = rng.random((3, 4)) > 0.5
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert check_gradients(lambda x, y: T.where(cond, x * y, x - y), a, b) <= TOL
    assert check_gradients(lambda x, y: T.concat([x, y * y], axis=1), a, b) <= TOL
    assert check_gradients(lambda x, y: T.stack([x, y * x], axis=0), a, b) <= TOL


def test_linear_gradients():
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    assert check_gradients(T.linear, x, w, b) <= TOL
    assert check_gradients(lambda x, w: T.linear(x, w), x, w) <= TOL


def test_layer_norm_gradients():
    x = rng.normal(size=(2, 3, 6))
    gamma, beta = rng.normal(size=6), rng.normal(size=6)
    assert check_gradients(T.layer_norm, x, gamma, beta) <= TOL


@pytest.mark.parametrize("stride,padding,kernel", [(1, 0, (3, 3)), (2, 1, (3, 3)), (1, (0, 2), (1, 5))])
def test_conv2d_gradients(stride, padding, kernel):
    x = rng.normal(size=(2, 6, 6, 3))
    w = rng.normal(size=kernel + (3, 4))
    b = rng.normal(size=4)
    fn = lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=padding)  # noqa: E731
    assert check_gradients(fn, x, w, b) <= TOL


def test_conv2d_matches_direct_sum():
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    out = T.conv2d(x, w, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            patch = xp[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            assert np.allclose(out[0, i, j], np.einsum("hwc,hwco->o", patch, w))


def test_bilinear_sample_gradients():
    feat = rng.normal(size=(2, 4, 5, 3))
    # keep points off integer grid lines where the interpolant has kinks
    pts = rng.uniform(-1.5, 5.5, size=(2, 6, 2))
    pts = np.where(np.abs(pts - np.round(pts)) < 0.05, pts + 0.1, pts)
    assert check_gradients(T.bilinear_sample, feat, pts) <= TOL


def test_bilinear_sample_values():
    feat = np.arange(12, dtype=float).reshape(1, 3, 4, 1)
    pts = np.array([[[0.0, 0.0], [1.5, 0.5], [3.0, 2.0], [-1.0, 0.0], [3.5, 2.0]]])
    out = T.bilinear_sample(feat, pts).data[0, :, 0]
    # node (row i, col j) sits at x = j, y = i; outside corners read zero
    assert out[0] == 0.0
    assert out[1] == pytest.approx((1 + 2 + 5 + 6) / 4)
    assert out[2] == 11.0
    assert out[3] == 0.0
    assert out[4] == pytest.approx(11 * 0.5)


def test_backward_accumulates_through_shared_nodes():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x + x * 3.0
    y.sum().backward()
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_shape_errors_are_reported():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        T.linear(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(DimensionError):
        T.bilinear_sample(np.ones((1, 2, 2, 1)), np.ones((1, 3)))
    with pytest.raises(DimensionError):
        T.concat([np.ones((2, 3)), np.ones((3, 2))], axis=0)
