import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sardet.tensor import (ConfigError, GraphError, ShapeError, Tensor, concat, conv2d, gelu, layer_norm,
                           log, matmul, mean, no_grad, pad, pixel_shuffle, pixel_unshuffle, roll, sigmoid,
                           softmax, softplus, take, tmax, tsum)
from sardet.tensor import core as C
from sardet.tensor.gradcheck import check_gradients, numeric_grad

TOL = 1e-4


def rnd(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


# finite-difference checks, one per differentiable op; arrays live in [-2, 2]
GRAD_CASES = {
    "add": (lambda a, b: tsum((a + b) * (a + b)), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: tsum((a - b) * a), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: tsum(a * b * a), [(2, 5), (2, 5)]),
    "div": (lambda a, b: tsum(a / (b * b + 1.0)), [(3, 3), (3, 3)]),
    "power": (lambda a: tsum(C.power(a * a + 0.5, 1.5)), [(4, 3)]),
    "exp": (lambda a: tsum(C.exp(a) * a), [(3, 3)]),
    "log": (lambda a: tsum(log(a * a + 0.3)), [(3, 4)]),
    "abs": (lambda a: tsum(C.tabs(a) * a), [(3, 4)]),
    "sigmoid": (lambda a: tsum(sigmoid(a) * a), [(3, 4)]),
    "softplus": (lambda a: tsum(softplus(a) * a), [(3, 4)]),
    "gelu": (lambda a: tsum(gelu(a) * a), [(3, 4)]),
    "sum_axis": (lambda a: tsum(tsum(a, axis=1) ** 2), [(3, 4)]),
    "mean_axis": (lambda a: tsum(C.broadcast_to(mean(a, axis=0, keepdims=True), (3, 4)) * a), [(3, 4)]),
    "max": (lambda a: tsum(tmax(a, axis=1) * 2.0), [(4, 5)]),
    "softmax": (lambda a: tsum(softmax(a, axis=-1) * Tensor(np.arange(12.0).reshape(3, 4))), [(3, 4)]),
    "layer_norm": (lambda a, w, b: tsum(layer_norm(a, w, b) * Tensor(np.linspace(-1, 1, 15).reshape(3, 5))),
                   [(3, 5), (5,), (5,)]),
    "matmul": (lambda a, b: tsum(matmul(a, b) * matmul(a, b)), [(3, 3), (3, 3)]),
    "batched_matmul": (lambda a, b: tsum(matmul(a, b) ** 2), [(2, 3, 4), (2, 4, 2)]),
    "reshape_transpose": (lambda a: tsum(a.reshape(4, 3).transpose(1, 0) * Tensor(np.arange(12.0).reshape(3, 4))),
                          [(3, 4)]),
    "getitem": (lambda a: tsum(a[1:, ::2] ** 2), [(3, 4)]),
    "take": (lambda a: tsum(take(a, np.array([2, 0, 2]), axis=0) ** 2), [(3, 4)]),
    "concat": (lambda a, b: tsum(concat([a, b], axis=1) ** 2 * 0.5), [(2, 3), (2, 2)]),
    "pad": (lambda a: tsum(pad(a, [(1, 0), (0, 2)]) * Tensor(np.arange(20.0).reshape(4, 5))), [(3, 3)]),
    "roll": (lambda a: tsum(roll(a, (1, -1), (0, 1)) * Tensor(np.arange(12.0).reshape(3, 4))), [(3, 4)]),
    "conv2d": (lambda x, w, b: tsum(conv2d(x, w, b, stride=1, padding=1) ** 2), [(1, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_stride": (lambda x, w: tsum(conv2d(x, w, None, stride=2) ** 2), [(2, 1, 4, 4), (2, 1, 2, 2)]),
    "pixel_shuffle": (lambda a: tsum(pixel_shuffle(a, 2) * Tensor(np.arange(32.0).reshape(1, 2, 4, 4))),
                      [(1, 8, 2, 2)]),
    "pixel_unshuffle": (lambda a: tsum(pixel_unshuffle(a, 2) * Tensor(np.arange(32.0).reshape(1, 8, 2, 2))),
                        [(1, 2, 4, 4)]),
    "broadcast": (lambda a: tsum(C.broadcast_to(a, (3, 4)) * Tensor(np.arange(12.0).reshape(3, 4))), [(1, 4)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients_match_finite_differences(name):
    fn, shapes = GRAD_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(3):
        arrays = [rnd(rng, *s) for s in shapes]
        assert check_gradients(fn, arrays) < TOL


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(5)

    def fn(x, w):
        h = gelu(matmul(x, w))
        return mean(softmax(h, axis=-1) * sigmoid(h)) + tsum(log(h * h + 1.0))

    for _ in range(5):
        assert check_gradients(fn, [rnd(rng, 4, 3), rnd(rng, 3, 5)]) < TOL


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(matmul(eye, eye).data, np.eye(2))
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_conv2d_examples():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 4)).astype(np.float32)
    ident = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(ident)).data, x)


def test_conv2d_non_integral_output_is_config_error():
    with pytest.raises(ConfigError):
        conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))), stride=2)
    with pytest.raises(ConfigError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_against_scipy_correlate():
    from scipy.signal import correlate2d

    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((1, 1, 7, 6)), rng.standard_normal((1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(w)).data[0, 0]
    np.testing.assert_allclose(out, correlate2d(x[0, 0], w[0, 0], mode="valid"), rtol=1e-10)


def test_pixel_shuffle_examples():
    x = np.arange(4.0).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(pixel_shuffle(Tensor(x), 2).data, [[[[0.0, 1.0], [2.0, 3.0]]]])
    y = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    np.testing.assert_array_equal(pixel_shuffle(Tensor(y), 1).data, y)
    with pytest.raises(ConfigError):
        pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2))), 2)


@settings(max_examples=40, deadline=None)
@given(b=st.integers(1, 2), c=st.integers(1, 3), r=st.integers(1, 4), h=st.integers(1, 4), w=st.integers(1, 4))
def test_pixel_shuffle_inverse_is_identity(b, c, r, h, w):
    x = np.random.default_rng(b * 1000 + c * 100 + r * 10 + h).standard_normal((b, c * r * r, h, w))
    out = pixel_shuffle(Tensor(x), r)
    assert out.shape == (b, c, h * r, w * r)
    np.testing.assert_array_equal(pixel_unshuffle(out, r).data, x)
    # a bijection on elements: same multiset of values
    np.testing.assert_array_equal(np.sort(out.data.ravel()), np.sort(x.ravel()))


def test_elementwise_examples():
    assert sigmoid(Tensor(np.zeros(1))).data[0] == pytest.approx(0.5)
    np.testing.assert_allclose(softmax(Tensor(np.full(7, 3.2)), axis=0).data, np.full(7, 1 / 7), rtol=1e-6)
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((2, 0))), axis=1)
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.zeros((2, 0))))


def test_backward_examples():
    x = Tensor(np.arange(5.0), requires_grad=True)
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(5))
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()
    loss = tsum(x * x)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_gradient_accumulates_across_uses():
    w = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    tsum(w * 3.0 + w * w).backward()
    np.testing.assert_allclose(w.grad, 3.0 + 2 * w.data)


def test_broadcasting_restricted_to_scalars():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3,)))
    out = Tensor(np.ones((2, 3))) + Tensor(np.array(2.0))
    np.testing.assert_array_equal(out.data, np.full((2, 3), 3.0))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = tsum(x * 2.0)
    assert not y.requires_grad


def test_float32_by_default_and_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 2))
    assert Tensor(a.astype(np.int32)).dtype == np.float32
    r1 = gelu(matmul(Tensor(a.astype(np.float32)), Tensor(b.astype(np.float32)))).data
    r2 = gelu(matmul(Tensor(a.astype(np.float32)), Tensor(b.astype(np.float32)))).data
    assert r1.dtype == np.float32
    assert r1.tobytes() == r2.tobytes()


def test_numeric_grad_of_quadratic():
    g = numeric_grad(lambda x: tsum(x * x), [np.array([1.0, -3.0])], 0)
    np.testing.assert_allclose(g, [2.0, -6.0], rtol=1e-8)
