"""
Unit tests for the autodiff tensor engine.
"""

from __future__ import annotations

import os
import sys

import numpy as np
import pytest

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from Source import tensor_engine as te
from Source.errors import ValidationError
from Source.tensor_engine import Tensor, backward, gradient_check


def test_conv3d_output_shape() -> None:
    x = np.zeros((1, 1, 16, 16, 16))
    w = np.zeros((8, 1, 3, 3, 3))
    out = te.conv3d(x, w, stride=2, padding=1)
    assert out.shape == (1, 8, 8, 8, 8)
    assert te.conv_output_extent(16, 3, 2, 1) == 8


def test_conv3d_transpose_inverts_extent() -> None:
    x = np.zeros((1, 8, 8, 8, 8))
    w = np.zeros((8, 1, 3, 3, 3))
    out = te.conv3d_transpose(x, w, stride=2, padding=1, output_padding=1)
    assert out.shape == (1, 1, 16, 16, 16)


def test_exp_of_zero_is_one() -> None:
    assert np.array_equal(te.exp(np.zeros((2, 3))).data, np.ones((2, 3)))


def test_matmul_sum_matches_triple_loop() -> None:
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
    expected = sum(a[i, k] * b[k, j] for i in range(2) for j in range(2) for k in range(3))
    assert te.reduce_sum(te.matmul(a, b)).item() == pytest.approx(expected, abs=1e-12)


def test_shape_mismatch_names_primitive_and_shapes() -> None:
    with pytest.raises(ValidationError, match=r"add: incompatible shapes \(2, 3\) and \(4,\)"):
        te.add(np.zeros((2, 3)), np.zeros(4))
    with pytest.raises(ValidationError, match="matmul"):
        te.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValidationError, match="conv3d"):
        te.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))


def test_log_rejects_non_positive() -> None:
    with pytest.raises(ValidationError):
        te.log(np.array([1.0, 0.0]))


def test_backward_sum_of_squares() -> None:
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    grads = backward(te.reduce_sum(te.square(x)))
    assert np.array_equal(grads[x], np.array([2.0, 4.0, 6.0]))


def test_backward_constant_root_gives_zero_gradient() -> None:
    x = Tensor([1.0, 2.0], requires_grad=True)
    root = te.reduce_sum(Tensor([3.0, 4.0]))
    grads = backward(root, leaves=[x])
    assert np.array_equal(grads[x], np.zeros(2))


def test_backward_rejects_non_scalar_root() -> None:
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValidationError):
        backward(te.square(x))


def test_fan_out_accumulates() -> None:
    x = Tensor([1.5, -2.0], requires_grad=True)
    root = te.reduce_sum(te.add(te.mul(x, x), x))
    grads = backward(root)
    assert np.allclose(grads[x], 2 * x.data + 1, atol=1e-15)


def test_gradient_check_sigmoid() -> None:
    x = np.random.default_rng(1).standard_normal(32)
    assert gradient_check(lambda t: te.reduce_sum(te.sigmoid(t)), x) < 1e-4


def test_gradient_check_linear_is_tight() -> None:
    c = np.random.default_rng(2).standard_normal(10)
    assert gradient_check(lambda t: te.reduce_sum(te.mul(t, c)), np.ones(10)) < 1e-8


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: te.reduce_sum(te.exp(te.mul(t, 0.3))),
        lambda t: te.reduce_sum(te.log(te.add(te.square(t), 1.0))),
        lambda t: te.reduce_mean(te.leaky_relu(te.add(t, 0.05))),
        lambda t: te.reduce_sum(te.square(te.matmul(te.reshape(t, (3, 4)), np.arange(8.0).reshape(4, 2)))),
        lambda t: te.reduce_sum(te.square(te.transpose(te.reshape(t, (3, 4))))),
        lambda t: te.reduce_sum(te.square(te.concat([t, te.mul(t, 2.0)], axis=0))),
        lambda t: te.reduce_sum(te.square(te.gather(t, [0, 3, 3, 7]))),
        lambda t: te.reduce_sum(te.square(te.reduce_sum(te.reshape(t, (3, 4)), axis=1))),
        lambda t: te.reduce_sum(te.square(te.add_bias(te.reshape(t, (3, 4)), np.arange(4.0)))),
    ],
)
def test_gradient_check_primitives(fn) -> None:
    x = np.random.default_rng(3).standard_normal(12) + 0.1
    assert gradient_check(fn, x) < 1e-4


def test_gradient_check_conv3d_both_operands() -> None:
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 5, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    err_x = gradient_check(lambda t: te.reduce_sum(te.square(te.conv3d(t, w, stride=2, padding=1))), x)
    err_w = gradient_check(lambda t: te.reduce_sum(te.square(te.conv3d(x, t, stride=2, padding=1))), w)
    assert err_x < 1e-4 and err_w < 1e-4


def test_gradient_check_conv3d_transpose_both_operands() -> None:
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 3, 3, 3, 3))
    w = rng.standard_normal((3, 2, 3, 3, 3))

    def f_x(t: Tensor) -> Tensor:
        return te.reduce_sum(te.square(te.conv3d_transpose(t, w, stride=2, padding=1, output_padding=1)))

    def f_w(t: Tensor) -> Tensor:
        return te.reduce_sum(te.square(te.conv3d_transpose(x, t, stride=2, padding=1, output_padding=1)))

    assert gradient_check(f_x, x) < 1e-4
    assert gradient_check(f_w, w) < 1e-4


def test_conv_adjointness() -> None:
    rng = np.random.default_rng(6)
    w = rng.standard_normal((4, 2, 3, 3, 3))
    x = rng.standard_normal((2, 2, 8, 8, 8))
    y = rng.standard_normal((2, 4, 4, 4, 4))
    lhs = float(np.sum(te.conv3d(x, w, stride=2, padding=1).data * y))
    rhs = float(np.sum(x * te.conv3d_transpose(y, w, stride=2, padding=1, output_padding=1).data))
    assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), 1.0)


def test_backward_is_linear() -> None:
    rng = np.random.default_rng(7)
    base = rng.standard_normal(6)
    x = Tensor(base, requires_grad=True)

    def f(t: Tensor) -> Tensor:
        return te.reduce_sum(te.sigmoid(t))

    def g(t: Tensor) -> Tensor:
        return te.reduce_sum(te.square(t))

    combined = backward(te.add(te.mul(f(x), 2.5), te.mul(g(x), -0.5)))[x]
    separate = 2.5 * backward(f(x))[x] - 0.5 * backward(g(x))[x]
    assert np.allclose(combined, separate, atol=1e-10, rtol=0)


def test_backward_is_deterministic() -> None:
    rng = np.random.default_rng(8)
    x0 = rng.standard_normal((1, 1, 6, 6, 6))
    w0 = rng.standard_normal((2, 1, 3, 3, 3))

    def run():
        w = Tensor(w0, requires_grad=True)
        out = te.reduce_mean(te.square(te.leaky_relu(te.conv3d(x0, w, stride=2, padding=1))))
        return out.item(), backward(out)[w]

    (v1, g1), (v2, g2) = run(), run()
    assert v1 == v2
    assert np.array_equal(g1, g2)


def test_tensors_are_read_only() -> None:
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_constants_record_no_graph() -> None:
    out = te.add(Tensor([1.0]), Tensor([2.0]))
    assert out.is_leaf and not out.requires_grad
