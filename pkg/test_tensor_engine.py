#!/usr/bin/env python3
"""
Test the tensor ops against central finite differences in float64
"""
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from image_core import ContractViolation, NonFiniteError
from tensor_engine import (
    ConvParams,
    Tensor,
    bilinear_resize_backward,
    bilinear_resize_tensor,
    concat,
    concat_backward,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    deconv2d_backward,
    deconv2d_forward,
    deconv_output_size,
    l1_loss,
    leaky_relu_backward,
    leaky_relu_forward,
)

EPS = 1e-6
TOLERANCE = 1e-4


def _numeric_grad(f, array):
    """Central differences of the scalar f() w.r.t. every entry of `array`, in place"""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        saved = array[idx]
        array[idx] = saved + EPS
        plus = f()
        array[idx] = saved - EPS
        minus = f()
        array[idx] = saved
        grad[idx] = (plus - minus) / (2 * EPS)
    return grad


def _relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / scale


def _params(rng, c_in, c_out, kernel, stride, pad, transposed=False):
    p = ConvParams.initialize(
        c_in, c_out, (kernel, kernel), stride, (pad, pad), rng,
        transposed=transposed, dtype=np.float64,
    )
    p.bias[:] = rng.normal(size=c_out)
    return p


@pytest.mark.parametrize(
    "kernel,stride,pad,size",
    [
        (4, 2, 1, 8),
        (3, 1, 1, 5),
        (8, 4, 2, 8),
        (4, 2, 1, 7),
        (4, 2, 1, 9),
        (16, 8, 4, 13),
    ],
)
def test_conv_gradients(kernel, stride, pad, size):
    """Odd sizes leave trailing rows and columns outside every window"""
    rng = np.random.default_rng(kernel * 10 + stride + size)
    x = Tensor(rng.normal(size=(2, 3, size, size + 2)))
    p = _params(rng, 3, 4, kernel, stride, pad)
    direction = rng.normal(size=conv2d_forward(x, p).shape)

    def f():
        return float((conv2d_forward(x, p).values * direction).sum())

    grad_x, grad_w, grad_b = conv2d_backward(x, p, direction)
    assert _relative_error(grad_x, _numeric_grad(f, x.values)) < TOLERANCE
    assert _relative_error(grad_w, _numeric_grad(f, p.weights)) < TOLERANCE
    assert _relative_error(grad_b, _numeric_grad(f, p.bias)) < TOLERANCE


@pytest.mark.parametrize("height,width", [(4, 5), (3, 7)])
def test_deconv_gradients(height, width):
    rng = np.random.default_rng(height * width)
    x = Tensor(rng.normal(size=(2, 3, height, width)))
    p = _params(rng, 3, 2, 4, 2, 1, transposed=True)
    out = deconv2d_forward(x, p)
    assert out.shape == (2, 2, 2 * height, 2 * width)
    direction = rng.normal(size=out.shape)

    def f():
        return float((deconv2d_forward(x, p).values * direction).sum())

    grad_x, grad_w, grad_b = deconv2d_backward(x, p, direction)
    assert _relative_error(grad_x, _numeric_grad(f, x.values)) < TOLERANCE
    assert _relative_error(grad_w, _numeric_grad(f, p.weights)) < TOLERANCE
    assert _relative_error(grad_b, _numeric_grad(f, p.bias)) < TOLERANCE


def test_deconv_is_adjoint_of_conv():
    rng = np.random.default_rng(4)
    conv = _params(rng, 3, 5, 4, 2, 1)
    conv.bias[:] = 0
    weights = conv.weights.transpose(1, 0, 2, 3).copy()
    deconv = ConvParams(5, 3, (4, 4), 2, (1, 1), weights, np.zeros(3))
    x = rng.normal(size=(1, 3, 8, 8))
    y = rng.normal(size=(1, 5, 4, 4))
    lhs = (conv2d_forward(Tensor(x), conv).values * y).sum()
    rhs = (x * deconv2d_forward(Tensor(y), deconv).values).sum()
    assert abs(lhs - rhs) < 1e-10


def test_leaky_relu_gradient():
    rng = np.random.default_rng(5)
    magnitude = rng.uniform(0.1, 1.0, size=(2, 3, 4, 4))
    x = Tensor(magnitude * rng.choice([-1.0, 1.0], size=magnitude.shape))
    direction = rng.normal(size=x.shape)

    def f():
        return float((leaky_relu_forward(x, 0.2).values * direction).sum())

    analytic = leaky_relu_backward(x, direction, 0.2)
    assert _relative_error(analytic, _numeric_grad(f, x.values)) < TOLERANCE


def test_leaky_relu_values():
    x = Tensor(np.array([-2.0, 0.0, 3.0]).reshape(1, 1, 1, 3))
    assert leaky_relu_forward(x, 0.1).values.ravel().tolist() == [-0.2, 0.0, 3.0]
    grad = leaky_relu_backward(x, np.ones((1, 1, 1, 3)), 0.1)
    assert grad.ravel().tolist() == [0.1, 0.1, 1.0]


def test_concat_and_split():
    rng = np.random.default_rng(6)
    a = Tensor(rng.normal(size=(2, 3, 4, 4)))
    b = Tensor(rng.normal(size=(2, 5, 4, 4)))
    joined = concat([a, b])
    assert joined.shape == (2, 8, 4, 4)
    grad = rng.normal(size=joined.shape)
    ga, gb = concat_backward(grad, [3, 5])
    assert np.array_equal(ga, grad[:, :3])
    assert np.array_equal(gb, grad[:, 3:])
    with pytest.raises(ContractViolation):
        concat([a, Tensor(np.zeros((2, 1, 3, 4)))])


@pytest.mark.parametrize("in_size,out_size", [((5, 7), (9, 4)), ((6, 6), (3, 3))])
def test_bilinear_resize_gradient(in_size, out_size):
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(1, 2) + in_size))
    direction = rng.normal(size=(1, 2) + out_size)

    def f():
        return float((bilinear_resize_tensor(x, out_size).values * direction).sum())

    analytic = bilinear_resize_backward(direction, in_size)
    assert analytic.shape == x.shape
    assert _relative_error(analytic, _numeric_grad(f, x.values)) < TOLERANCE


def test_bilinear_resize_identity_and_constant():
    x = Tensor(np.full((1, 2, 4, 6), 0.7))
    assert bilinear_resize_tensor(x, (4, 6)).values is x.values
    assert np.allclose(bilinear_resize_tensor(x, (7, 3)).values, 0.7)


def test_l1_loss_gradient():
    rng = np.random.default_rng(8)
    pred = Tensor(rng.normal(size=(2, 3, 4, 4)))
    magnitude = rng.uniform(0.1, 0.5, size=pred.shape)
    offset = magnitude * rng.choice([-1.0, 1.0], size=pred.shape)
    target = Tensor(pred.values + offset)
    loss, grad = l1_loss(pred, target)
    assert abs(loss - np.abs(offset).mean()) < 1e-12

    def f():
        return l1_loss(pred, target)[0]

    assert _relative_error(grad, _numeric_grad(f, pred.values)) < TOLERANCE
    with pytest.raises(ContractViolation):
        l1_loss(pred, Tensor(np.zeros((1, 3, 4, 4))))


def test_unit_kernel_is_identity():
    x = Tensor(np.random.default_rng(11).normal(size=(1, 1, 3, 4)))
    p = ConvParams(1, 1, (1, 1), 1, (0, 0), np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(conv2d_forward(x, p).values, x.values)


def test_output_size_formulas():
    assert conv_output_size(480, 4, 2, 1) == 240
    assert conv_output_size(800, 4, 2, 1) == 400
    assert conv_output_size(5, 3, 1, 1) == 5
    assert deconv_output_size(60, 4, 2, 1) == 120
    assert deconv_output_size(4, 4, 2, 1) == 8


def test_full_resolution_conv_shape():
    rng = np.random.default_rng(9)
    p = ConvParams.initialize(6, 16, (4, 4), 2, (1, 1), rng)
    x = Tensor(rng.random((1, 6, 480, 800), dtype=np.float32))
    out = conv2d_forward(x, p)
    assert out.shape == (1, 16, 240, 400)
    assert out.values.dtype == np.float32


def test_contract_violations():
    rng = np.random.default_rng(10)
    p = ConvParams.initialize(3, 4, (4, 4), 2, (1, 1), rng)
    with pytest.raises(ContractViolation):
        conv2d_forward(Tensor(np.zeros((1, 2, 8, 8), dtype=np.float32)), p)
    with pytest.raises(ContractViolation):
        conv2d_forward(Tensor(np.zeros((1, 3, 1, 1), dtype=np.float32)), p)
    with pytest.raises(ContractViolation):
        Tensor(np.zeros((3, 8, 8)))
    with pytest.raises(NonFiniteError):
        Tensor(np.full((1, 1, 2, 2), np.inf))
    with pytest.raises(ContractViolation):
        ConvParams(3, 4, (4, 4), 2, (1, 1), np.zeros((4, 3, 3, 3)), np.zeros(4))


def main():
    """Run this module's tests"""
    return pytest.main([__file__, "-q"])


if __name__ == "__main__":
    sys.exit(main())
