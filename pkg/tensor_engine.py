"""
Minimal differentiable tensor ops for the fusion networks.

Every op is a pair of plain functions: `*_forward` maps inputs to a Tensor,
`*_backward` maps the upstream gradient back to inputs (and parameters).
There is no graph; the networks call the backward functions in reverse order
themselves. Arrays are N x C x H x W. Ops run in the dtype they are given, so
float64 inputs give the high-precision mode used by gradient checks.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from image_core import ContractViolation, NonFiniteError, bilinear_matrix

LEAKY_SLOPE = 0.1


@dataclass
class Tensor:
    values: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ContractViolation(
                f"tensor must be N x C x H x W, got {self.values.shape}"
            )
        if self.grad is not None and self.grad.shape != self.values.shape:
            raise ContractViolation("gradient buffer shape differs from values")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("tensor contains non-finite values")

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)


@dataclass
class ConvParams:
    """Weights are out x in x kh x kw for both convolution and deconvolution"""

    in_channels: int
    out_channels: int
    kernel: Tuple[int, int]
    stride: int
    padding: Tuple[int, int]
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        kh, kw = self.kernel
        expected = (self.out_channels, self.in_channels, kh, kw)
        if self.weights.shape != expected:
            raise ContractViolation(f"weights shape {self.weights.shape} != {expected}")
        if self.bias.shape != (self.out_channels,):
            raise ContractViolation(
                f"bias shape {self.bias.shape} != ({self.out_channels},)"
            )
        if self.stride < 1:
            raise ContractViolation(f"stride must be positive, got {self.stride}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise NonFiniteError("convolution parameters contain non-finite values")

    @classmethod
    def initialize(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: Tuple[int, int],
        stride: int,
        padding: Tuple[int, int],
        rng: np.random.Generator,
        transposed: bool = False,
        dtype=np.float32,
    ) -> "ConvParams":
        """Uniform init with bound sqrt(6 / fan_in), zero bias.

        For a transposed convolution each output sees kh*kw/stride^2 taps
        per input channel, which is what fan_in counts.
        """
        kh, kw = kernel
        fan_in = in_channels * kh * kw
        if transposed:
            fan_in = max(1, fan_in // (stride * stride))
        bound = np.sqrt(6.0 / fan_in)
        weights = rng.uniform(-bound, bound, size=(out_channels, in_channels, kh, kw))
        return cls(
            in_channels=in_channels,
            out_channels=out_channels,
            kernel=(kh, kw),
            stride=stride,
            padding=tuple(padding),
            weights=weights.astype(dtype),
            bias=np.zeros(out_channels, dtype=dtype),
        )


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def _tap(values: np.ndarray, i: int, j: int, stride: int, out_hw) -> np.ndarray:
    """Strided slice of `values` seen by kernel tap (i, j)"""
    height, width = out_hw
    rows = slice(i, i + stride * height, stride)
    cols = slice(j, j + stride * width, stride)
    return values[:, :, rows, cols]


def _pad(values: np.ndarray, padding) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return values
    return np.pad(values, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _crop(values: np.ndarray, padding) -> np.ndarray:
    ph, pw = padding
    height, width = values.shape[2:]
    return values[:, :, ph : height - ph, pw : width - pw]


def conv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Accumulates one channel contraction per kernel tap"""
    n, c, height, width = x.shape
    if c != p.in_channels:
        raise ContractViolation(f"conv expects {p.in_channels} channels, got {c}")
    kh, kw = p.kernel
    ph, pw = p.padding
    out_hw = (
        conv_output_size(height, kh, p.stride, ph),
        conv_output_size(width, kw, p.stride, pw),
    )
    if out_hw[0] < 1 or out_hw[1] < 1:
        raise ContractViolation(
            f"input {height}x{width} too small for kernel {p.kernel}"
        )
    padded = _pad(x.values, p.padding)
    dtype = np.result_type(x.values, p.weights)
    out = np.zeros((n, p.out_channels) + out_hw, dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            tap = _tap(padded, i, j, p.stride, out_hw)
            out += np.einsum("nchw,oc->nohw", tap, p.weights[:, :, i, j])
    out += p.bias[None, :, None, None]
    return Tensor(out)


def conv2d_backward(
    x: Tensor, p: ConvParams, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, weights and bias"""
    if grad_out.shape[:2] != (x.shape[0], p.out_channels):
        raise ContractViolation(
            f"grad_out shape {grad_out.shape} does not match conv output"
        )
    padded = _pad(x.values, p.padding)
    out_hw = grad_out.shape[2:]
    grad_padded = np.zeros_like(padded, dtype=grad_out.dtype)
    grad_w = np.zeros_like(p.weights, dtype=grad_out.dtype)
    kh, kw = p.kernel
    for i in range(kh):
        for j in range(kw):
            grad_w[:, :, i, j] = np.einsum(
                "nohw,nchw->oc", grad_out, _tap(padded, i, j, p.stride, out_hw)
            )
            _tap(grad_padded, i, j, p.stride, out_hw)[...] += np.einsum(
                "nohw,oc->nchw", grad_out, p.weights[:, :, i, j]
            )
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return _crop(grad_padded, p.padding), grad_w, grad_b


def deconv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Transposed convolution: output size (H - 1) * s - 2 * pad + k"""
    n, c, height, width = x.shape
    if c != p.in_channels:
        raise ContractViolation(f"deconv expects {p.in_channels} channels, got {c}")
    kh, kw = p.kernel
    s = p.stride
    full = np.zeros(
        (n, p.out_channels, (height - 1) * s + kh, (width - 1) * s + kw),
        dtype=np.result_type(x.values, p.weights),
    )
    for i in range(kh):
        for j in range(kw):
            _tap(full, i, j, s, (height, width))[...] += np.einsum(
                "nchw,oc->nohw", x.values, p.weights[:, :, i, j]
            )
    out = _crop(full, p.padding)
    if out.shape[2] < 1 or out.shape[3] < 1:
        raise ContractViolation(f"deconv output empty for input {height}x{width}")
    return Tensor(np.ascontiguousarray(out + p.bias[None, :, None, None]))


def deconv2d_backward(
    x: Tensor, p: ConvParams, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The input gradient is a strided convolution of grad_out with the kernel"""
    height, width = x.shape[2:]
    padded = _pad(grad_out, p.padding)
    grad_x = np.zeros(x.shape, dtype=grad_out.dtype)
    grad_w = np.zeros_like(p.weights, dtype=grad_out.dtype)
    kh, kw = p.kernel
    for i in range(kh):
        for j in range(kw):
            tap = _tap(padded, i, j, p.stride, (height, width))
            grad_x += np.einsum("nohw,oc->nchw", tap, p.weights[:, :, i, j])
            grad_w[:, :, i, j] = np.einsum("nohw,nchw->oc", tap, x.values)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along channels"""
    if not xs:
        raise ContractViolation("concat needs at least one tensor")
    n, _, height, width = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (n, height, width):
            raise ContractViolation(
                f"concat shape mismatch: {x.shape} vs {xs[0].shape}"
            )
    if len(xs) == 1:
        return Tensor(xs[0].values)
    return Tensor(np.concatenate([x.values for x in xs], axis=1))


def concat_backward(grad_out: np.ndarray, channels: Sequence[int]) -> List[np.ndarray]:
    splits = np.cumsum(channels)[:-1]
    return np.split(grad_out, splits, axis=1)


def leaky_relu_forward(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    v = x.values
    return Tensor(np.where(v >= 0, v, v * v.dtype.type(slope)))


def leaky_relu_backward(
    x: Tensor, grad_out: np.ndarray, slope: float = LEAKY_SLOPE
) -> np.ndarray:
    """Slope is taken as the subgradient at zero"""
    v = x.values
    return np.where(v > 0, grad_out, grad_out * v.dtype.type(slope))


def l1_loss(pred: Tensor, target: Tensor) -> Tuple[float, np.ndarray]:
    """Mean absolute error and its gradient w.r.t. pred"""
    if pred.shape != target.shape:
        raise ContractViolation(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.values - target.values
    count = diff.size
    loss = float(np.abs(diff).sum(dtype=np.float64) / count)
    return loss, (np.sign(diff) / count).astype(pred.values.dtype)


def _resize_matrices(in_hw, out_hw, dtype):
    rows = bilinear_matrix(out_hw[0], in_hw[0], dtype)
    cols = bilinear_matrix(out_hw[1], in_hw[1], dtype)
    return rows, cols


def bilinear_resize_tensor(x: Tensor, size: Tuple[int, int]) -> Tensor:
    """Resize every channel to size = (h, w)"""
    if tuple(size) == x.shape[2:]:
        return Tensor(x.values)
    rows, cols = _resize_matrices(x.shape[2:], size, x.values.dtype)
    out = np.einsum("oh,nchw,pw->ncop", rows, x.values, cols, optimize=True)
    return Tensor(np.ascontiguousarray(out))


def bilinear_resize_backward(
    grad_out: np.ndarray, in_size: Tuple[int, int]
) -> np.ndarray:
    out_size = grad_out.shape[2:]
    if tuple(in_size) == tuple(out_size):
        return grad_out
    rows, cols = _resize_matrices(in_size, out_size, grad_out.dtype)
    grad = np.einsum("oh,ncop,pw->nchw", rows, grad_out, cols, optimize=True)
    return np.ascontiguousarray(grad)
