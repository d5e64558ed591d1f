"""Functional wrappers around the primitives, plus a few composites."""

from __future__ import annotations

from typing import Sequence

from deepattrib.tensor import Tensor, apply_primitive

__all__ = [
    "matmul", "add", "sub", "scale", "relu", "tanh", "sigmoid", "softplus", "sqrt",
    "conv2d", "conv_transpose2d", "nearest_upsample2x", "resize_bilinear",
    "mean", "variance", "sum", "l2_norm_sq", "elementwise_mul", "concat", "reshape",
    "broadcast_to", "slice_", "instance_norm", "log_softmax",
    "linear", "channel_bias", "channel_affine", "l2_norm",
]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def scale(x: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", [x], {"factor": float(factor)})


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def softplus(x: Tensor) -> Tensor:
    return apply_primitive("softplus", [x])


def sqrt(x: Tensor) -> Tensor:
    return apply_primitive("sqrt", [x])


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return apply_primitive("conv2d", [x, w], {"stride": stride, "padding": padding})


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return apply_primitive("conv_transpose2d", [x, w], {"stride": stride, "padding": padding})


def nearest_upsample2x(x: Tensor) -> Tensor:
    return apply_primitive("nearest_upsample2x", [x])


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    if tuple(x.shape[2:]) == tuple(size):
        return x
    return apply_primitive("resize_bilinear", [x], {"size": tuple(size)})


def mean(x: Tensor, axis=None) -> Tensor:
    return apply_primitive("mean", [x], {"axis": axis})


def variance(x: Tensor, axis=None) -> Tensor:
    return apply_primitive("variance", [x], {"axis": axis})


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return apply_primitive("sum", [x], {"axis": axis})


def l2_norm_sq(x: Tensor, axis=None) -> Tensor:
    return apply_primitive("l2_norm_sq", [x], {"axis": axis})


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("elementwise_mul", [a, b])


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(xs), {"axis": axis})


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [x], {"shape": tuple(int(s) for s in shape)})


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    if tuple(x.shape) == tuple(shape):
        return x
    return apply_primitive("broadcast_to", [x], {"shape": tuple(int(s) for s in shape)})


def slice_(x: Tensor, spans: Sequence[tuple[int, int]]) -> Tensor:
    return apply_primitive("slice", [x], {"spans": tuple(tuple(s) for s in spans)})


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("instance_norm", [x], {"eps": eps})


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("log_softmax", [x], {"axis": axis})


# --- composites ---------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: (N, in), w: (in, out), b: (out,)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, broadcast_to(reshape(b, (1, b.shape[0])), y.shape))
    return y


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to an NCHW tensor."""
    return add(x, broadcast_to(reshape(b, (1, b.shape[0], 1, 1)), x.shape))


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """gamma * x + beta with per-sample, per-channel (N, C) coefficients."""
    n, c = gamma.shape
    g = broadcast_to(reshape(gamma, (n, c, 1, 1)), x.shape)
    b = broadcast_to(reshape(beta, (n, c, 1, 1)), x.shape)
    return add(elementwise_mul(g, x), b)


def l2_norm(x: Tensor, axis=None) -> Tensor:
    return sqrt(l2_norm_sq(x, axis=axis))
