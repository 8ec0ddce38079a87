"""Functional wrappers over :func:`record_op`."""

from __future__ import annotations

from typing import Sequence

from .tensor import Tensor, record_op


def matmul(a, b) -> Tensor:
    return record_op("matmul", [a, b])


def add(a, b) -> Tensor:
    return record_op("add", [a, b])


def sub(a, b) -> Tensor:
    return record_op("sub", [a, b])


def mul(a, b) -> Tensor:
    return record_op("elementwise-mul", [a, b])


def scale(a, factor: float) -> Tensor:
    return record_op("scalar-scale", [a], factor=float(factor))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    return record_op("sum", [a], axis=axis)


def mean(a, axis: int | None = None) -> Tensor:
    return record_op("mean", [a], axis=axis)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    return record_op("concat", list(xs), axis=axis)


def slice(a, index) -> Tensor:  # noqa: A001
    return record_op("slice", [a], index=index)


def transpose(a, axes=None) -> Tensor:
    return record_op("transpose", [a], axes=axes)


def reshape(a, shape) -> Tensor:
    return record_op("reshape", [a], shape=tuple(shape))


def relu(a) -> Tensor:
    return record_op("relu", [a])


def gelu(a) -> Tensor:
    return record_op("gelu", [a])


def tanh(a) -> Tensor:
    return record_op("tanh", [a])


def softmax(a) -> Tensor:
    return record_op("softmax-lastdim", [a])


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return record_op("layernorm", [x, gamma, beta], eps=eps)


def squared_error(a, b) -> Tensor:
    """Mean of squared differences over all entries."""
    return record_op("squared-error", [a, b])


def conv1d(x, w) -> Tensor:
    return record_op("conv1d", [x, w])


def film(x, scale_, shift) -> Tensor:
    return record_op("film", [x, scale_, shift])


def max(a, axis: int) -> Tensor:  # noqa: A001
    return record_op("max", [a], axis=axis)


def take(a, indices) -> Tensor:
    return record_op("take", [a], indices=indices)
