"""Eager dense tensors with a reverse-mode tape.

Forward values are computed immediately. When a :class:`Graph` is active,
every op whose inputs need gradients is appended to the graph's node list;
creation order is a valid topological order, so ``Graph.backward`` simply
walks the list in reverse.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "GraphConsumedError",
    "record_op",
    "OP_KINDS",
    "precision",
    "default_dtype",
    "as_tensor",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphConsumedError(RuntimeError):
    pass


_state = threading.local()


def _graph_stack() -> list:
    stack = getattr(_state, "graphs", None)
    if stack is None:
        stack = _state.graphs = []
    return stack


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Set the dtype used for tensors created from raw arrays."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; everything routes through record_op
    def __add__(self, other):
        return record_op("add", [self, as_tensor(other)])

    def __sub__(self, other):
        return record_op("sub", [self, as_tensor(other)])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return record_op("scale", [self], factor=float(other))
        return record_op("mul", [self, as_tensor(other)])

    __rmul__ = __mul__

    def __neg__(self):
        return record_op("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return record_op("matmul", [self, as_tensor(other)])

    def __getitem__(self, index):
        return record_op("slice", [self], index=index)


class Parameter(Tensor):
    """A named leaf that always requires gradients."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    out: Tensor
    inputs: list
    backward: Callable


class Graph:
    """Recording context. Use as ``with Graph() as g: ...; g.backward(loss)``."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Parameter] = {}
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise GraphConsumedError("cannot re-enter a consumed graph")
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()
        return False

    def _record(self, node: Node):
        self.nodes.append(node)
        for x in node.inputs:
            if isinstance(x, Parameter):
                key = x.name if x.name is not None else f"param{id(x)}"
                self.parameters.setdefault(key, x)

    def backward(self, loss: Tensor, params=None) -> dict[str, np.ndarray]:
        """Return gradients of ``loss`` keyed by parameter name.

        Without ``params`` every recorded parameter is reported under its own
        name. With ``params`` (a name -> Parameter mapping) exactly those
        parameters are reported under the given keys, with zeros for any the
        loss never touched.
        """
        if self._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward()")
        if loss.data.size != 1 or loss.ndim != 0:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for x, gx in zip(node.inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                prev = grads.get(id(x))
                grads[id(x)] = gx if prev is None else prev + gx
        source = self.parameters if params is None else params
        out = {}
        for name, p in source.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False)
        self.nodes = []
        return out


# ---------------------------------------------------------------------------
# op kernels: each returns (forward value, backward(g) -> list of input grads)


def _shape_err(kind, a, b, why=""):
    msg = f"{kind}: incompatible shapes {tuple(a)} and {tuple(b)}"
    return ShapeError(msg + (f" ({why})" if why else ""))


def _matmul(a, b):
    A, B = a.data, b.data
    if A.ndim < 1 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise _shape_err("matmul", A.shape, B.shape)
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise _shape_err("matmul", A.shape, B.shape, "batch dims differ")
    out = A @ B

    def back(g):
        if B.ndim == 2:
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(B, -1, -2)
            gb = np.swapaxes(A, -1, -2) @ g
        return [ga, gb]

    return out, back


def _add(a, b):
    A, B = a.data, b.data
    if A.shape == B.shape:
        return A + B, lambda g: [g, g]
    if B.ndim == 1 and A.ndim >= 1 and A.shape[-1] == B.shape[0]:
        n = B.shape[0]
        return A + B, lambda g: [g, g.reshape(-1, n).sum(axis=0)]
    raise _shape_err("add", A.shape, B.shape, "only equal shapes or last-dim bias")


def _sub(a, b):
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise _shape_err("sub", A.shape, B.shape)
    return A - B, lambda g: [g, -g]


def _mul(a, b):
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise _shape_err("elementwise-mul", A.shape, B.shape)
    return A * B, lambda g: [g * B, g * A]


def _scale(a, factor):
    return a.data * a.data.dtype.type(factor), lambda g: [g * g.dtype.type(factor)]


def _sum(a, axis=None):
    A = a.data

    def back(g):
        if axis is None:
            return [np.broadcast_to(g, A.shape).copy()]
        return [np.broadcast_to(np.expand_dims(g, axis), A.shape).copy()]

    return np.asarray(A.sum(axis=axis)), back


def _mean(a, axis=None):
    A = a.data
    n = A.size if axis is None else A.shape[axis]
    inv = A.dtype.type(1.0 / n)

    def back(g):
        g = g * inv
        if axis is None:
            return [np.broadcast_to(g, A.shape).copy()]
        return [np.broadcast_to(np.expand_dims(g, axis), A.shape).copy()]

    return np.asarray(A.mean(axis=axis)), back


def _concat(*xs, axis=-1):
    arrays = [x.data for x in xs]
    ref = list(arrays[0].shape)
    ax = axis % len(ref)
    for arr in arrays[1:]:
        other = list(arr.shape)
        if len(other) != len(ref) or any(
            o != r for i, (o, r) in enumerate(zip(other, ref)) if i != ax
        ):
            raise _shape_err("concat", ref, other)
    out = np.concatenate(arrays, axis=ax)
    splits = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]

    def back(g):
        return list(np.split(g, splits, axis=ax))

    return out, back


def _slice(a, index):
    A = a.data
    out = A[index]
    if np.shares_memory(out, A):
        out = out.copy()

    def back(g):
        full = np.zeros_like(A)
        full[index] = g
        return [full]

    return out, back


def _transpose(a, axes=None):
    A = a.data
    if axes is None:
        if A.ndim < 2:
            raise ShapeError(f"transpose: need rank >= 2, got shape {A.shape}")
        axes = list(range(A.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    inv = np.argsort(axes)
    return np.ascontiguousarray(A.transpose(axes)), lambda g: [g.transpose(inv)]


def _reshape(a, shape):
    A = a.data
    try:
        out = A.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {A.shape} into {tuple(shape)}") from None
    return out, lambda g: [g.reshape(A.shape)]


def _relu(a):
    A = a.data
    mask = A > 0
    return A * mask, lambda g: [g * mask]


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(a):
    # tanh approximation
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    inner = c * (x + k * x * x * x)
    th = np.tanh(inner)
    out = half * x * (1 + th)

    def back(g):
        dinner = c * (1 + 3 * k * x * x)
        d = half * (1 + th) + half * x * (1 - th * th) * dinner
        return [g * d]

    return out, back


def _tanh(a):
    out = np.tanh(a.data)
    return out, lambda g: [g * (1 - out * out)]


def _softmax(a):
    A = a.data
    z = A - A.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        s = (g * out).sum(axis=-1, keepdims=True)
        return [out * (g - s)]

    return out, back


def _layernorm(x, gamma, beta, eps=1e-5):
    X, G, B = x.data, gamma.data, beta.data
    n = X.shape[-1]
    if G.shape != (n,) or B.shape != (n,):
        raise _shape_err("layernorm", X.shape, G.shape, "gamma/beta must match last dim")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + X.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * G + B

    def back(g):
        gg = (g * xhat).reshape(-1, n).sum(axis=0)
        gb = g.reshape(-1, n).sum(axis=0)
        gx_hat = g * G
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return [gx, gg, gb]

    return out, back


def _squared_error(a, b):
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise _shape_err("squared-error", A.shape, B.shape)
    diff = A - B
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=A.dtype)

    def back(g):
        ga = diff * (g * A.dtype.type(2.0 / n))
        return [ga, -ga]

    return out, back


def _conv1d(x, w):
    # x: (B, L, Cin), w: (k, Cin, Cout); "same" padding, stride 1
    X, W = x.data, w.data
    if X.ndim != 3 or W.ndim != 3 or X.shape[2] != W.shape[1] or W.shape[0] % 2 == 0:
        raise _shape_err("conv1d", X.shape, W.shape, "expects (B,L,Cin) and odd (k,Cin,Cout)")
    Bn, L, Cin = X.shape
    k, _, Cout = W.shape
    p = k // 2
    Xp = np.zeros((Bn, L + 2 * p, Cin), dtype=X.dtype)
    Xp[:, p : p + L] = X
    cols = np.concatenate([Xp[:, j : j + L] for j in range(k)], axis=2)
    W2 = W.reshape(k * Cin, Cout)
    out = cols.reshape(-1, k * Cin) @ W2

    def back(g):
        g2 = g.reshape(-1, Cout)
        gw = (cols.reshape(-1, k * Cin).T @ g2).reshape(W.shape)
        gcols = (g2 @ W2.T).reshape(Bn, L, k, Cin)
        gxp = np.zeros_like(Xp)
        for j in range(k):
            gxp[:, j : j + L] += gcols[:, :, j]
        return [gxp[:, p : p + L], gw]

    return out.reshape(Bn, L, Cout), back


def _film(x, scale, shift):
    # x: (B, L, C); scale, shift: (B, C) -> x * (1 + scale) + shift, broadcast over L
    X, S, T = x.data, scale.data, shift.data
    if X.ndim != 3 or S.shape != (X.shape[0], X.shape[2]) or T.shape != S.shape:
        raise _shape_err("film", X.shape, S.shape, "scale/shift must be (B, C)")
    s1 = (1 + S)[:, None, :]
    out = X * s1 + T[:, None, :]
    return out, lambda g: [g * s1, (g * X).sum(axis=1), g.sum(axis=1)]


def _max(a, axis):
    A = a.data
    idx = A.argmax(axis=axis)
    out = np.take_along_axis(A, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(A)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return [full]

    return out, back


def _take(a, indices):
    A = a.data
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= A.shape[0]):
        raise ShapeError(f"take: index out of range for axis-0 size {A.shape[0]}")
    out = A[idx]

    def back(g):
        full = np.zeros_like(A)
        np.add.at(full, idx, g)
        return [full]

    return out, back


_KERNELS: dict[str, Callable] = {
    "matmul": _matmul,
    "add": _add,
    "sub": _sub,
    "elementwise-mul": _mul,
    "mul": _mul,
    "scalar-scale": _scale,
    "scale": _scale,
    "sum": _sum,
    "mean": _mean,
    "concat": _concat,
    "slice": _slice,
    "transpose": _transpose,
    "reshape": _reshape,
    "relu": _relu,
    "gelu": _gelu,
    "tanh": _tanh,
    "softmax-lastdim": _softmax,
    "softmax": _softmax,
    "layernorm": _layernorm,
    "squared-error": _squared_error,
    "conv1d": _conv1d,
    "film": _film,
    "max": _max,
    "take": _take,
}

OP_KINDS = frozenset(_KERNELS)

check_finite = True


def record_op(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate op ``kind`` eagerly and append it to the active graph."""
    try:
        kernel = _KERNELS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    inputs = [as_tensor(x) for x in inputs]
    value, back = kernel(*inputs, **attrs)
    # 0-d results come back as numpy scalars; keep their dtype
    value = np.asarray(value)
    if check_finite and not np.isfinite(value.sum()):
        raise NonFiniteError(f"{kind}: produced non-finite values")
    needs_grad = any(x.requires_grad for x in inputs)
    out = Tensor(value, requires_grad=needs_grad)
    stack = _graph_stack()
    if needs_grad and stack:
        stack[-1]._record(Node(kind, out, inputs, back))
    return out
