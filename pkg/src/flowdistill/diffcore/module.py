"""Parameter containers and the handful of layers the networks use."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Attribute-based parameter registry.

    Parameters and submodules are discovered from instance attributes in
    assignment order, so names are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for name, p in self.named_parameters():
            p.name = name
            out[name] = p
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != tuple(arr.shape):
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        std = (1.0 / np.sqrt(d_in)) if std is None else std
        self.weight = Parameter((rng.standard_normal((d_in, d_out)) * std).astype(np.float32))
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3):
        std = 1.0 / np.sqrt(c_in * kernel)
        self.weight = Parameter((rng.standard_normal((kernel, c_in, c_out)) * std).astype(np.float32))
        self.bias = Parameter(np.zeros(c_out, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.conv1d(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim, np.float32))
        self.beta = Parameter(np.zeros(dim, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))
