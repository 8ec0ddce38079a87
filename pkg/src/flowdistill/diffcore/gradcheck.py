from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Graph, Parameter, Tensor


class NonDeterministicBuilderError(RuntimeError):
    pass


def finite_diff_check(
    builder: Callable[[], Tensor],
    params: Mapping[str, Parameter],
    eps: float = 1e-4,
    max_coords: int | None = 24,
    seed: int = 0,
) -> float:
    """Compare backward() against central differences.

    ``builder`` must rebuild the same scalar loss from the current parameter
    values on every call. For each named parameter the error is
    ``max|analytic - fd| / (max|fd| + 1e-12)`` over the probed coordinates;
    the worst parameter is returned. At most ``max_coords`` coordinates per
    parameter are probed (chosen by ``seed``); ``None`` probes all of them.
    """
    if not params:
        return 0.0
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"finite_diff_check needs float64 parameters; {name!r} is {p.dtype}")

    first = float(builder().data)
    second = float(builder().data)
    if first != second:
        raise NonDeterministicBuilderError(f"builder returned {first!r} then {second!r}")

    with Graph() as g:
        loss = builder()
    analytic = g.backward(loss, params=dict(params))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        ga = analytic[name].reshape(-1)[coords]
        fd = np.empty(len(coords))
        for i, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            up = float(builder().data)
            flat[c] = orig - eps
            down = float(builder().data)
            flat[c] = orig
            fd[i] = (up - down) / (2 * eps)
        err = np.abs(ga - fd).max() / (np.abs(fd).max() + 1e-12)
        worst = max(worst, float(err))
    return worst
