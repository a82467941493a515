"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor, no_grad


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and numeric gradient of scalar f.

    Runs in float64 regardless of the input dtype. When ``max_coords``
    is set, a seeded subset of coordinates is probed instead of all of
    them (large tensors; the analytic gradient is still full).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ConfigError(f"eps must be in [1e-6, 1e-3], got {eps}")
    base = x.data.astype(np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ConfigError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = probe.grad.reshape(-1).copy()

    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        coords = np.random.default_rng(seed).choice(flat.size, max_coords, replace=False)

    def eval_at(values: np.ndarray) -> float:
        with no_grad():
            return float(f(Tensor(values.reshape(base.shape))).data)

    worst = 0.0
    for i in coords:
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = eval_at(bumped)
        bumped[i] = flat[i] - eps
        lo = eval_at(bumped)
        numeric = (hi - lo) / (2.0 * eps)
        scale = max(abs(analytic[i]) + abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / scale)
    return worst
