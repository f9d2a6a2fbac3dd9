"""Central finite-difference checks for the autodiff tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import Tensor, no_grad


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor], probes: int = 5,
              h: float = 1e-4, rng: Rng | None = None, floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must be deterministic (re-seed any sampling inside it) and
    return a scalar. ``probes`` coordinates are drawn per input tensor.
    """
    rng = rng or Rng(0, "gradcheck")
    for t in inputs:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, g in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for idx in rng.integers(0, flat.size, size=probes):
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + h
                up = loss_fn().item()
                flat[idx] = orig - h
                down = loss_fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(g.reshape(-1)[idx]), numeric, floor))
    return worst
