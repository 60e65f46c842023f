from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import DimensionError, OptimizerError
from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-4, **kwargs) -> "AdamState":
        return cls(
            lr=lr,
            first_moment=[np.zeros(p.shape, dtype=DTYPE) for p in params],
            second_moment=[np.zeros(p.shape, dtype=DTYPE) for p in params],
            **kwargs,
        )


def adam_step(params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]], state: AdamState) -> list[Tensor]:
    """One bias-corrected Adam update.

    ``grads`` defaults to each parameter's accumulated ``.grad`` (missing
    gradients count as zero).  Parameters get fresh data arrays, so arrays
    captured earlier (e.g. best-epoch snapshots) are never mutated.
    """
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    grads = [np.zeros(p.shape, dtype=DTYPE) if g is None else np.asarray(g, dtype=DTYPE) for p, g in zip(params, grads)]
    if len(grads) != len(params) or len(state.first_moment) != len(params):
        raise DimensionError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.first_moment)} moment buffers"
        )
    for i, (p, g, m) in enumerate(zip(params, grads, state.first_moment)):
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"adam_step: param {i} shape {p.shape}, grad {g.shape}, moment {m.shape}")
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {i} (shape {p.shape}); step refused")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.first_moment[i] + (1.0 - b1) * g
        v = b2 * state.second_moment[i] + (1.0 - b2) * (g * g)
        state.first_moment[i] = m.astype(DTYPE)
        state.second_moment[i] = v.astype(DTYPE)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(DTYPE)
    state.step_count = t
    return params


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
