"""Capsule layers: squash, routing-by-agreement, margin loss, class-weighted loss.

Capsule tensors are plain :class:`Tensor` objects whose last two axes are
``(num_capsules, capsule_dim)``; any leading axes are batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, UsageError
from .numerics import DTYPE, Tensor, as_tensor, make_op, relu, softmax

SQUASH_EPS = 1e-8
# largest squash factor; keeps float32 norms strictly below 1 for huge inputs
SQUASH_CAP = 1.0 - 2.0**-21
LENGTH_EPS = 1e-12
M_POS = 0.9
M_NEG = 0.1
LAMBDA_NEG = 0.5
ROUTING_ITERATIONS = 3


def squash(s: Tensor, axis: int = -1, eps: float = SQUASH_EPS) -> Tensor:
    """Rescale each capsule to norm ``|s|^2 / (1 + |s|^2)`` keeping its direction."""
    s = as_tensor(s)
    sq = (s * s).sum(axis=axis, keepdims=True)
    factor = sq / (sq + 1.0)
    factor = factor - relu(factor - SQUASH_CAP)
    scale = factor / (sq + eps).sqrt()
    return s * scale


def capsule_lengths(v: Tensor, eps: float = LENGTH_EPS) -> Tensor:
    v = as_tensor(v)
    return ((v * v).sum(axis=-1) + eps).sqrt()


@dataclass(frozen=True)
class CapsuleLayerSpec:
    in_capsules: int
    in_dim: int
    out_capsules: int
    out_dim: int
    routing_iterations: int = ROUTING_ITERATIONS
    share_transform_spatially: bool = False
    # number of capsule types sharing one transform; only used when sharing
    capsule_types: int = 1

    def __post_init__(self):
        for name in ("in_capsules", "in_dim", "out_capsules", "out_dim", "capsule_types"):
            if getattr(self, name) < 1:
                raise UsageError(f"CapsuleLayerSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.routing_iterations < 1:
            raise UsageError(f"routing_iterations must be >= 1, got {self.routing_iterations}")
        if self.share_transform_spatially and self.in_capsules % self.capsule_types:
            raise UsageError(
                f"{self.in_capsules} input capsules cannot be grouped into {self.capsule_types} types"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        lead = self.capsule_types if self.share_transform_spatially else self.in_capsules
        return (lead, self.out_capsules, self.in_dim, self.out_dim)

    @property
    def parameter_count(self) -> int:
        return int(np.prod(self.weight_shape))


def predict(u: Tensor, weights: Tensor, types: int) -> Tensor:
    """Prediction vectors ``u_hat[b, i, j] = u[b, i] @ W[type(i), j]``.

    ``u`` is ``(B, in_caps, in_dim)``; capsule ``i`` uses transform
    ``i % types``.  With ``types == in_caps`` every capsule has its own
    transforms.
    """
    u, weights = as_tensor(u), as_tensor(weights)
    b, n_in, d = u.shape
    t, j, d_w, e = weights.shape
    if d_w != d or t != types or n_in % types:
        raise DimensionError(f"capsule transforms {weights.shape} do not fit input capsules {u.shape}")
    p = n_in // types
    # (T, B*P, d) @ (T, d, J*e) -> (T, B*P, J*e)
    u_g = u.data.reshape(b * p, types, d).transpose(1, 0, 2)
    w_g = weights.data.transpose(0, 2, 1, 3).reshape(types, d, j * e)
    out = (u_g @ w_g).reshape(types, b, p, j, e).transpose(1, 2, 0, 3, 4).reshape(b, n_in, j, e)

    def backward(g):
        g_g = g.reshape(b, p, types, j * e).transpose(2, 0, 1, 3).reshape(types, b * p, j * e)
        gu = gw = None
        if u.requires_grad:
            gu = (g_g @ w_g.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(b, n_in, d)
        if weights.requires_grad:
            gw = (u_g.transpose(0, 2, 1) @ g_g).reshape(types, d, j, e).transpose(0, 2, 1, 3)
        return gu, gw

    return make_op(np.ascontiguousarray(out), (u, weights), backward)


def dynamic_routing(predictions: Tensor, iterations: int = ROUTING_ITERATIONS, return_couplings: bool = False):
    """Routing-by-agreement over predictions shaped ``(..., in_caps, out_caps, out_dim)``.

    The loop is unrolled on the tape, so gradients flow through every
    iteration.  With ``return_couplings`` the coupling coefficients of each
    iteration are returned as numpy arrays alongside the output capsules.
    """
    if iterations < 1:
        raise UsageError(f"routing needs at least one iteration, got {iterations}")
    u_hat = as_tensor(predictions)
    if u_hat.ndim < 3:
        raise DimensionError(f"routing predictions need shape (..., in, out, dim), got {u_hat.shape}")
    lead = u_hat.shape[:-1]
    logits: Optional[Tensor] = None
    couplings = []
    v = None
    for it in range(iterations):
        if logits is None:
            c = Tensor._wrap(np.full(lead, 1.0 / lead[-1], dtype=DTYPE))
        else:
            c = softmax(logits, axis=-1)
        couplings.append(c.data.copy())
        s = (c.reshape(lead + (1,)) * u_hat).sum(axis=-3)
        v = squash(s)
        if it < iterations - 1:
            agreement = (u_hat * v.reshape(v.shape[:-2] + (1,) + v.shape[-2:])).sum(axis=-1)
            logits = agreement if logits is None else logits + agreement
    if return_couplings:
        return v, couplings
    return v


def capsule_layer(x: Tensor, spec: CapsuleLayerSpec, weights: Tensor) -> Tensor:
    """Transform input capsules and route them to ``spec.out_capsules`` outputs."""
    x, weights = as_tensor(x), as_tensor(weights)
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != (spec.in_capsules, spec.in_dim):
        raise DimensionError(
            f"capsule layer expects ({spec.in_capsules}, {spec.in_dim}) capsules, got {x.shape}"
        )
    if weights.shape != spec.weight_shape:
        raise DimensionError(f"capsule layer weights {weights.shape}, expected {spec.weight_shape}")
    types = spec.capsule_types if spec.share_transform_spatially else spec.in_capsules
    v = dynamic_routing(predict(x, weights, types), spec.routing_iterations)
    return v.reshape(v.shape[1:]) if single else v


def _check_one_hot(target: np.ndarray, n_classes: int) -> None:
    if target.shape[-1] != n_classes:
        raise UsageError(f"target has {target.shape[-1]} classes, capsules have {n_classes}")
    ok = np.isin(target, (0.0, 1.0)).all() and (target.sum(axis=-1) == 1).all()
    if not ok:
        raise UsageError("margin loss target must be one-hot")


def margin_loss(
    caps: Tensor,
    target,
    m_pos: float = M_POS,
    m_neg: float = M_NEG,
    lam: float = LAMBDA_NEG,
) -> Tensor:
    """Per-sample margin loss over class capsules ``(..., K, dim)``.

    Returns one value per leading index (a scalar for a single sample).
    """
    caps = as_tensor(caps)
    t = np.asarray(target, dtype=DTYPE)
    if t.shape != caps.shape[:-1]:
        raise UsageError(f"target shape {t.shape} does not match capsules {caps.shape}")
    _check_one_hot(t, caps.shape[-2])
    lengths = capsule_lengths(caps)
    present = relu(m_pos - lengths) ** 2
    absent = relu(lengths - m_neg) ** 2
    return (present * t + absent * (lam * (1.0 - t))).sum(axis=-1)


@dataclass(frozen=True)
class ClassWeights:
    """Whole-training-set class counts for the imbalance-corrected loss."""

    n_pos: int
    n_neg: int

    def __post_init__(self):
        if self.n_pos < 1 or self.n_neg < 1:
            raise UsageError(f"class counts must both be >= 1, got n_pos={self.n_pos}, n_neg={self.n_neg}")

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "ClassWeights":
        labels = np.asarray(labels).astype(bool)
        return cls(int(labels.sum()), int((~labels).sum()))

    @property
    def positive_weight(self) -> float:
        # the rarer class gets the larger weight
        return self.n_neg / (self.n_pos + self.n_neg)

    @property
    def negative_weight(self) -> float:
        return self.n_pos / (self.n_pos + self.n_neg)


def weighted_loss(batch_losses: Tensor, batch_labels, cw: ClassWeights) -> Tensor:
    """Combine per-class batch means with the dataset-level class weights.

    ``loss = w_pos * mean(pos losses) + w_neg * mean(neg losses)``; a class
    absent from the batch contributes nothing.
    """
    batch_losses = as_tensor(batch_losses)
    labels = np.asarray(batch_labels).astype(bool).reshape(-1)
    if labels.size == 0:
        raise UsageError("weighted_loss needs a non-empty batch")
    if batch_losses.shape != labels.shape:
        raise DimensionError(f"{batch_losses.shape} losses for {labels.shape} labels")
    total = None
    for mask, weight in ((labels, cw.positive_weight), (~labels, cw.negative_weight)):
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        term = batch_losses[idx].mean() * weight
        total = term if total is None else total + term
    return total
