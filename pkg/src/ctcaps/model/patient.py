"""Patient-level head: max-pool aggregation and the fully connected classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DimensionError, UsageError
from ..numerics import DTYPE, Tensor, as_tensor, dense, log_softmax, relu, softmax, stack

FEATURE_SHAPE = (32, 16)
LAYER_SIZES = (512, 256, 128, 32, 2)


def aggregate_patient(feature_maps: Sequence) -> Tensor:
    """Element-wise maximum over a patient's per-slice feature maps."""
    if len(feature_maps) == 0:
        raise UsageError("cannot aggregate a patient with no slices")
    return stack([as_tensor(m) for m in feature_maps], axis=0).max(axis=0)


@dataclass
class PatientClassifierParams:
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def layer_sizes(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def snapshot(self) -> "PatientClassifierParams":
        return PatientClassifierParams(
            [Tensor(w.data, requires_grad=w.requires_grad) for w in self.weights],
            [Tensor(b.data, requires_grad=b.requires_grad) for b in self.biases],
        )


def build_patient_classifier(seed: int = 0, sizes: Sequence[int] = LAYER_SIZES) -> PatientClassifierParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor._wrap(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(DTYPE), True))
        biases.append(Tensor._wrap(np.zeros(fan_out, dtype=DTYPE), True))
    return PatientClassifierParams(weights, biases)


def patient_logits(params: PatientClassifierParams, features) -> Tensor:
    """Logits for a batch of feature maps ``(B, 32, 16)`` (or already flat ``(B, 512)``)."""
    x = as_tensor(features)
    if x.ndim == 3:
        x = x.reshape(x.shape[0], -1)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise DimensionError(f"patient classifier expects {FEATURE_SHAPE} feature maps, got {features.shape}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = dense(x, w, b)
        if i < last:
            x = relu(x)
    return x


def patient_forward(params: PatientClassifierParams, fm) -> tuple[float, float]:
    """Probability pair ``(p_noncovid, p_covid)`` for one 32x16 patient feature map."""
    fm = as_tensor(fm)
    if fm.shape != FEATURE_SHAPE:
        raise DimensionError(f"patient feature map must be {FEATURE_SHAPE}, got {fm.shape}")
    probs = softmax(patient_logits(params, fm.reshape(1, *FEATURE_SHAPE)), axis=-1).data[0]
    return float(probs[0]), float(probs[1])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; every sample counts equally regardless of class."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    logp = log_softmax(logits, axis=-1)
    if labels.shape[0] != logp.shape[0]:
        raise DimensionError(f"{logp.shape[0]} logits rows for {labels.shape[0]} labels")
    picked = logp[np.arange(labels.shape[0]), labels]
    return -picked.mean()
