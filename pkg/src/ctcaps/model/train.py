"""Training loops for both stages with best-validation-loss model selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..capsnet import ClassWeights, margin_loss, weighted_loss
from ..errors import DataError, UsageError
from ..fileio import PathLike, atomic_write_text
from ..numerics import AdamState, Tensor, adam_step, no_grad, zero_grad
from .patient import PatientClassifierParams, cross_entropy, patient_logits
from .slice_model import SliceModelParams, slice_forward

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    "slice": {"lr": 1e-4, "epochs": 100, "batch_size": 16},
    "patient": {"lr": 1e-3, "epochs": 500, "batch_size": 16},
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "slice"
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise UsageError(f"stage must be one of {sorted(STAGE_DEFAULTS)}, got {self.stage!r}")
        if not self.lr > 0 or self.batch_size < 1 or self.epochs < 0:
            raise UsageError(f"invalid training config {self}")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        """Stage defaults (Adam 1e-4/100 epochs for slices, 1e-3/500 for patients) plus overrides."""
        if stage not in STAGE_DEFAULTS:
            raise UsageError(f"stage must be one of {sorted(STAGE_DEFAULTS)}, got {stage!r}")
        values = dict(STAGE_DEFAULTS[stage])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(stage=stage, **values)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def history_csv(history: list[EpochRecord]) -> str:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r}" for r in history]
    return "\n".join(lines) + "\n"


def write_history(path: PathLike, history: list[EpochRecord]) -> None:
    atomic_write_text(path, history_csv(history))


@dataclass
class SliceDataset:
    """Slice images ``(N, S, S)`` with labels (1 = infection evident)."""

    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray


def _check_partitions(train_labels, val_labels) -> None:
    train_labels = np.asarray(train_labels)
    if len(val_labels) == 0:
        raise DataError("training needs a non-empty validation partition")
    if len(np.unique(train_labels)) < 2:
        raise UsageError("training partition must contain both classes")


def _one_hot(labels: np.ndarray, k: int = 2) -> np.ndarray:
    return np.eye(k, dtype=np.float32)[np.asarray(labels, dtype=np.int64)]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def slice_losses(params: SliceModelParams, images: np.ndarray, labels: np.ndarray, mode: str = "eval") -> Tensor:
    classes, _ = slice_forward(params, Tensor(images[:, None]), mode)
    return margin_loss(classes, _one_hot(labels))


def evaluate_slice_loss(params: SliceModelParams, images, labels, cw: ClassWeights, chunk: int = 64) -> float:
    with no_grad():
        parts = [
            slice_losses(params, images[i : i + chunk], labels[i : i + chunk]).data
            for i in range(0, len(images), chunk)
        ]
    losses = Tensor(np.concatenate(parts))
    return weighted_loss(losses, labels, cw).item()


def train_slice_model(
    params: SliceModelParams,
    dataset: SliceDataset,
    cfg: TrainConfig,
    cw: Optional[ClassWeights] = None,
) -> tuple[SliceModelParams, list[EpochRecord]]:
    """Adam on the class-weighted margin loss; returns the best-validation snapshot.

    ``cw`` defaults to the class counts of the training partition.  The
    input ``params`` are never modified.
    """
    train_y = np.asarray(dataset.train_labels, dtype=np.int64)
    val_y = np.asarray(dataset.val_labels, dtype=np.int64)
    _check_partitions(train_y, val_y)
    cw = ClassWeights.from_labels(train_y) if cw is None else cw
    if cfg.epochs == 0:
        return params, []

    work = params.snapshot()
    weights = work.parameters()
    state = AdamState.for_params(weights, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    images = np.asarray(dataset.train_images, dtype=np.float32)
    best, best_loss = work.snapshot(), np.inf
    history = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(images), cfg.batch_size, rng):
            loss = weighted_loss(slice_losses(work, images[idx], train_y[idx], "train"), train_y[idx], cw)
            zero_grad(weights)
            loss.backward()
            adam_step(weights, None, state)
            total += loss.item() * len(idx)
        val_loss = evaluate_slice_loss(work, dataset.val_images, val_y, cw)
        history.append(EpochRecord(epoch, total / len(images), val_loss))
        log.info("slice epoch %d train %.5f val %.5f", epoch, history[-1].train_loss, val_loss)
        if val_loss < best_loss:
            best, best_loss = work.snapshot(), val_loss
    zero_grad(best.parameters())
    return best, history


def train_patient_classifier(
    params: PatientClassifierParams,
    train_features: np.ndarray,
    train_labels,
    val_features: np.ndarray,
    val_labels,
    cfg: TrainConfig,
) -> tuple[PatientClassifierParams, list[EpochRecord]]:
    """Adam on unweighted cross-entropy over 32x16 patient feature maps (1 = COVID)."""
    train_y = np.asarray(train_labels, dtype=np.int64)
    val_y = np.asarray(val_labels, dtype=np.int64)
    _check_partitions(train_y, val_y)
    if cfg.epochs == 0:
        return params, []

    work = params.snapshot()
    weights = work.parameters()
    state = AdamState.for_params(weights, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    feats = np.asarray(train_features, dtype=np.float32)
    val_feats = Tensor(np.asarray(val_features, dtype=np.float32))
    best, best_loss = work.snapshot(), np.inf
    history = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(feats), cfg.batch_size, rng):
            loss = cross_entropy(patient_logits(work, Tensor(feats[idx])), train_y[idx])
            zero_grad(weights)
            loss.backward()
            adam_step(weights, None, state)
            total += loss.item() * len(idx)
        with no_grad():
            val_loss = cross_entropy(patient_logits(work, val_feats), val_y).item()
        history.append(EpochRecord(epoch, total / len(feats), val_loss))
        if val_loss < best_loss:
            best, best_loss = work.snapshot(), val_loss
    zero_grad(best.parameters())
    return best, history
