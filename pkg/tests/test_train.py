from __future__ import annotations

import numpy as np
import pytest

from ctcaps.errors import DataError, UsageError
from ctcaps.model import (
    SliceDataset,
    TrainConfig,
    build_patient_classifier,
    build_slice_model,
    cross_entropy,
    history_csv,
    patient_logits,
    train_patient_classifier,
    train_slice_model,
    write_history,
)
from ctcaps.model.train import evaluate_slice_loss
from ctcaps.capsnet import ClassWeights
from ctcaps.numerics import Tensor, no_grad


def _toy_slices(n_per_class=4, size=32, seed=0):
    """Bright square on the left half = class 1, on the right half = class 0."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label in (0, 1):
        for _ in range(n_per_class):
            img = rng.uniform(0, 0.1, (size, size))
            x0 = 2 if label else size // 2 + 2
            img[8:20, x0 : x0 + 10] = 0.9
            images.append(img)
            labels.append(label)
    return np.array(images, dtype=np.float32), np.array(labels)


def _slice_dataset(**kw):
    x, y = _toy_slices(**kw)
    return SliceDataset(x, y, x, y)


class TestConfig:
    def test_stage_defaults(self):
        assert TrainConfig.for_stage("slice") == TrainConfig("slice", 1e-4, 16, 100, 0)
        assert TrainConfig.for_stage("patient") == TrainConfig("patient", 1e-3, 16, 500, 0)

    def test_overrides(self):
        assert TrainConfig.for_stage("slice", lr=1e-3, epochs=None).epochs == 100

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(batch_size=0), dict(epochs=-1), dict(stage="x")])
    def test_invalid(self, kw):
        with pytest.raises(UsageError):
            TrainConfig(**kw)


class TestSliceTraining:
    def test_zero_epochs_unchanged(self):
        model = build_slice_model(32, 0)
        out, history = train_slice_model(model, _slice_dataset(), TrainConfig("slice", epochs=0))
        assert history == [] and out is model

    def test_single_class_partition(self):
        x, _ = _toy_slices()
        ds = SliceDataset(x, np.ones(len(x), dtype=int), x, np.ones(len(x), dtype=int))
        with pytest.raises(UsageError):
            train_slice_model(build_slice_model(32, 0), ds, TrainConfig("slice", epochs=1))

    def test_empty_validation(self):
        x, y = _toy_slices()
        ds = SliceDataset(x, y, x[:0], y[:0])
        with pytest.raises(DataError):
            train_slice_model(build_slice_model(32, 0), ds, TrainConfig("slice", epochs=1))

    def test_input_params_untouched(self):
        model = build_slice_model(32, 0)
        before = {k: v.data.copy() for k, v in model.tensors.items()}
        train_slice_model(model, _slice_dataset(n_per_class=2), TrainConfig("slice", lr=1e-3, epochs=2))
        assert all(np.array_equal(before[k], model[k].data) for k in before)

    def test_two_sample_descent(self):
        x, y = _toy_slices(n_per_class=1)
        ds = SliceDataset(x, y, x, y)
        model = build_slice_model(32, 0)
        cw = ClassWeights(1, 1)
        start = evaluate_slice_loss(model, x, y, cw)
        trained, history = train_slice_model(model, ds, TrainConfig("slice", lr=1e-3, batch_size=2, epochs=50), cw)
        assert len(history) == 50
        assert history[-1].train_loss < history[0].train_loss
        assert evaluate_slice_loss(trained, x, y, cw) < start

    def test_best_snapshot_selected(self):
        ds = _slice_dataset(n_per_class=2)
        cw = ClassWeights(2, 2)
        trained, history = train_slice_model(
            build_slice_model(32, 1), ds, TrainConfig("slice", lr=3e-3, batch_size=2, epochs=6), cw
        )
        best = min(r.val_loss for r in history)
        assert evaluate_slice_loss(trained, ds.val_images, ds.val_labels, cw) == best

    def test_deterministic(self):
        ds = _slice_dataset(n_per_class=2)
        cfg = TrainConfig("slice", lr=1e-3, batch_size=3, epochs=2, seed=4)
        a = train_slice_model(build_slice_model(32, 0), ds, cfg)
        b = train_slice_model(build_slice_model(32, 0), ds, cfg)
        assert history_csv(a[1]) == history_csv(b[1])
        assert all(np.array_equal(a[0][k].data, b[0][k].data) for k in a[0].tensors)


def _toy_patients(seed=0):
    # four patients, separable on the sign of one feature-map entry
    rng = np.random.default_rng(seed)
    feats = rng.uniform(-0.2, 0.2, (4, 32, 16)).astype(np.float32)
    labels = np.array([1, 1, 0, 0])
    feats[:, 3, 5] = np.where(labels == 1, 0.8, -0.8)
    return feats, labels


class TestPatientTraining:
    def test_zero_epochs_unchanged(self):
        head = build_patient_classifier(0)
        f, y = _toy_patients()
        out, history = train_patient_classifier(head, f, y, f, y, TrainConfig("patient", epochs=0))
        assert out is head and history == []

    def test_single_class(self):
        f, _ = _toy_patients()
        with pytest.raises(UsageError):
            train_patient_classifier(build_patient_classifier(0), f, np.zeros(4), f, np.zeros(4), TrainConfig("patient", epochs=1))

    def test_separable_reaches_full_accuracy(self):
        f, y = _toy_patients()
        trained, history = train_patient_classifier(
            build_patient_classifier(0), f, y, f, y, TrainConfig("patient", lr=1e-3, batch_size=4, epochs=500)
        )
        with no_grad():
            pred = patient_logits(trained, Tensor(f)).data.argmax(axis=1)
        assert np.array_equal(pred, y)
        assert history[-1].train_loss < history[0].train_loss

    def test_equal_class_weights(self):
        # identical logits; relabelling changes only which samples are positive
        logits = Tensor(np.random.default_rng(0).standard_normal((4, 2)))
        balanced = cross_entropy(logits, [1, 1, 0, 0]).item()
        skewed = cross_entropy(logits, [1, 0, 0, 0]).item()
        logp = logits.data - np.log(np.exp(logits.data).sum(axis=1, keepdims=True))
        assert balanced == pytest.approx(-(logp[0, 1] + logp[1, 1] + logp[2, 0] + logp[3, 0]) / 4, rel=1e-6)
        assert skewed == pytest.approx(-(logp[0, 1] + logp[1, 0] + logp[2, 0] + logp[3, 0]) / 4, rel=1e-6)

    def test_best_snapshot_selected(self):
        f, y = _toy_patients()
        vf, vy = _toy_patients(seed=1)
        trained, history = train_patient_classifier(
            build_patient_classifier(0), f, y, vf, vy, TrainConfig("patient", lr=1e-2, batch_size=2, epochs=40)
        )
        with no_grad():
            val = cross_entropy(patient_logits(trained, Tensor(vf)), vy).item()
        assert val == min(r.val_loss for r in history)


def test_history_csv(tmp_path):
    from ctcaps.model import EpochRecord

    hist = [EpochRecord(1, 0.5, 0.25), EpochRecord(2, 0.125, 0.0625)]
    assert history_csv(hist) == "epoch,train_loss,val_loss\n1,0.5,0.25\n2,0.125,0.0625\n"
    write_history(tmp_path / "h.csv", hist)
    assert (tmp_path / "h.csv").read_text() == history_csv(hist)
