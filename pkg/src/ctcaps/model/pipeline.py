from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyVolumeError, UsageError
from ..numerics import no_grad
from .patient import PatientClassifierParams, aggregate_patient, patient_forward
from .slice_model import SliceModelParams, slice_forward

COVID = "covid"
NON_COVID = "non-covid"


@dataclass(frozen=True)
class PatientPrediction:
    label: str
    p_covid: float
    feature_map: np.ndarray


def slice_feature_maps(slice_model: SliceModelParams, images) -> np.ndarray:
    """Feature capsules ``(n, 32, 16)`` for each slice, computed one slice at a time.

    Running slices separately keeps every slice's result independent of how
    the volume is ordered or batched.
    """
    model = slice_model.frozen()
    with no_grad():
        return np.stack([slice_forward(model, img, "eval")[1].data for img in images])


def extract_patient_features(slice_model: SliceModelParams, volume) -> np.ndarray:
    """The patient's 32x16 feature map: element-wise max over its slices."""
    images = volume.images() if hasattr(volume, "images") else np.asarray(volume)
    if len(images) == 0:
        raise EmptyVolumeError("volume has no slices")
    with no_grad():
        return aggregate_patient(list(slice_feature_maps(slice_model, images))).data


def decide(p_covid: float, cutoff: float) -> str:
    # ties go to COVID
    return COVID if p_covid >= cutoff else NON_COVID


def classify_patient(
    slice_model: SliceModelParams,
    patient_classifier: PatientClassifierParams,
    volume,
    cutoff: float = 0.5,
) -> PatientPrediction:
    if not 0.0 < cutoff < 1.0:
        raise UsageError(f"cutoff must lie in (0, 1), got {cutoff}")
    fm = extract_patient_features(slice_model, volume)
    with no_grad():
        _, p_covid = patient_forward(patient_classifier, fm)
    return PatientPrediction(decide(p_covid, cutoff), p_covid, fm)
