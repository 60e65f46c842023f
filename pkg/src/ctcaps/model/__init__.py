from .patient import (
    FEATURE_SHAPE,
    LAYER_SIZES,
    PatientClassifierParams,
    aggregate_patient,
    build_patient_classifier,
    cross_entropy,
    patient_forward,
    patient_logits,
)
from .persist import load_model, save_model
from .pipeline import (
    COVID,
    NON_COVID,
    PatientPrediction,
    classify_patient,
    decide,
    extract_patient_features,
    slice_feature_maps,
)
from .slice_model import SUPPORTED_SIZES, SliceArchitecture, SliceModelParams, build_slice_model, slice_forward
from .train import (
    EpochRecord,
    SliceDataset,
    TrainConfig,
    history_csv,
    train_patient_classifier,
    train_slice_model,
    write_history,
)

__all__ = [
    "COVID",
    "FEATURE_SHAPE",
    "LAYER_SIZES",
    "NON_COVID",
    "SUPPORTED_SIZES",
    "EpochRecord",
    "PatientClassifierParams",
    "PatientPrediction",
    "SliceArchitecture",
    "SliceDataset",
    "SliceModelParams",
    "TrainConfig",
    "aggregate_patient",
    "build_patient_classifier",
    "build_slice_model",
    "classify_patient",
    "cross_entropy",
    "decide",
    "extract_patient_features",
    "history_csv",
    "load_model",
    "patient_forward",
    "patient_logits",
    "save_model",
    "slice_feature_maps",
    "slice_forward",
    "train_patient_classifier",
    "train_slice_model",
    "write_history",
]
