"""Volumes, preprocessing, cohort splits and the synthetic CT generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, EmptyVolumeError, FormatError, StratificationError, UsageError
from .fileio import PathLike, atomic_write_text, format_kv, read_kv
from .numerics import DTYPE, Tensor, bilinear_resize, ctt

INFECTION = "infection-evident"
NO_EVIDENCE = "no-evidence"
UNLABELED = "unlabeled"
SLICE_LABELS = (INFECTION, NO_EVIDENCE, UNLABELED)

COVID = "covid"
NON_COVID = "non-covid"
PATIENT_LABELS = (COVID, NON_COVID)

RAW_SIZE = 512
SLICE_SIZE = 256
MIN_LUNG_FRACTION = 0.005
SPLIT_FRACTIONS = (0.6, 0.1, 0.3)
SUPPORTED_SIZES = (32, 64, 128, 256)


@dataclass
class SliceRecord:
    pixels: np.ndarray
    lung_mask: Optional[np.ndarray] = None
    slice_label: str = UNLABELED
    # ground-truth lesion mask; only synthetic slices carry one
    lesion_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=DTYPE)
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise DataError(f"slice must be a square 2-D image, got {self.pixels.shape}")
        if not np.isfinite(self.pixels).all() or self.pixels.min() < 0 or self.pixels.max() > 1:
            raise DataError("slice pixels must lie in [0, 1]")
        if self.slice_label not in SLICE_LABELS:
            raise DataError(f"slice label must be one of {SLICE_LABELS}, got {self.slice_label!r}")
        for name in ("lung_mask", "lesion_mask"):
            mask = getattr(self, name)
            if mask is None:
                continue
            mask = np.asarray(mask) > 0.5
            if mask.shape != self.pixels.shape:
                raise DataError(f"{name} shape {mask.shape} differs from slice {self.pixels.shape}")
            setattr(self, name, mask)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class SliceVolume:
    patient_id: str
    slices: list = field(default_factory=list)
    patient_label: str = NON_COVID

    def __post_init__(self):
        if self.patient_label not in PATIENT_LABELS:
            raise DataError(f"patient label must be one of {PATIENT_LABELS}, got {self.patient_label!r}")
        if not self.slices:
            raise EmptyVolumeError(f"volume {self.patient_id!r} has no slices")
        sizes = {s.size for s in self.slices}
        if len(sizes) != 1:
            raise DataError(f"volume {self.patient_id!r} mixes slice sizes {sorted(sizes)}")

    @property
    def is_covid(self) -> bool:
        return self.patient_label == COVID

    @property
    def size(self) -> int:
        return self.slices[0].size

    def images(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.slices])

    def __len__(self) -> int:
        return len(self.slices)


# ----------------------------------------------------------------- preprocessing
def normalize_minmax(image: np.ndarray) -> np.ndarray:
    """Map ``image`` to [0, 1]; a constant image becomes all zeros."""
    x = np.asarray(image, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(x.shape, dtype=DTYPE)
    return ((x - lo) / (hi - lo)).astype(DTYPE)


def preprocess_slice(
    raw: np.ndarray,
    target_size: int = SLICE_SIZE,
    lung_mask: Optional[np.ndarray] = None,
    slice_label: str = UNLABELED,
) -> SliceRecord:
    """Per-slice min-max normalisation followed by bilinear downsampling.

    ``raw`` is an already lung-segmented slice, either at the 512x512 scanner
    resolution or already at ``target_size``.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise DataError(f"slice must be square, got shape {raw.shape}")
    if raw.shape[0] not in (RAW_SIZE, target_size):
        raise DataError(f"slice must be {RAW_SIZE}x{RAW_SIZE} or {target_size}x{target_size}, got {raw.shape}")
    pixels = bilinear_resize(Tensor(normalize_minmax(raw)), (target_size, target_size)).data
    pixels = np.clip(pixels, 0.0, 1.0)
    mask = None
    if lung_mask is not None:
        lung_mask = np.asarray(lung_mask, dtype=DTYPE)
        if lung_mask.shape != raw.shape:
            raise DataError(f"lung mask shape {lung_mask.shape} differs from slice {raw.shape}")
        mask = bilinear_resize(Tensor(lung_mask), (target_size, target_size)).data >= 0.5
    return SliceRecord(pixels, mask, slice_label)


def lung_fraction(record: SliceRecord) -> float:
    if record.lung_mask is not None:
        return float(record.lung_mask.mean())
    return float((record.pixels > 0).mean())


def filter_empty_slices(volume: SliceVolume, min_lung_fraction: float = MIN_LUNG_FRACTION) -> SliceVolume:
    """Drop slices whose lung (or, without a mask, non-zero) fraction is below the threshold."""
    kept = [s for s in volume.slices if lung_fraction(s) >= min_lung_fraction]
    if not kept:
        raise EmptyVolumeError(f"every slice of {volume.patient_id!r} was filtered out")
    return SliceVolume(volume.patient_id, kept, volume.patient_label)


# ----------------------------------------------------------------------- splits
@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    validation: tuple
    test: tuple
    seed: int

    def partition_of(self, patient_id: str) -> str:
        for name in ("train", "validation", "test"):
            if patient_id in getattr(self, name):
                return name
        raise KeyError(patient_id)


def split_dataset(cohort: Sequence[tuple[str, str]], seed: int = 0) -> DatasetSplit:
    """Stratified 60/10/30 patient-level split.

    Each class is shuffled and spread evenly along a common ordering, which
    is then cut into consecutive train/validation/test blocks, so every block
    mirrors the cohort's class ratio.
    """
    cohort = list(cohort)
    ids = [pid for pid, _ in cohort]
    if len(set(ids)) != len(ids):
        raise DataError("cohort contains duplicate patient ids")
    n = len(cohort)
    if n < 10:
        raise StratificationError(f"need at least 10 patients to split, got {n}")
    by_class: dict[str, list[str]] = {}
    for pid, label in cohort:
        by_class.setdefault(label, []).append(pid)
    for label, members in by_class.items():
        if len(members) < 3:
            raise StratificationError(f"class {label!r} has only {len(members)} patients (need >= 3)")

    rng = np.random.default_rng(seed)
    keyed = []
    for ci, label in enumerate(sorted(by_class)):
        members = by_class[label]
        order = rng.permutation(len(members))
        for rank, m in enumerate(order):
            keyed.append(((rank + 0.5) / len(members), ci, members[m]))
    keyed.sort()
    ordered = [pid for _, _, pid in keyed]
    n_train = int(math.floor(SPLIT_FRACTIONS[0] * n + 0.5))
    n_val = int(math.floor(SPLIT_FRACTIONS[1] * n + 0.5))
    position = {pid: i for i, pid in enumerate(ids)}

    def block(part):
        return tuple(sorted(part, key=position.__getitem__))

    return DatasetSplit(
        block(ordered[:n_train]), block(ordered[n_train : n_train + n_val]), block(ordered[n_train + n_val :]), seed
    )


# -------------------------------------------------------------------- synthetic
def _ellipse(yy, xx, cy, cx, ry, rx) -> np.ndarray:
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _synthetic_volume(rng: np.random.Generator, pid: str, covid: bool, n_slices: int, size: int) -> SliceVolume:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy = size * (0.5 + rng.uniform(-0.03, 0.03))
    cx = size * np.array([0.3, 0.7]) + size * rng.uniform(-0.02, 0.02, 2)
    ry = size * rng.uniform(0.30, 0.36)
    rx = size * rng.uniform(0.14, 0.17)
    base = rng.uniform(0.25, 0.35)

    blob_slices: set = set()
    if covid:
        lo, hi = math.ceil(0.2 * n_slices), math.floor(0.6 * n_slices)
        count = int(rng.integers(lo, hi + 1))
        blob_slices = set(rng.choice(n_slices, size=count, replace=False).tolist())

    slices = []
    for z in range(n_slices):
        # lungs are smaller towards the apex and base of the scan
        scale = 0.65 + 0.35 * math.sin(math.pi * (z + 0.5) / n_slices)
        lungs = np.zeros((size, size), dtype=bool)
        for x0 in cx:
            lungs |= _ellipse(yy, xx, cy, x0, ry * scale, rx * scale)
        img = base + rng.normal(0.0, 0.03, (size, size))
        for _ in range(int(rng.integers(3, 7))):
            vy, vx = rng.uniform(0.2 * size, 0.8 * size, 2)
            vr = max(1.0, size / 64) * rng.uniform(0.8, 1.5)
            img += 0.12 * np.exp(-((yy - vy) ** 2 + (xx - vx) ** 2) / (2 * vr**2))

        lesion = None
        if z in blob_slices:
            side = int(rng.integers(2))
            # subpleural: near the lateral-anterior or lateral-posterior rim of one lung
            phi = math.radians(rng.uniform(35.0, 75.0)) * (1.0 if rng.integers(2) else -1.0)
            sign = -1.0 if side == 0 else 1.0
            by = cy + 0.7 * ry * scale * math.sin(phi)
            bx = cx[side] + sign * 0.6 * rx * scale * math.cos(phi)
            br = size * rng.uniform(0.05, 0.07)
            profile = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * (br / 1.5) ** 2))
            img += rng.uniform(0.45, 0.6) * profile
            lesion = (profile >= np.exp(-1.125)) & lungs
        img = np.clip(np.where(lungs, img, 0.0), 0.0, 1.0)
        label = INFECTION if lesion is not None and lesion.any() else NO_EVIDENCE
        slices.append(SliceRecord(img.astype(DTYPE), lungs, label, lesion))
    return SliceVolume(pid, slices, COVID if covid else NON_COVID)


def generate_synthetic_cohort(
    n_covid: int,
    n_noncovid: int,
    slices_per_volume: int = 10,
    size: int = 64,
    seed: int = 0,
) -> list[SliceVolume]:
    """Synthetic segmented-lung volumes.

    Every slice shows two elliptical lungs of moderate intensity with noise
    and faint vessel dots on a zero background.  COVID volumes additionally
    carry one bright peripheral blob on a random 20-60% of their slices;
    those slices are labelled infection-evident and keep the blob mask.
    Volume ``i`` draws from its own seed ``(seed, i)``.
    """
    if size not in SUPPORTED_SIZES:
        raise UsageError(f"size must be one of {SUPPORTED_SIZES}, got {size}")
    if n_covid < 0 or n_noncovid < 0 or n_covid + n_noncovid == 0:
        raise UsageError("cohort needs a non-negative number of patients per class and at least one patient")
    if slices_per_volume < (2 if n_covid else 1):
        raise UsageError("COVID volumes need at least 2 slices to hold a 20-60% lesion fraction")
    volumes = []
    for i in range(n_covid + n_noncovid):
        rng = np.random.default_rng([seed, i])
        volumes.append(_synthetic_volume(rng, f"SYN{i:04d}", i < n_covid, slices_per_volume, size))
    return volumes


# ------------------------------------------------------------------------ disk io
VOLUME_META = "meta.txt"


def save_volume(volume: SliceVolume, path: PathLike) -> None:
    root = Path(path)
    pairs = [
        ("patient_id", volume.patient_id),
        ("label", volume.patient_label),
        ("num_slices", len(volume.slices)),
    ]
    for i, s in enumerate(volume.slices):
        name = f"slice_{i:03d}.ctt"
        ctt.save(root / name, s.pixels)
        pairs += [(f"slice.{i}", name), (f"slice.{i}.label", s.slice_label)]
        for key, mask in (("lung_mask", s.lung_mask), ("lesion_mask", s.lesion_mask)):
            if mask is not None:
                mname = f"{key}_{i:03d}.ctt"
                ctt.save(root / mname, mask.astype(DTYPE))
                pairs.append((f"slice.{i}.{key}", mname))
    atomic_write_text(root / VOLUME_META, format_kv(pairs))


def _load_slice_file(root: Path, name: str) -> np.ndarray:
    if Path(name).name != name:
        raise FormatError(f"{root / VOLUME_META}: slice file {name!r} must live in the volume directory")
    path = root / name
    if not path.exists():
        raise DataError(f"{path}: missing slice file")
    return ctt.load(path)


def load_volume(path: PathLike) -> SliceVolume:
    root = Path(path)
    if not (root / VOLUME_META).exists():
        raise DataError(f"{root / VOLUME_META}: missing volume metadata")
    meta = dict(read_kv(root / VOLUME_META))
    try:
        n = int(meta["num_slices"])
        pid, label = meta["patient_id"], meta["label"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{root / VOLUME_META}: malformed metadata ({exc})") from exc
    if label not in PATIENT_LABELS:
        raise DataError(f"{root / VOLUME_META}: label {label!r} not in {PATIENT_LABELS}")
    slices = []
    for i in range(n):
        key = f"slice.{i}"
        if key not in meta:
            raise FormatError(f"{root / VOLUME_META}: missing entry {key}")
        pixels = _load_slice_file(root, meta[key])
        masks = {}
        for mkey in ("lung_mask", "lesion_mask"):
            if f"{key}.{mkey}" in meta:
                masks[mkey] = _load_slice_file(root, meta[f"{key}.{mkey}"])
        slices.append(SliceRecord(pixels, masks.get("lung_mask"), meta.get(f"{key}.label", UNLABELED), masks.get("lesion_mask")))
    return SliceVolume(pid, slices, label)


def write_manifest(path: PathLike, entries: Sequence[tuple[str, str]]) -> None:
    """Cohort manifest: one ``<volume dir>=<label>`` line per patient."""
    atomic_write_text(path, format_kv(entries))


def read_manifest(path: PathLike) -> list[tuple[str, str]]:
    entries = read_kv(path)
    for name, label in entries:
        if label not in PATIENT_LABELS:
            raise DataError(f"{path}: label {label!r} for {name!r} not in {PATIENT_LABELS}")
    return entries


def slice_arrays(volumes: Sequence[SliceVolume]) -> tuple[np.ndarray, np.ndarray]:
    """Stack all slices of ``volumes`` with labels (1 = infection evident)."""
    images = np.concatenate([v.images() for v in volumes])
    labels = np.array([s.slice_label == INFECTION for v in volumes for s in v.slices], dtype=np.int64)
    return images, labels
