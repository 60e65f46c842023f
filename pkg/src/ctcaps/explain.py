"""Grad-CAM heat maps from the last convolutional layer of the slice network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .capsnet import capsule_lengths
from .errors import DimensionError, UsageError
from .fileio import PathLike, atomic_write_bytes
from .model.slice_model import SliceModelParams, slice_forward
from .numerics import DTYPE, Tensor, bilinear_resize, ctt

CLASS_INDEX = {"non-covid": 0, "covid": 1}


@dataclass(frozen=True)
class HeatMap:
    values: np.ndarray
    target_class: int
    source_slice_id: Optional[str] = None


def minmax_unit(x: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant map becomes all zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.shape, dtype=DTYPE)
    return ((x - lo) / (hi - lo)).astype(DTYPE)


def _class_index(target_class: Union[str, int], n_classes: int) -> int:
    if isinstance(target_class, str):
        if target_class not in CLASS_INDEX:
            raise UsageError(f"target class must be one of {sorted(CLASS_INDEX)}, got {target_class!r}")
        target_class = CLASS_INDEX[target_class]
    if not 0 <= int(target_class) < n_classes:
        raise UsageError(f"class index {target_class} out of range for {n_classes} class capsules")
    return int(target_class)


def gradcam(
    slice_model: SliceModelParams,
    image,
    target_class: Union[str, int] = "covid",
    slice_id: Optional[str] = None,
) -> HeatMap:
    """Heat map of the regions driving ``target_class``'s capsule length.

    Channel weights are the spatially averaged gradients of the class
    capsule length with respect to the last conv activations; the map is
    ``relu(sum_c w_c * A_c)`` upsampled to the slice and min-max scaled.
    """
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=DTYPE)
    size = slice_model.arch.input_size
    if image.shape not in ((size, size), (1, size, size)):
        raise DimensionError(f"gradcam expects a {size}x{size} slice, got {image.shape}")
    k = _class_index(target_class, slice_model.arch.class_capsules)

    model = slice_model.frozen()
    # the input carries the tape; the frozen weights collect no gradients
    x = Tensor(image.reshape(1, 1, size, size), requires_grad=True)
    classes, _, conv = slice_forward(model, x, "eval", return_conv=True)
    conv.retain_grad()
    score = capsule_lengths(classes)[0, k]
    score.backward()
    grads = conv.grad if conv.grad is not None else np.zeros(conv.shape, dtype=DTYPE)

    activations = conv.data[0]
    weights = grads[0].mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * activations).sum(axis=0), 0.0)
    up = bilinear_resize(Tensor(cam), (size, size)).data
    return HeatMap(minmax_unit(np.maximum(up, 0.0)), k, slice_id)


def pgm_bytes(image: np.ndarray) -> bytes:
    """8-bit binary PGM (P5) of an image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"PGM export needs a 2-D image, got {img.shape}")
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(blob: bytes) -> np.ndarray:
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not an 8-bit P5 graymap")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def overlay(image: np.ndarray, heat: HeatMap) -> np.ndarray:
    """Slice and heat map side by side."""
    return np.concatenate([np.asarray(image, dtype=DTYPE).reshape(heat.values.shape), heat.values], axis=1)


def save_heatmap(heat: HeatMap, image: np.ndarray, directory: PathLike, stem: str) -> None:
    from pathlib import Path

    root = Path(directory)
    atomic_write_bytes(root / f"{stem}_heatmap.pgm", pgm_bytes(heat.values))
    atomic_write_bytes(root / f"{stem}_overlay.pgm", pgm_bytes(overlay(image, heat)))
    ctt.save(root / f"{stem}_heatmap.ctt", heat.values)


def localization_ratio(heat: HeatMap, mask: np.ndarray) -> float:
    """Mean heat inside ``mask`` over mean heat outside it."""
    mask = np.asarray(mask, dtype=bool)
    inside = float(heat.values[mask].mean())
    outside = float(heat.values[~mask].mean())
    return np.inf if outside == 0 and inside > 0 else inside / outside if outside > 0 else 0.0
