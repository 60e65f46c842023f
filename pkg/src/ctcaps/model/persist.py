"""Model bundles: ``manifest.txt`` plus one CTT file per tensor.

The manifest is versioned and carries a SHA-256 of every tensor file, so a
truncated or altered bundle is rejected before any model is constructed.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import FormatError
from ..fileio import PathLike, atomic_write_bytes, atomic_write_text, format_kv, read_kv
from ..numerics import BatchNormState, Tensor, ctt
from .patient import PatientClassifierParams
from .slice_model import SliceArchitecture, SliceModelParams

FORMAT_NAME = "ctcaps-model"
FORMAT_VERSION = 1
MANIFEST = "manifest.txt"

ARCH_FIELDS = (
    "input_size",
    "conv_channels",
    "kernel_size",
    "primary_dim",
    "feature_capsules",
    "feature_dim",
    "class_capsules",
    "class_dim",
    "routing_iterations",
)

Params = Union[SliceModelParams, PatientClassifierParams]


def _named_tensors(params: Params) -> tuple[str, list[tuple[str, str]], list[tuple[str, np.ndarray]]]:
    if isinstance(params, SliceModelParams):
        header = []
        for name in ARCH_FIELDS:
            value = getattr(params.arch, name)
            header.append((f"arch.{name}", ",".join(map(str, value)) if isinstance(value, tuple) else value))
        header.append(("bn.momentum", repr(float(params.bn_state.momentum))))
        tensors = [(name, params.tensors[name].data) for name in params.arch.tensor_shapes()]
        if params.bn_state.initialized:
            tensors += [("bn.running_mean", params.bn_state.running_mean), ("bn.running_var", params.bn_state.running_var)]
        return "slice", header, tensors
    if isinstance(params, PatientClassifierParams):
        header = [("layers", ",".join(map(str, params.layer_sizes)))]
        tensors = []
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            tensors += [(f"dense{i}.weight", w.data), (f"dense{i}.bias", b.data)]
        return "patient", header, tensors
    raise TypeError(f"cannot save {type(params).__name__}")


def save_model(params: Params, path: PathLike) -> None:
    path = Path(path)
    kind, header, tensors = _named_tensors(params)
    pairs = [("format", FORMAT_NAME), ("version", FORMAT_VERSION), ("kind", kind)] + header
    for name, data in tensors:
        blob = ctt.encode(data)
        fname = f"{name}.ctt"
        atomic_write_bytes(path / fname, blob)
        pairs.append((f"tensor.{name}", f"{fname}:{hashlib.sha256(blob).hexdigest()}"))
    atomic_write_text(path / MANIFEST, format_kv(pairs))


def _read_tensor(root: Path, spec: str, name: str) -> np.ndarray:
    fname, sep, digest = spec.partition(":")
    if not sep or Path(fname).name != fname:
        raise FormatError(f"{root / MANIFEST}: bad tensor entry for {name!r}")
    try:
        blob = (root / fname).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{root / fname}: missing tensor file") from exc
    if hashlib.sha256(blob).hexdigest() != digest:
        raise FormatError(f"{root / fname}: checksum mismatch")
    return ctt.decode(blob, str(root / fname))


def load_model(path: PathLike) -> Params:
    root = Path(path)
    entries = read_kv(root / MANIFEST)
    meta = dict(entries)
    if meta.get("format") != FORMAT_NAME:
        raise FormatError(f"{root / MANIFEST}: not a ctcaps model bundle")
    if meta.get("version") != str(FORMAT_VERSION):
        raise FormatError(f"{root / MANIFEST}: version {meta.get('version')!r}, expected {FORMAT_VERSION}")
    arrays = {
        key[len("tensor.") :]: _read_tensor(root, value, key) for key, value in entries if key.startswith("tensor.")
    }
    kind = meta.get("kind")
    try:
        if kind == "slice":
            return _build_slice(root, meta, arrays)
        if kind == "patient":
            return _build_patient(root, meta, arrays)
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{root / MANIFEST}: incomplete or inconsistent bundle ({exc})") from exc
    raise FormatError(f"{root / MANIFEST}: unknown model kind {kind!r}")


def _build_slice(root: Path, meta: dict, arrays: dict) -> SliceModelParams:
    kwargs = {}
    for name in ARCH_FIELDS:
        raw = meta[f"arch.{name}"]
        kwargs[name] = tuple(int(v) for v in raw.split(",")) if name == "conv_channels" else int(raw)
    arch = SliceArchitecture(**kwargs)
    tensors = {}
    for name, shape in arch.tensor_shapes().items():
        data = arrays[name]
        if data.shape != tuple(shape):
            raise FormatError(f"{root / (name + '.ctt')}: shape {data.shape}, expected {tuple(shape)}")
        tensors[name] = Tensor._wrap(data, requires_grad=True)
    bn = BatchNormState(arrays.get("bn.running_mean"), arrays.get("bn.running_var"), float(meta["bn.momentum"]))
    return SliceModelParams(arch, tensors, bn)


def _build_patient(root: Path, meta: dict, arrays: dict) -> PatientClassifierParams:
    sizes = [int(v) for v in meta["layers"].split(",")]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w, b = arrays[f"dense{i}.weight"], arrays[f"dense{i}.bias"]
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise FormatError(f"{root}: dense{i} has shapes {w.shape}/{b.shape}, expected ({fan_in}, {fan_out})")
        weights.append(Tensor._wrap(w, True))
        biases.append(Tensor._wrap(b, True))
    return PatientClassifierParams(weights, biases)
