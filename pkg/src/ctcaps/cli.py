"""``ctcaps`` command line: synth, train, extract, classify, evaluate, gradcam.

Exit codes: 0 success, 2 configuration error, 3 data error.  Every command
that writes outputs also writes ``run.txt`` with its resolved configuration.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from . import metrics
from .errors import ConfigError, DataError, DimensionError, FormatError, UsageError
from .explain import CLASS_INDEX, gradcam, save_heatmap
from .fileio import atomic_write_text, format_kv
from .model import (
    SUPPORTED_SIZES,
    SliceArchitecture,
    SliceDataset,
    TrainConfig,
    build_patient_classifier,
    build_slice_model,
    classify_patient,
    extract_patient_features,
    load_model,
    save_model,
    train_patient_classifier,
    train_slice_model,
    write_history,
)
from .model.patient import patient_forward
from .model.slice_model import SliceModelParams
from .numerics import ctt, no_grad

log = logging.getLogger("ctcaps")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
MANIFESTS = {"train": "train.txt", "validation": "val.txt", "test": "test.txt"}
COHORT_MANIFEST = "cohort.txt"
SLICE_BUNDLE, PATIENT_BUNDLE = "slice", "patient"


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    data: Optional[str] = None
    model: Optional[str] = None
    out: Optional[str] = None
    seed: int = 0
    cutoff: float = 0.5
    cutoffs: tuple = metrics.DEFAULT_CUTOFFS
    stage: str = "slice"
    full: bool = False
    epochs: Optional[int] = None
    lr: Optional[float] = None
    batch: Optional[int] = None
    input_size: Optional[int] = None
    covid: int = 20
    non_covid: int = 20
    slices: int = 10
    target: str = "covid"
    threads: int = 1

    def require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise ConfigError(f"{self.subcommand}: --{name.replace('_', '-')} is required")

    def stage_config(self, stage: str) -> TrainConfig:
        try:
            return TrainConfig.for_stage(stage, lr=self.lr, epochs=self.epochs, batch_size=self.batch, seed=self.seed)
        except UsageError as exc:
            raise ConfigError(f"--lr/--epochs/--batch: {exc}") from exc

    def as_pairs(self) -> list[tuple[str, object]]:
        pairs = []
        for key, value in asdict(self).items():
            if key == "cutoffs":
                value = ",".join(f"{c:g}" for c in value)
            pairs.append((key, "" if value is None else value))
        return pairs


def _parse_cutoffs(text: str) -> tuple:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"--cutoffs: {exc}") from exc
    if not values:
        raise ConfigError("--cutoffs: no values given")
    for v in values:
        if not 0.0 < v < 1.0:
            raise ConfigError(f"--cutoffs: {v} is outside (0, 1)")
    return tuple(sorted(set(values)))


def _threads() -> int:
    raw = os.environ.get("CTCAPS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"CTCAPS_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"CTCAPS_THREADS must be a positive integer, got {raw!r}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctcaps", description="Capsule-network CT classification pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        for flag in flags:
            p.add_argument(*flag[0], **flag[1])
        return p

    data = (("--data",), {"help": "cohort dir, manifest file or volume dir"})
    model = (("--model",), {"help": "model directory holding slice/ and patient/ bundles"})
    out = (("--out",), {"help": "output directory"})
    seed = (("--seed",), {"type": int, "default": 0})
    size = (("--input-size",), {"type": int, "choices": SUPPORTED_SIZES})
    add(
        "synth",
        "write a synthetic cohort with train/val/test manifests",
        out,
        seed,
        size,
        (("--covid",), {"type": int, "default": 20, "help": "number of COVID patients"}),
        (("--non-covid",), {"type": int, "default": 20, "help": "number of non-COVID patients"}),
        (("--slices",), {"type": int, "default": 10, "help": "slices per volume"}),
    )
    add(
        "train",
        "train the slice model, the patient classifier, or both (--full)",
        data,
        model,
        out,
        seed,
        size,
        (("--stage",), {"choices": ("slice", "patient"), "default": "slice"}),
        (("--full",), {"action": "store_true", "help": "train the slice stage then the patient stage"}),
        (("--epochs",), {"type": int}),
        (("--lr",), {"type": float}),
        (("--batch",), {"type": int}),
    )
    add("extract", "write per-patient 32x16 feature maps", data, model, out)
    add("classify", "classify one volume", data, model, out, (("--cutoff",), {"type": float, "default": 0.5}))
    add(
        "evaluate",
        "cut-off sweep, AUC and ROC over a test manifest",
        data,
        model,
        out,
        seed,
        (("--cutoffs",), {"default": ",".join(f"{c:g}" for c in metrics.DEFAULT_CUTOFFS)}),
    )
    add(
        "gradcam",
        "Grad-CAM heat maps for every slice of a volume",
        data,
        model,
        out,
        (("--target",), {"choices": tuple(CLASS_INDEX), "default": "covid"}),
    )
    return parser


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    values = {k: v for k, v in vars(ns).items() if k not in ("verbose",)}
    if "cutoffs" in values:
        values["cutoffs"] = _parse_cutoffs(values["cutoffs"])
    if "cutoff" in values and not 0.0 < values["cutoff"] < 1.0:
        raise ConfigError(f"--cutoff must lie in (0, 1), got {values['cutoff']}")
    for key in ("epochs", "batch", "covid", "non_covid", "slices"):
        if values.get(key) is not None and values[key] < (1 if key in ("batch", "slices") else 0):
            raise ConfigError(f"--{key.replace('_', '-')} out of range: {values[key]}")
    if values.get("lr") is not None and not values["lr"] > 0:
        raise ConfigError(f"--lr must be positive, got {values['lr']}")
    values["threads"] = _threads()
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
    return RunConfig(**values)


# ----------------------------------------------------------------------- helpers
def _write_run(cfg: RunConfig, out: Path) -> None:
    atomic_write_text(out / "run.txt", format_kv(cfg.as_pairs()))


def _manifest(path: Path, partition: str = "test") -> Path:
    """``path`` itself if it is a manifest file, else ``path/<partition manifest>``."""
    if path.is_file():
        return path
    candidate = path / MANIFESTS.get(partition, partition)
    if not candidate.exists():
        raise DataError(f"{candidate}: manifest not found")
    return candidate


def _load_manifest_volumes(manifest: Path) -> list:
    volumes = []
    for name, label in D.read_manifest(manifest):
        volume = D.load_volume(manifest.parent / name)
        if volume.patient_label != label:
            raise DataError(f"{manifest}: {name} is labelled {label} but its volume says {volume.patient_label}")
        volumes.append(volume)
    if not volumes:
        raise DataError(f"{manifest}: no volumes listed")
    return volumes


def _load_volume_arg(path: Path):
    if (path / D.VOLUME_META).exists():
        return D.load_volume(path)
    raise DataError(f"{path / D.VOLUME_META}: missing volume metadata")


def _slice_size(volumes) -> int:
    sizes = {s.pixels.shape[0] for v in volumes for s in v.slices}
    if len(sizes) != 1:
        raise DataError(f"volumes mix slice sizes {sorted(sizes)}")
    return sizes.pop()


def _model_dir(cfg: RunConfig) -> Path:
    cfg.require("model")
    return Path(cfg.model)


def _load_bundle(model_dir: Path, name: str):
    path = model_dir / name
    if not path.exists():
        raise DataError(f"{path}: model bundle not found")
    return load_model(path)


def _check_input(model: SliceModelParams, volumes, source) -> None:
    size = _slice_size(volumes)
    if size != model.arch.input_size:
        raise DataError(f"{source}: slices are {size}x{size} but the model expects {model.arch.input_size}")


def _features(model: SliceModelParams, volumes, threads: int = 1) -> np.ndarray:
    if threads <= 1 or len(volumes) == 1:
        return np.stack([extract_patient_features(model, v) for v in volumes])
    # the frozen model is read-only; map() keeps manifest order
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.stack(list(pool.map(lambda v: extract_patient_features(model, v), volumes)))


def _labels(volumes) -> np.ndarray:
    return np.array([v.is_covid for v in volumes], dtype=np.int64)


# ---------------------------------------------------------------------- commands
def cmd_synth(cfg: RunConfig) -> int:
    cfg.require("out")
    out = Path(cfg.out)
    size = cfg.input_size or 64
    volumes = D.generate_synthetic_cohort(cfg.covid, cfg.non_covid, cfg.slices, size, cfg.seed)
    entries = []
    for v in volumes:
        rel = f"volumes/{v.patient_id}"
        D.save_volume(v, out / rel)
        entries.append((rel, v.patient_label))
    D.write_manifest(out / COHORT_MANIFEST, entries)
    split = D.split_dataset([(v.patient_id, v.patient_label) for v in volumes], cfg.seed)
    by_id = dict(zip((v.patient_id for v in volumes), entries))
    for part, fname in MANIFESTS.items():
        D.write_manifest(out / fname, [by_id[pid] for pid in getattr(split, part)])
    _write_run(cfg, out)
    print(f"wrote {len(volumes)} volumes to {out}")
    return EXIT_OK


def _train_slice(cfg: RunConfig, data: Path, out: Path) -> SliceModelParams:
    train = _load_manifest_volumes(_manifest(data, "train"))
    val = _load_manifest_volumes(_manifest(data, "validation"))
    size = _slice_size(train + val)
    if cfg.input_size is not None and cfg.input_size != size:
        raise ConfigError(f"--input-size {cfg.input_size} does not match the {size}x{size} slices in {data}")
    tcfg = cfg.stage_config("slice")
    model = build_slice_model(size, cfg.seed, SliceArchitecture(input_size=size))
    dataset = SliceDataset(*D.slice_arrays(train), *D.slice_arrays(val))
    best, history = train_slice_model(model, dataset, tcfg)
    save_model(best, out / SLICE_BUNDLE)
    write_history(out / "slice_history.csv", history)
    return best


def _train_patient(cfg: RunConfig, data: Path, out: Path, slice_model: SliceModelParams) -> None:
    train = _load_manifest_volumes(_manifest(data, "train"))
    val = _load_manifest_volumes(_manifest(data, "validation"))
    _check_input(slice_model, train + val, data)
    tcfg = cfg.stage_config("patient")
    clf = build_patient_classifier(cfg.seed)
    best, history = train_patient_classifier(
        clf, _features(slice_model, train), _labels(train), _features(slice_model, val), _labels(val), tcfg
    )
    save_model(best, out / PATIENT_BUNDLE)
    write_history(out / "patient_history.csv", history)


def cmd_train(cfg: RunConfig) -> int:
    cfg.require("data")
    if cfg.out is None and cfg.model is None:
        raise ConfigError("train: --out (or --model) is required")
    data = Path(cfg.data)
    if not data.is_dir():
        raise DataError(f"{data}: train needs a cohort directory with train/val manifests")
    out = Path(cfg.out or cfg.model)
    if cfg.full or cfg.stage == "slice":
        slice_model = _train_slice(cfg, data, out)
    else:
        slice_model = _load_bundle(Path(cfg.model) if cfg.model else out, SLICE_BUNDLE)
        if cfg.model and Path(cfg.model) != out:
            save_model(slice_model, out / SLICE_BUNDLE)
    if cfg.full or cfg.stage == "patient":
        _train_patient(cfg, data, out, slice_model)
    _write_run(cfg, out)
    print(f"model written to {out}")
    return EXIT_OK


def cmd_extract(cfg: RunConfig) -> int:
    cfg.require("data", "out")
    out = Path(cfg.out)
    data = Path(cfg.data)
    manifest = data if data.is_file() else data / COHORT_MANIFEST
    if not manifest.exists():
        raise DataError(f"{manifest}: manifest not found")
    volumes = _load_manifest_volumes(manifest)
    model = _load_bundle(_model_dir(cfg), SLICE_BUNDLE)
    _check_input(model, volumes, manifest)
    feats = _features(model, volumes, cfg.threads)
    for v, fm in zip(volumes, feats):
        ctt.save(out / f"{v.patient_id}.ctt", fm)
    D.write_manifest(out / "features.txt", [(f"{v.patient_id}.ctt", v.patient_label) for v in volumes])
    _write_run(cfg, out)
    print(f"wrote {len(volumes)} feature maps to {out}")
    return EXIT_OK


def cmd_classify(cfg: RunConfig) -> int:
    cfg.require("data")
    volume = _load_volume_arg(Path(cfg.data))
    model_dir = _model_dir(cfg)
    slice_model = _load_bundle(model_dir, SLICE_BUNDLE)
    clf = _load_bundle(model_dir, PATIENT_BUNDLE)
    _check_input(slice_model, [volume], cfg.data)
    pred = classify_patient(slice_model, clf, volume, cfg.cutoff)
    line = f"{volume.patient_id} {pred.label} p_covid={pred.p_covid!r}"
    print(line)
    if cfg.out:
        out = Path(cfg.out)
        atomic_write_text(out / "prediction.txt", line + "\n")
        _write_run(cfg, out)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    cfg.require("data", "out")
    out = Path(cfg.out)
    manifest = _manifest(Path(cfg.data), "test")
    volumes = _load_manifest_volumes(manifest)
    model_dir = _model_dir(cfg)
    slice_model = _load_bundle(model_dir, SLICE_BUNDLE)
    clf = _load_bundle(model_dir, PATIENT_BUNDLE)
    _check_input(slice_model, volumes, manifest)
    feats = _features(slice_model, volumes, cfg.threads)
    with no_grad():
        scores = np.array([patient_forward(clf, fm)[1] for fm in feats])
    truths = _labels(volumes)
    try:
        report = metrics.cutoff_sweep(scores, truths, cfg.cutoffs)
    except UsageError as exc:
        raise DataError(f"{manifest}: {exc}") from exc
    atomic_write_text(out / "report.csv", metrics.report_csv(report))
    atomic_write_text(out / "auc.txt", metrics.auc_txt(report))
    atomic_write_text(out / "roc.csv", metrics.roc_csv(report.roc))
    rows = ["patient_id,label,p_covid"] + [f"{v.patient_id},{v.patient_label},{s!r}" for v, s in zip(volumes, scores)]
    atomic_write_text(out / "predictions.csv", "\n".join(rows) + "\n")
    _write_run(cfg, out)
    print(f"auc={report.auc:.4f} ({len(volumes)} patients); report in {out}")
    return EXIT_OK


def cmd_gradcam(cfg: RunConfig) -> int:
    cfg.require("data", "out")
    out = Path(cfg.out)
    volume = _load_volume_arg(Path(cfg.data))
    slice_model = _load_bundle(_model_dir(cfg), SLICE_BUNDLE)
    _check_input(slice_model, [volume], cfg.data)
    for i, record in enumerate(volume.slices):
        stem = f"{volume.patient_id}_s{i:03d}"
        heat = gradcam(slice_model, record.pixels, cfg.target, stem)
        save_heatmap(heat, record.pixels, out, stem)
    _write_run(cfg, out)
    print(f"wrote {len(volume.slices)} heat maps to {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "extract": cmd_extract,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "gradcam": cmd_gradcam,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(ns)
        return COMMANDS[cfg.subcommand](cfg)
    except (ConfigError, UsageError) as exc:
        print(f"ctcaps: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, DimensionError, OSError) as exc:
        print(f"ctcaps: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
