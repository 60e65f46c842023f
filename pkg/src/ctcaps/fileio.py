"""Atomic writes and the ``key=value`` text files used across bundles."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Iterable, Union

from .errors import FormatError

PathLike = Union[str, os.PathLike]


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def format_kv(pairs: Iterable[tuple[str, object]]) -> str:
    lines = []
    for key, value in pairs:
        value = str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise FormatError(f"cannot encode key/value pair {key!r}={value!r}")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str, source: str = "<text>") -> list[tuple[str, str]]:
    """Parse newline-delimited ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise FormatError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        out.append((key.strip(), value.strip()))
    return out


def read_kv(path: PathLike) -> list[tuple[str, str]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: file not found") from exc
    return parse_kv(text, str(path))
