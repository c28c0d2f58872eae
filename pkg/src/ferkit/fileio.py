"""Atomic file writes and line-delimited JSON helpers."""

from __future__ import annotations

import json
import mimetypes
import os
import tempfile
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, TypeVar

from .errors import InvalidRecord

T = TypeVar("T")


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_json(path: str | Path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def write_jsonl(path: str | Path, rows: Iterable[dict[str, Any]]) -> int:
    lines = [json.dumps(r, ensure_ascii=False) for r in rows]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidRecord(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise InvalidRecord(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def read_records(path: str | Path, parse: Callable[[dict[str, Any]], T]) -> list[T]:
    """Parse every line with ``parse``, re-raising failures with file/line context."""
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            out.append(parse(obj))
        except (InvalidRecord, KeyError, ValueError, TypeError) as exc:
            raise InvalidRecord(f"{path}:{lineno}: {exc}") from exc
    return out


def image_loader(root: str | Path) -> Callable[[str], tuple[bytes, str]]:
    """Resolve image references relative to ``root`` and return (bytes, media type)."""
    base = Path(root)

    def load(ref: str) -> tuple[bytes, str]:
        path = Path(ref)
        if not path.is_absolute():
            path = base / path
        data = path.read_bytes()
        if not data:
            raise InvalidRecord(f"image {ref!r} is empty")
        media_type = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        return data, media_type

    return load
