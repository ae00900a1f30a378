"""Shared file I/O helpers: timestamps, atomic writes, digests, provenance lines.

All delimited outputs are comma-separated UTF-8 with ``\\n`` newlines and
repr-formatted floats so that write -> parse round-trips are exact. A single
leading ``# provenance: ...`` comment line carries input/config digests;
readers skip any line starting with ``#``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import SchemaError

UTC = timezone.utc


def parse_rfc3339(text: str) -> datetime:
    """Parse an RFC-3339 timestamp into an aware UTC datetime.

    Raises ValueError for naive timestamps (an explicit offset or 'Z' is
    required by the canonical formats).
    """
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    dt = datetime.fromisoformat(raw)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp lacks UTC offset: {text!r}")
    return dt.astimezone(UTC)


def format_rfc3339(dt: datetime) -> str:
    """Format an aware datetime as a Z-suffixed RFC-3339 string (whole seconds)."""
    if dt.tzinfo is None:
        raise ValueError("naive datetime cannot be formatted as RFC-3339")
    dt = dt.astimezone(UTC)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%f").rstrip("0") + "Z"
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def fmt_float(x: float) -> str:
    """Shortest exact decimal representation (round-trips through float())."""
    return repr(float(x))


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def provenance_line(tool_version: str, config_digest: str | None,
                    inputs: Sequence[tuple[str, str]] = ()) -> str:
    """One-line provenance comment: tool version, config digest, input digests."""
    parts = [f"# provenance: emfd={tool_version}"]
    if config_digest is not None:
        parts.append(f"config={config_digest[:12]}")
    for name, digest in inputs:
        parts.append(f"{name}={digest[:12]}")
    return " ".join(parts)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write to a temp file in the same directory and rename on success."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="")
    os.replace(tmp, path)


def write_csv(path: str | os.PathLike, header: Sequence[str],
              rows: Iterable[Sequence[str]], provenance: str | None = None) -> None:
    """Atomically write a comma-separated file with optional provenance comment."""
    buf = io.StringIO()
    if provenance:
        buf.write(provenance + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def iter_csv(source: str | os.PathLike | Iterable[str]) -> Iterator[tuple[int, list[str]]]:
    """Yield (physical line number, fields) for each non-comment CSV row.

    Accepts a path or any iterable of text lines. Comment lines (leading '#')
    and blank lines are skipped; line numbers refer to the physical stream.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            yield from _iter_csv_lines(fh)
    else:
        yield from _iter_csv_lines(source)


def _iter_csv_lines(lines: Iterable[str]) -> Iterator[tuple[int, list[str]]]:
    filtered: list[str] = []
    numbers: list[int] = []
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        filtered.append(line)
        numbers.append(lineno)
    reader = csv.reader(filtered)
    for lineno, fields in zip(numbers, reader):
        yield lineno, fields


def read_csv_dicts(source: str | os.PathLike | Iterable[str],
                   required: Sequence[str] = ()) -> tuple[list[str], list[tuple[int, dict[str, str]]]]:
    """Read a headed CSV into (header, [(line number, row dict), ...]).

    Raises SchemaError when the stream is empty or a required column is
    missing from the header.
    """
    it = iter_csv(source)
    try:
        _, header = next(it)
    except StopIteration:
        raise SchemaError("empty input: no header row") from None
    missing = [col for col in required if col not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    rows = []
    for lineno, fields in it:
        if len(fields) != len(header):
            raise SchemaError(f"line {lineno}: expected {len(header)} fields, got {len(fields)}")
        rows.append((lineno, dict(zip(header, fields))))
    return header, rows
