"""Parse, validate, and time-bin raw per-segment traffic observations.

Canonical segment file: comma-separated (RFC-4180 quoting) with header
``segment_id,tract_id,bin_start,road_type,length_mi,lanes,probe_count,
mean_speed_mph,volume_veh`` and an optional trailing ``zero_flow`` column
(``1``/``0``). ``bin_start`` is RFC-3339, already aligned to a 15-minute
boundary. Malformed rows are rejected with stable reason codes, never
imputed.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Iterable, Mapping

from ._io import (atomic_write_text, format_rfc3339, fmt_float, iter_csv,
                  parse_rfc3339)
from .errors import SchemaError

ROAD_TYPES = ("freeway", "arterial", "local", "ramp")

CANONICAL_COLUMNS = (
    "segment_id", "tract_id", "bin_start", "road_type", "length_mi",
    "lanes", "probe_count", "mean_speed_mph", "volume_veh",
)

MAX_LENGTH_MI = 50.0
MAX_SPEED_MPH = 120.0

#: Stable rejection reason codes, in the order checks are applied.
REJECT_REASONS = (
    "field count mismatch",
    "missing value",
    "bad number",
    "bad timestamp",
    "unaligned bin_start",
    "unknown road_type",
    "nonpositive length",
    "length>50mi",
    "lanes<1",
    "negative probe_count",
    "nonpositive speed",
    "speed>120mph",
    "negative volume",
    "zero volume with probes",
)


@dataclass(frozen=True)
class SegmentRecord:
    """One road segment x 15-minute bin observation."""

    segment_id: str
    tract_id: str
    bin_start: datetime  # aware UTC, aligned to a 15-minute boundary
    road_type: str
    length_mi: float
    lanes: int
    probe_count: int
    mean_speed_mph: float
    volume_veh: float
    zero_flow: bool = False


@dataclass(frozen=True)
class ValidationReport:
    rows_read: int
    rows_accepted: int
    rejects: tuple[tuple[int, str], ...]  # (physical line number, reason code)

    def __post_init__(self) -> None:
        if self.rows_read != self.rows_accepted + len(self.rejects):
            raise ValueError("rows_read != rows_accepted + |rejects|")


def align_bin(raw_ts: datetime) -> datetime:
    """Floor a timestamp to the enclosing 15-minute boundary."""
    return raw_ts - timedelta(minutes=raw_ts.minute % 15,
                              seconds=raw_ts.second,
                              microseconds=raw_ts.microsecond)


def check_record(candidate: Mapping[str, str]) -> tuple[SegmentRecord | None, str | None]:
    """Validate one raw row; returns (record, None) on accept, (None, reason) on reject.

    ``candidate`` maps canonical field names to raw string values (all
    canonical fields present; ``zero_flow`` optional). Reason codes are
    stable strings from REJECT_REASONS.
    """
    for col in CANONICAL_COLUMNS:
        if candidate[col].strip() == "":
            return None, "missing value"
    try:
        length = float(candidate["length_mi"])
        lanes = int(candidate["lanes"])
        probes = int(candidate["probe_count"])
        speed = float(candidate["mean_speed_mph"])
        volume = float(candidate["volume_veh"])
    except ValueError:
        return None, "bad number"
    if not all(map(_finite, (length, speed, volume))):
        return None, "bad number"
    try:
        bin_start = parse_rfc3339(candidate["bin_start"])
    except ValueError:
        return None, "bad timestamp"
    if bin_start.minute % 15 or bin_start.second or bin_start.microsecond:
        return None, "unaligned bin_start"
    road_type = candidate["road_type"]
    if road_type not in ROAD_TYPES:
        return None, "unknown road_type"
    if length <= 0:
        return None, "nonpositive length"
    if length > MAX_LENGTH_MI:
        return None, "length>50mi"
    if lanes < 1:
        return None, "lanes<1"
    if probes < 0:
        return None, "negative probe_count"
    if speed <= 0:
        return None, "nonpositive speed"
    if speed > MAX_SPEED_MPH:
        return None, "speed>120mph"
    if volume < 0:
        return None, "negative volume"
    zero_flow = candidate.get("zero_flow", "0").strip() in ("1", "true", "True")
    # Probes are a subsample: volume > 0 with probe_count = 0 is legitimate
    # (externally expanded volumes). Zero volume needs zero probes or a flag.
    if volume == 0 and probes > 0 and not zero_flow:
        return None, "zero volume with probes"
    return SegmentRecord(
        segment_id=candidate["segment_id"],
        tract_id=candidate["tract_id"],
        bin_start=bin_start,
        road_type=road_type,
        length_mi=length,
        lanes=lanes,
        probe_count=probes,
        mean_speed_mph=speed,
        volume_veh=volume,
        zero_flow=zero_flow,
    ), None


def parse_segment_records(
    source: str | os.PathLike | Iterable[str],
    schema: Mapping[str, str] | None = None,
) -> tuple[list[SegmentRecord], ValidationReport]:
    """Parse a delimited stream into validated records plus a reject report.

    ``schema`` maps canonical field names to the column names used in the
    stream's header (identity by default). A missing required column is a
    fatal SchemaError; per-row violations reject the row and continue.
    Accepted records keep input order.
    """
    colmap = dict(schema) if schema else {c: c for c in CANONICAL_COLUMNS}
    for field in CANONICAL_COLUMNS:
        if field not in colmap:
            raise SchemaError(f"schema does not map required field {field!r}")
    rows = iter_csv(source)
    try:
        _, header = next(rows)
    except StopIteration:
        raise SchemaError("empty input: no header row") from None
    positions: dict[str, int] = {}
    for field in CANONICAL_COLUMNS:
        col = colmap[field]
        if col not in header:
            raise SchemaError(f"missing required column: {col!r}")
        positions[field] = header.index(col)
    flag_col = colmap.get("zero_flow", "zero_flow")
    flag_pos = header.index(flag_col) if flag_col in header else None

    records: list[SegmentRecord] = []
    rejects: list[tuple[int, str]] = []
    rows_read = 0
    for lineno, fields in rows:
        rows_read += 1
        if len(fields) != len(header):
            rejects.append((lineno, "field count mismatch"))
            continue
        candidate = {f: fields[i] for f, i in positions.items()}
        if flag_pos is not None:
            candidate["zero_flow"] = fields[flag_pos]
        record, reason = check_record(candidate)
        if record is None:
            rejects.append((lineno, reason))
        else:
            records.append(record)
    report = ValidationReport(rows_read, len(records), tuple(rejects))
    return records, report


def records_to_csv(records: Iterable[SegmentRecord]) -> str:
    """Serialize records back to the canonical format (exact round-trip)."""
    records = list(records)
    with_flag = any(r.zero_flow for r in records)
    header = list(CANONICAL_COLUMNS) + (["zero_flow"] if with_flag else [])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in records:
        fields = [
            r.segment_id, r.tract_id, format_rfc3339(r.bin_start), r.road_type,
            fmt_float(r.length_mi), str(r.lanes), str(r.probe_count),
            fmt_float(r.mean_speed_mph), fmt_float(r.volume_veh),
        ]
        if with_flag:
            fields.append("1" if r.zero_flow else "0")
        writer.writerow(fields)
    return buf.getvalue()


def write_segment_records(path: str | os.PathLike, records: Iterable[SegmentRecord]) -> None:
    atomic_write_text(path, records_to_csv(records))


def write_reject_report(path: str | os.PathLike, report: ValidationReport) -> None:
    """Side-channel reject report, one JSON object per line."""
    lines = [json.dumps({"line": lineno, "reason": reason}) for lineno, reason in report.rejects]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def _finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")
