"""Per-segment flow/density/speed states and tract-level network aggregation.

Aggregation uses lane-mile-weighted generalized definitions: per-lane flow
and density are averaged with lane-mile weights, totals (VMT, VHT,
lane-miles) are summed, and network speed is VMT/VHT. With these
definitions mean_flow = mean_density * mean_speed holds as an exact
identity, which the tests rely on.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import format_rfc3339, fmt_float, parse_rfc3339, read_csv_dicts, write_csv
from .errors import ModelError, SchemaError
from .ingest import SegmentRecord

DEFAULT_BIN_HOURS = 0.25
DEFAULT_DENSITY_BIN_WIDTH = 2.0  # veh/lane/mile

NETWORK_STATE_COLUMNS = (
    "tract_id", "bin_start", "mean_density", "mean_flow", "mean_speed",
    "total_vmt", "total_vht", "total_lane_miles", "segment_count",
)


@dataclass(frozen=True)
class SegmentFlowState:
    """Traffic state of one segment in one bin, stamped with its identity."""

    segment_id: str
    tract_id: str
    bin_start: datetime
    flow_per_lane: float  # veh/hr/lane
    density: float        # veh/lane/mile
    speed: float          # mph
    vmt: float            # vehicle-miles
    vht: float            # vehicle-hours
    lane_miles: float


@dataclass(frozen=True)
class NetworkState:
    """Tract x bin aggregate: one MFD point plus its supporting totals."""

    tract_id: str
    bin_start: datetime
    mean_flow: float
    mean_density: float
    mean_speed: float
    total_vmt: float
    total_vht: float
    total_lane_miles: float
    segment_count: int


@dataclass(frozen=True)
class MfdPointSet:
    """Per-tract (density, flow) scatter with parallel bin timestamps."""

    tract_id: str
    bin_starts: tuple[datetime, ...]
    densities: tuple[float, ...]
    flows: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.densities)


def segment_state(rec: SegmentRecord, bin_hours: float = DEFAULT_BIN_HOURS) -> SegmentFlowState:
    """Convert a validated record into its flow/density/speed state.

    flow_per_lane = volume / (lanes * bin_hours); density = flow / speed;
    vmt = volume * length; vht = vmt / speed; lane_miles = lanes * length.
    """
    if bin_hours <= 0:
        raise ValueError("bin_hours must be positive")
    if rec.mean_speed_mph <= 0:
        if rec.volume_veh > 0:
            raise ModelError(f"segment {rec.segment_id}: zero speed with positive volume")
        speed = 0.0
    else:
        speed = rec.mean_speed_mph
    flow = rec.volume_veh / (rec.lanes * bin_hours)
    vmt = rec.volume_veh * rec.length_mi
    if speed > 0:
        density = flow / speed
        vht = vmt / speed
    else:
        density = 0.0
        vht = 0.0
    return SegmentFlowState(
        segment_id=rec.segment_id,
        tract_id=rec.tract_id,
        bin_start=rec.bin_start,
        flow_per_lane=flow,
        density=density,
        speed=speed,
        vmt=vmt,
        vht=vht,
        lane_miles=rec.lanes * rec.length_mi,
    )


def aggregate_tract(states: Sequence[SegmentFlowState], tract_id: str,
                    bin_start: datetime) -> NetworkState:
    """Aggregate one tract-bin group of segment states into a NetworkState.

    Summation order is fixed (sorted by segment_id) so results are
    bitwise-reproducible regardless of input ordering.
    """
    if not states:
        raise ValueError("aggregate_tract requires a nonempty state list")
    for s in states:
        if s.tract_id != tract_id:
            raise ValueError(f"mixed tract ids: {s.tract_id!r} vs {tract_id!r}")
        if s.bin_start != bin_start:
            raise ValueError(f"mixed bins: {s.bin_start} vs {bin_start}")
    ordered = sorted(states, key=lambda s: s.segment_id)
    lane_miles = 0.0
    vmt = 0.0
    vht = 0.0
    flow_w = 0.0
    density_w = 0.0
    for s in ordered:
        lane_miles += s.lane_miles
        vmt += s.vmt
        vht += s.vht
        flow_w += s.flow_per_lane * s.lane_miles
        density_w += s.density * s.lane_miles
    if lane_miles <= 0:
        raise ValueError("aggregate_tract requires positive total lane-miles")
    mean_flow = flow_w / lane_miles
    mean_density = density_w / lane_miles
    mean_speed = vmt / vht if vht > 0 else 0.0  # zero-flow sentinel
    return NetworkState(
        tract_id=tract_id,
        bin_start=bin_start,
        mean_flow=mean_flow,
        mean_density=mean_density,
        mean_speed=mean_speed,
        total_vmt=vmt,
        total_vht=vht,
        total_lane_miles=lane_miles,
        segment_count=len(ordered),
    )


def aggregate_network(records: Iterable[SegmentRecord],
                      bin_hours: float = DEFAULT_BIN_HOURS) -> list[NetworkState]:
    """Group records by (tract, bin) and aggregate each group.

    Zero-volume groups still emit a (zero-flow) NetworkState so tract time
    series stay rectangular. Output is sorted by (tract_id, bin_start).
    """
    groups: dict[tuple[str, datetime], list[SegmentFlowState]] = {}
    for rec in records:
        state = segment_state(rec, bin_hours)
        groups.setdefault((rec.tract_id, rec.bin_start), []).append(state)
    return [
        aggregate_tract(groups[key], key[0], key[1])
        for key in sorted(groups, key=lambda k: (k[0], k[1]))
    ]


def build_mfd(states: Sequence[NetworkState], tract_id: str | None = None) -> MfdPointSet:
    """Collect one tract's network states into an MFD point set, one point per bin."""
    if not states:
        return MfdPointSet(tract_id or "", (), (), ())
    tids = {s.tract_id for s in states}
    if len(tids) > 1:
        raise ValueError(f"build_mfd got states from multiple tracts: {sorted(tids)}")
    tid = tids.pop()
    if tract_id is not None and tract_id != tid:
        raise ValueError(f"tract_id mismatch: {tract_id!r} vs states' {tid!r}")
    ordered = sorted(states, key=lambda s: s.bin_start)
    bins = tuple(s.bin_start for s in ordered)
    if len(set(bins)) != len(bins):
        raise ValueError("duplicate bins in MFD input")
    return MfdPointSet(
        tract_id=tid,
        bin_starts=bins,
        densities=tuple(s.mean_density for s in ordered),
        flows=tuple(s.mean_flow for s in ordered),
    )


def estimate_capacity(points: MfdPointSet,
                      density_bin_width: float = DEFAULT_DENSITY_BIN_WIDTH) -> tuple[float, float]:
    """Estimate (capacity_flow, critical_density) from an MFD scatter.

    Points are binned by density; capacity is the largest per-bin median
    flow and the critical density is the center of that bin, ties broken
    toward lower density. Requires at least 10 points.
    """
    if density_bin_width <= 0:
        raise ValueError("density_bin_width must be positive")
    if len(points) < 10:
        raise ModelError(f"estimate_capacity needs >= 10 points, got {len(points)}")
    density = np.asarray(points.densities, dtype=float)
    flow = np.asarray(points.flows, dtype=float)
    idx = np.floor(density / density_bin_width).astype(int)
    capacity = -np.inf
    critical = 0.0
    for b in np.unique(idx):  # ascending: first strict max keeps lower density on ties
        med = float(np.median(flow[idx == b]))
        if med > capacity:
            capacity = med
            critical = (b + 0.5) * density_bin_width
    return capacity, critical


def network_states_to_rows(states: Iterable[NetworkState]) -> list[list[str]]:
    return [
        [s.tract_id, format_rfc3339(s.bin_start), fmt_float(s.mean_density),
         fmt_float(s.mean_flow), fmt_float(s.mean_speed), fmt_float(s.total_vmt),
         fmt_float(s.total_vht), fmt_float(s.total_lane_miles), str(s.segment_count)]
        for s in states
    ]


def write_network_states(path: str | os.PathLike, states: Iterable[NetworkState],
                         provenance: str | None = None) -> None:
    write_csv(path, NETWORK_STATE_COLUMNS, network_states_to_rows(states), provenance)


def read_network_states(source: str | os.PathLike | Iterable[str]) -> list[NetworkState]:
    _, rows = read_csv_dicts(source, required=NETWORK_STATE_COLUMNS)
    states = []
    for lineno, row in rows:
        try:
            states.append(NetworkState(
                tract_id=row["tract_id"],
                bin_start=parse_rfc3339(row["bin_start"]),
                mean_density=float(row["mean_density"]),
                mean_flow=float(row["mean_flow"]),
                mean_speed=float(row["mean_speed"]),
                total_vmt=float(row["total_vmt"]),
                total_vht=float(row["total_vht"]),
                total_lane_miles=float(row["total_lane_miles"]),
                segment_count=int(row["segment_count"]),
            ))
        except ValueError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from exc
    return states


def group_by_tract(states: Iterable[NetworkState]) -> Mapping[str, list[NetworkState]]:
    by_tract: dict[str, list[NetworkState]] = {}
    for s in states:
        by_tract.setdefault(s.tract_id, []).append(s)
    return by_tract
