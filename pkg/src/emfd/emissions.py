"""Speed-binned emission-rate lookup and tract-level emission aggregation.

Rates are stored per (vehicle_type, vintage_group, road_type) as grams/mile
at ascending speed-bin centers; lookups interpolate linearly between
centers and clamp to the end rates outside the covered range. Only
running-exhaust per-distance rates are modeled.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import format_rfc3339, fmt_float, parse_rfc3339, read_csv_dicts, write_csv
from .errors import MissingRateError, SchemaError
from .ingest import SegmentRecord
from .traffic import NetworkState, SegmentFlowState

RATE_TABLE_COLUMNS = (
    "species", "vehicle_type", "vintage_group", "road_type", "speed_mph", "rate_g_per_mi",
)

EMISSION_STATE_COLUMNS = (
    "tract_id", "bin_start", "mean_density", "mean_flow", "mean_speed",
    "total_vmt", "total_vht", "total_lane_miles", "segment_count",
    "total_grams", "rate_g_per_veh_mi",
)

RateKey = tuple[str, str, str]  # (vehicle_type, vintage_group, road_type)


@dataclass(frozen=True)
class EmissionRateTable:
    """Immutable rate lookup keyed by (vehicle_type, vintage_group, road_type)."""

    species: str
    speed_bin_centers: tuple[float, ...]
    entries: Mapping[RateKey, tuple[float, ...]]

    def __post_init__(self) -> None:
        centers = np.asarray(self.speed_bin_centers, dtype=float)
        if centers.size == 0:
            raise ValueError("rate table needs at least one speed bin center")
        if centers[0] <= 0 or np.any(np.diff(centers) <= 0):
            raise ValueError("speed_bin_centers must be strictly ascending and > 0")
        for key, rates in self.entries.items():
            if len(rates) != centers.size:
                raise ValueError(f"entry {key} has {len(rates)} rates for {centers.size} bins")
            if any(r < 0 for r in rates):
                raise ValueError(f"entry {key} has negative rates")


@dataclass(frozen=True)
class FleetMix:
    """Fractional fleet composition over (vehicle_type, vintage_group) pairs."""

    shares: Mapping[tuple[str, str], float]

    def __post_init__(self) -> None:
        total = sum(self.shares.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"fleet shares sum to {total}, expected 1")
        if any(s < 0 or s > 1 for s in self.shares.values()):
            raise ValueError("fleet shares must lie in [0, 1]")


@dataclass(frozen=True)
class EmissionState:
    """Tract x bin emission totals and per-VMT rate."""

    tract_id: str
    bin_start: datetime
    total_grams: float
    rate: float  # grams per vehicle-mile; 0 when total_vmt = 0


@dataclass(frozen=True)
class EmfdPointSet:
    """Per-tract, per-fleet (density, emission rate) scatter."""

    tract_id: str
    fleet_label: str
    bin_starts: tuple[datetime, ...]
    densities: tuple[float, ...]
    rates: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.densities)


def lookup_rate(table: EmissionRateTable, vehicle_type: str, vintage_group: str,
                road_type: str, speed: float) -> float:
    """Interpolated grams/mile for a fleet entry at a link average speed."""
    if speed <= 0:
        raise ValueError(f"speed must be positive, got {speed}")
    key = (vehicle_type, vintage_group, road_type)
    try:
        rates = table.entries[key]
    except KeyError:
        raise MissingRateError(f"no rates for {key} in {table.species} table") from None
    return float(np.interp(speed, table.speed_bin_centers, rates))


def segment_emissions(state: SegmentFlowState, rec: SegmentRecord,
                      table: EmissionRateTable, fleet: FleetMix) -> float:
    """Total grams for one segment-bin: vmt x fleet-share-weighted rate."""
    if state.vmt == 0:
        return 0.0
    rate = 0.0
    for (vehicle_type, vintage_group), share in sorted(fleet.shares.items()):
        rate += share * lookup_rate(table, vehicle_type, vintage_group,
                                    rec.road_type, state.speed)
    return state.vmt * rate


def aggregate_tract_emissions(segments: Sequence[tuple[str, float, float]],
                              tract_id: str, bin_start: datetime) -> EmissionState:
    """Combine per-segment (segment_id, grams, vmt) triples for one tract-bin.

    Reduction order is fixed by segment_id so totals are reproducible.
    """
    if not segments:
        raise ValueError("aggregate_tract_emissions requires a nonempty list")
    total_grams = 0.0
    total_vmt = 0.0
    for _, grams, vmt in sorted(segments, key=lambda t: t[0]):
        total_grams += grams
        total_vmt += vmt
    rate = total_grams / total_vmt if total_vmt > 0 else 0.0
    return EmissionState(tract_id=tract_id, bin_start=bin_start,
                         total_grams=total_grams, rate=rate)


def compute_emission_states(records: Iterable[SegmentRecord],
                            table: EmissionRateTable, fleet: FleetMix,
                            bin_hours: float = 0.25) -> list[EmissionState]:
    """Per-(tract, bin) emission states for a record stream, sorted by key."""
    from .traffic import segment_state

    groups: dict[tuple[str, datetime], list[tuple[str, float, float]]] = {}
    for rec in records:
        st = segment_state(rec, bin_hours)
        grams = segment_emissions(st, rec, table, fleet)
        groups.setdefault((rec.tract_id, rec.bin_start), []).append(
            (rec.segment_id, grams, st.vmt))
    return [
        aggregate_tract_emissions(groups[key], key[0], key[1])
        for key in sorted(groups, key=lambda k: (k[0], k[1]))
    ]


def build_emfd(network_states: Sequence[NetworkState],
               emission_states: Sequence[EmissionState],
               fleet_label: str) -> EmfdPointSet:
    """Pair one tract's mean densities with its emission rates, bin by bin."""
    if not network_states and not emission_states:
        return EmfdPointSet("", fleet_label, (), (), ())
    tids = {s.tract_id for s in network_states} | {s.tract_id for s in emission_states}
    if len(tids) != 1:
        raise ValueError(f"build_emfd expects a single tract, got {sorted(tids)}")
    net_by_bin = {s.bin_start: s for s in network_states}
    emi_by_bin = {s.bin_start: s for s in emission_states}
    if set(net_by_bin) != set(emi_by_bin):
        missing = set(net_by_bin) ^ set(emi_by_bin)
        raise ValueError(f"network/emission bins misaligned at {sorted(missing)[:3]}")
    bins = sorted(net_by_bin)
    return EmfdPointSet(
        tract_id=tids.pop(),
        fleet_label=fleet_label,
        bin_starts=tuple(bins),
        densities=tuple(net_by_bin[b].mean_density for b in bins),
        rates=tuple(emi_by_bin[b].rate for b in bins),
    )


def write_rate_table(path: str | os.PathLike, table: EmissionRateTable,
                     provenance: str | None = None) -> None:
    rows = []
    for key in sorted(table.entries):
        vehicle_type, vintage_group, road_type = key
        for center, rate in zip(table.speed_bin_centers, table.entries[key]):
            rows.append([table.species, vehicle_type, vintage_group, road_type,
                         fmt_float(center), fmt_float(rate)])
    write_csv(path, RATE_TABLE_COLUMNS, rows, provenance)


def read_rate_table(source: str | os.PathLike | Iterable[str],
                    species: str | None = None) -> EmissionRateTable:
    """Load a rate table file; every key must cover every bin center."""
    _, rows = read_csv_dicts(source, required=RATE_TABLE_COLUMNS)
    if not rows:
        raise SchemaError("rate table has no rows")
    by_key: dict[RateKey, dict[float, float]] = {}
    species_seen = set()
    for lineno, row in rows:
        if species is not None and row["species"] != species:
            continue
        species_seen.add(row["species"])
        key = (row["vehicle_type"], row["vintage_group"], row["road_type"])
        try:
            speed = float(row["speed_mph"])
            rate = float(row["rate_g_per_mi"])
        except ValueError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from exc
        cell = by_key.setdefault(key, {})
        if speed in cell:
            raise SchemaError(f"line {lineno}: duplicate speed bin {speed} for {key}")
        cell[speed] = rate
    if len(species_seen) > 1:
        raise SchemaError(f"rate table mixes species {sorted(species_seen)}; pass species=")
    if not by_key:
        raise SchemaError(f"rate table has no rows for species {species!r}")
    centers = sorted({s for cell in by_key.values() for s in cell})
    entries: dict[RateKey, tuple[float, ...]] = {}
    for key, cell in by_key.items():
        if sorted(cell) != centers:
            raise SchemaError(f"entry {key} does not cover every speed bin center")
        entries[key] = tuple(cell[s] for s in centers)
    return EmissionRateTable(species=species_seen.pop(),
                             speed_bin_centers=tuple(centers), entries=entries)


def emission_states_to_rows(network_states: Sequence[NetworkState],
                            emission_states: Sequence[EmissionState]) -> list[list[str]]:
    """Joined export rows: NetworkState columns plus total_grams and rate."""
    emi_by_key = {(s.tract_id, s.bin_start): s for s in emission_states}
    rows = []
    for ns in network_states:
        es = emi_by_key.get((ns.tract_id, ns.bin_start))
        if es is None:
            raise ValueError(f"no emission state for {(ns.tract_id, ns.bin_start)}")
        rows.append([
            ns.tract_id, format_rfc3339(ns.bin_start), fmt_float(ns.mean_density),
            fmt_float(ns.mean_flow), fmt_float(ns.mean_speed), fmt_float(ns.total_vmt),
            fmt_float(ns.total_vht), fmt_float(ns.total_lane_miles),
            str(ns.segment_count), fmt_float(es.total_grams), fmt_float(es.rate),
        ])
    return rows


def write_emission_states(path: str | os.PathLike, network_states: Sequence[NetworkState],
                          emission_states: Sequence[EmissionState],
                          provenance: str | None = None) -> None:
    write_csv(path, EMISSION_STATE_COLUMNS,
              emission_states_to_rows(network_states, emission_states), provenance)


def read_emission_states(source: str | os.PathLike | Iterable[str],
                         ) -> tuple[list[NetworkState], list[EmissionState]]:
    _, rows = read_csv_dicts(source, required=EMISSION_STATE_COLUMNS)
    network_states = []
    emission_states = []
    for lineno, row in rows:
        try:
            bin_start = parse_rfc3339(row["bin_start"])
            network_states.append(NetworkState(
                tract_id=row["tract_id"], bin_start=bin_start,
                mean_density=float(row["mean_density"]), mean_flow=float(row["mean_flow"]),
                mean_speed=float(row["mean_speed"]), total_vmt=float(row["total_vmt"]),
                total_vht=float(row["total_vht"]),
                total_lane_miles=float(row["total_lane_miles"]),
                segment_count=int(row["segment_count"])))
            emission_states.append(EmissionState(
                tract_id=row["tract_id"], bin_start=bin_start,
                total_grams=float(row["total_grams"]),
                rate=float(row["rate_g_per_veh_mi"])))
        except ValueError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from exc
    return network_states, emission_states
