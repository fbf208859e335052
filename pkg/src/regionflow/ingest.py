"""Trip-record ingestion: region resolution, hourly flow binning, z-scoring.

A trip contributes an outbound count at its origin region in the hour bin of
its start time, and an inbound count at its destination region in the hour
bin of its end time. The two channels are independent: a trip whose end time
falls outside the window still counts toward the outbound channel, and vice
versa. Endpoints that cannot be resolved to a region are skipped and tallied
rather than failing the run.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

HOUR_SECONDS = 3600

# Channel layout of every (N, T, 2) series tensor.
INBOUND = 0
OUTBOUND = 1
CHANNEL_NAMES = ("inbound", "outbound")

SERIES_FORMAT_VERSION = 1

Point = tuple[float, float]


class IngestError(ValueError):
    """Base class for ingestion failures."""


class SchemaError(IngestError):
    """Malformed input file (missing column, bad row); carries a location hint."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigurationError(IngestError):
    """Operation invoked without the inputs it requires (e.g. no polygons)."""


def parse_timestamp(value: str | int | float) -> float:
    """Parse epoch seconds or an ISO-8601 string into epoch seconds (UTC)."""
    if isinstance(value, (int, float)):
        return float(value)
    text = value.strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


@dataclass(frozen=True)
class TripRecord:
    """One trip. Endpoints are region ids, lon/lat points, or None (unknown)."""

    origin: str | Point | None
    destination: str | Point | None
    start_time: float
    end_time: float

    def __post_init__(self):
        if self.end_time < self.start_time:
            raise ValueError(
                f"trip end_time {self.end_time} precedes start_time {self.start_time}"
            )


@dataclass(frozen=True)
class RegionSet:
    """Ordered set of regions, optionally with polygon geometry (lon/lat rings)."""

    region_ids: tuple[str, ...]
    polygons: dict[str, list[list[Point]]] | None = None

    def __post_init__(self):
        if len(self.region_ids) < 1:
            raise ValueError("RegionSet needs at least one region")
        if len(set(self.region_ids)) != len(self.region_ids):
            raise ValueError("region ids must be unique")
        if self.polygons is not None:
            unknown = set(self.polygons) - set(self.region_ids)
            if unknown:
                raise ValueError(f"polygons reference unknown region ids: {sorted(unknown)}")
            for rid, rings in self.polygons.items():
                for ring in rings:
                    if len(ring) < 4 or ring[0] != ring[-1]:
                        raise ValueError(f"region {rid!r}: polygon ring not closed")

    def index_of(self, region_id: str) -> int | None:
        try:
            return self.region_ids.index(region_id)
        except ValueError:
            return None

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)


@dataclass
class MobilitySeries:
    """Hourly inbound/outbound trip counts: (N, T, 2) non-negative integers."""

    counts: np.ndarray
    region_ids: tuple[str, ...]
    time_origin: float
    bin_seconds: int = HOUR_SECONDS

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 3 or self.counts.shape[2] != 2:
            raise ValueError(f"counts must be (N, T, 2), got {self.counts.shape}")
        if self.counts.shape[0] != len(self.region_ids):
            raise ValueError("region_ids do not align with counts axis 0")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    @property
    def n_regions(self) -> int:
        return self.counts.shape[0]

    @property
    def n_bins(self) -> int:
        return self.counts.shape[1]


@dataclass
class NormalizedSeries:
    """Per-region, per-channel z-scored series with the statistics retained."""

    values: np.ndarray          # (N, T, 2) float
    means: np.ndarray           # (N, 2)
    stds: np.ndarray            # (N, 2), population std; 0 where channel was constant
    region_ids: tuple[str, ...]
    time_origin: float
    bin_seconds: int = HOUR_SECONDS

    @property
    def n_regions(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def subset(self, indices: np.ndarray) -> "NormalizedSeries":
        """View of a subset of regions (used to restrict pretraining)."""
        ids = tuple(self.region_ids[i] for i in indices)
        return NormalizedSeries(
            values=self.values[indices],
            means=self.means[indices],
            stds=self.stds[indices],
            region_ids=ids,
            time_origin=self.time_origin,
            bin_seconds=self.bin_seconds,
        )


# ---------------------------------------------------------------------------
# Point-in-polygon and spatial join
# ---------------------------------------------------------------------------

def _on_segment(px: float, py: float, ax: float, ay: float, bx: float, by: float) -> bool:
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if cross != 0.0:
        return False
    return min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by)


def point_in_polygon(point: Point, rings: list[list[Point]]) -> bool:
    """Even-odd containment over all rings; boundary points count as inside."""
    x, y = point
    for ring in rings:
        for (ax, ay), (bx, by) in zip(ring[:-1], ring[1:]):
            if _on_segment(x, y, ax, ay, bx, by):
                return True
    inside = False
    for ring in rings:
        for (ax, ay), (bx, by) in zip(ring[:-1], ring[1:]):
            # Half-open vertical rule so shared vertices are counted once.
            if (ay > y) != (by > y):
                x_cross = ax + (y - ay) * (bx - ax) / (by - ay)
                if x < x_cross:
                    inside = not inside
    return inside


def spatial_join(point: Point, regions: RegionSet) -> str | None:
    """Id of the first region (in region_ids order) containing the point."""
    if regions.polygons is None:
        raise ConfigurationError("spatial_join requires a RegionSet with polygons")
    for rid in regions.region_ids:
        rings = regions.polygons.get(rid)
        if rings and point_in_polygon(point, rings):
            return rid
    return None


# ---------------------------------------------------------------------------
# Binning
# ---------------------------------------------------------------------------

@dataclass
class BinDiagnostics:
    """Tallies collected while binning one batch of trips."""

    trips_seen: int = 0
    outbound_binned: int = 0
    inbound_binned: int = 0
    unresolved_origins: int = 0
    unresolved_destinations: int = 0
    starts_outside_window: int = 0
    ends_outside_window: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def merge(self, other: "BinDiagnostics") -> "BinDiagnostics":
        merged = BinDiagnostics()
        for key in self.__dict__:
            setattr(merged, key, getattr(self, key) + getattr(other, key))
        return merged


def _resolve_endpoint(endpoint, regions: RegionSet) -> int | None:
    if endpoint is None:
        return None
    if isinstance(endpoint, str):
        return regions.index_of(endpoint)
    rid = spatial_join(endpoint, regions)
    return None if rid is None else regions.index_of(rid)


def bin_trips(
    trips: list[TripRecord],
    regions: RegionSet,
    window_start: float | str,
    window_end: float | str,
) -> tuple[MobilitySeries, BinDiagnostics]:
    """Count trips into hourly inbound/outbound bins over [window_start, window_end)."""
    t0 = parse_timestamp(window_start)
    t1 = parse_timestamp(window_end)
    span = t1 - t0
    if span <= 0:
        raise ValueError("window_end must be after window_start")
    if span % HOUR_SECONDS != 0:
        raise ValueError("window length must be a whole number of hours")
    n_bins = int(span // HOUR_SECONDS)
    counts = np.zeros((regions.n_regions, n_bins, 2), dtype=np.int64)
    diag = BinDiagnostics()

    for trip in trips:
        diag.trips_seen += 1

        origin_idx = _resolve_endpoint(trip.origin, regions)
        if origin_idx is None:
            diag.unresolved_origins += 1
        else:
            out_bin = int((trip.start_time - t0) // HOUR_SECONDS)
            if 0 <= out_bin < n_bins:
                counts[origin_idx, out_bin, OUTBOUND] += 1
                diag.outbound_binned += 1
            else:
                diag.starts_outside_window += 1

        dest_idx = _resolve_endpoint(trip.destination, regions)
        if dest_idx is None:
            diag.unresolved_destinations += 1
        else:
            in_bin = int((trip.end_time - t0) // HOUR_SECONDS)
            if 0 <= in_bin < n_bins:
                counts[dest_idx, in_bin, INBOUND] += 1
                diag.inbound_binned += 1
            else:
                diag.ends_outside_window += 1

    series = MobilitySeries(counts=counts, region_ids=regions.region_ids, time_origin=t0)
    return series, diag


def merge_series(a: MobilitySeries, b: MobilitySeries) -> MobilitySeries:
    """Elementwise sum of two compatible count tensors (for sharded binning)."""
    if a.region_ids != b.region_ids or a.counts.shape != b.counts.shape:
        raise ValueError("series shards are not aligned")
    if a.time_origin != b.time_origin or a.bin_seconds != b.bin_seconds:
        raise ValueError("series shards cover different windows")
    return MobilitySeries(
        counts=a.counts + b.counts,
        region_ids=a.region_ids,
        time_origin=a.time_origin,
        bin_seconds=a.bin_seconds,
    )


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def zscore_values(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-score an (N, T, C) array over the time axis, per region and channel.

    Uses the population standard deviation. Channels with zero variance map
    to all-zeros instead of dividing by zero.
    """
    values = np.asarray(values, dtype=np.float64)
    means = values.mean(axis=1)
    stds = values.std(axis=1)                      # population (ddof=0)
    safe = np.where(stds > 0, stds, 1.0)
    normalized = (values - means[:, None, :]) / safe[:, None, :]
    normalized = np.where((stds > 0)[:, None, :], normalized, 0.0)
    return normalized, means, stds


def zscore(series: MobilitySeries) -> NormalizedSeries:
    values, means, stds = zscore_values(series.counts)
    return NormalizedSeries(
        values=values,
        means=means,
        stds=stds,
        region_ids=series.region_ids,
        time_origin=series.time_origin,
        bin_seconds=series.bin_seconds,
    )


# ---------------------------------------------------------------------------
# Trip CSV reading
# ---------------------------------------------------------------------------

_ID_COLUMNS = ("origin_id", "dest_id")
_POINT_COLUMNS = ("origin_lon", "origin_lat", "dest_lon", "dest_lat")
_TIME_COLUMNS = ("start_time", "end_time")


def _parse_endpoint_id(raw: str | None) -> str | None:
    if raw is None:
        return None
    raw = raw.strip()
    return raw if raw else None


def _parse_endpoint_point(raw_lon: str | None, raw_lat: str | None, line: int) -> Point | None:
    lon = (raw_lon or "").strip()
    lat = (raw_lat or "").strip()
    if not lon or not lat:
        return None
    try:
        return (float(lon), float(lat))
    except ValueError as exc:
        raise SchemaError(f"bad coordinate value: {exc}", line=line) from None


def read_trips_csv(path: str | Path, delimiter: str = ",") -> list[TripRecord]:
    """Read trips from delimited text with a header row.

    Endpoint columns are either origin_id/dest_id or the four coordinate
    columns origin_lon/origin_lat/dest_lon/dest_lat; start_time and end_time
    are ISO-8601 or epoch seconds. Empty endpoint fields yield None endpoints
    (skipped later with a tally); malformed timestamps are schema errors.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        for col in _TIME_COLUMNS:
            if col not in header:
                raise SchemaError(f"missing required column {col!r}")
        id_mode = all(c in header for c in _ID_COLUMNS)
        point_mode = all(c in header for c in _POINT_COLUMNS)
        if not id_mode and not point_mode:
            missing = [c for c in _ID_COLUMNS if c not in header]
            raise SchemaError(
                f"missing required column {missing[0]!r} "
                f"(need origin_id/dest_id or origin_lon/origin_lat/dest_lon/dest_lat)"
            )

        trips: list[TripRecord] = []
        for line_no, row in enumerate(reader, start=2):
            try:
                start = parse_timestamp(row["start_time"])
                end = parse_timestamp(row["end_time"])
            except (ValueError, TypeError) as exc:
                raise SchemaError(f"bad timestamp: {exc}", line=line_no) from None
            if id_mode:
                origin: str | Point | None = _parse_endpoint_id(row.get("origin_id"))
                dest: str | Point | None = _parse_endpoint_id(row.get("dest_id"))
            else:
                origin = _parse_endpoint_point(row.get("origin_lon"), row.get("origin_lat"), line_no)
                dest = _parse_endpoint_point(row.get("dest_lon"), row.get("dest_lat"), line_no)
            try:
                trips.append(TripRecord(origin, dest, start, end))
            except ValueError as exc:
                raise SchemaError(str(exc), line=line_no) from None
    return trips


# ---------------------------------------------------------------------------
# Region reading
# ---------------------------------------------------------------------------

def read_regions(path: str | Path, id_property: str = "id") -> RegionSet:
    """Read regions from a GeoJSON FeatureCollection or a plain id-list file."""
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("{"):
        return _regions_from_geojson(json.loads(text), id_property)
    ids = tuple(line.strip() for line in text.splitlines() if line.strip())
    return RegionSet(region_ids=ids)


def _rings_from_polygon_coords(coords, where: str) -> list[list[Point]]:
    rings = []
    for ring in coords:
        pts = [(float(x), float(y)) for x, y in ring]
        if len(pts) < 4 or pts[0] != pts[-1]:
            raise SchemaError(f"{where}: polygon ring not closed")
        rings.append(pts)
    return rings


def _regions_from_geojson(obj: dict, id_property: str) -> RegionSet:
    if obj.get("type") != "FeatureCollection":
        raise SchemaError("expected a GeoJSON FeatureCollection")
    ids: list[str] = []
    polygons: dict[str, list[list[Point]]] = {}
    for i, feature in enumerate(obj.get("features", [])):
        where = f"feature {i}"
        props = feature.get("properties") or {}
        rid = props.get(id_property, feature.get("id"))
        if rid is None:
            raise SchemaError(f"{where}: no {id_property!r} property and no feature id")
        rid = str(rid)
        geom = feature.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            rings = _rings_from_polygon_coords(geom["coordinates"], where)
        elif gtype == "MultiPolygon":
            rings = []
            for poly in geom["coordinates"]:
                rings.extend(_rings_from_polygon_coords(poly, where))
        else:
            raise SchemaError(f"{where}: unsupported geometry type {gtype!r}")
        ids.append(rid)
        polygons[rid] = rings
    return RegionSet(region_ids=tuple(ids), polygons=polygons)


# ---------------------------------------------------------------------------
# Series container I/O
# ---------------------------------------------------------------------------

def save_series(path: str | Path, series: MobilitySeries | NormalizedSeries,
                config_hash: str = "") -> None:
    """Write a series to the npz container (shape, ids, window, data)."""
    common = dict(
        format_version=np.int64(SERIES_FORMAT_VERSION),
        region_ids=np.array(series.region_ids, dtype=np.str_),
        time_origin=np.float64(series.time_origin),
        bin_seconds=np.int64(series.bin_seconds),
        config_hash=np.str_(config_hash),
    )
    if isinstance(series, MobilitySeries):
        np.savez(path, kind=np.str_("counts"), counts=series.counts, **common)
    else:
        np.savez(path, kind=np.str_("normalized"), values=series.values,
                 means=series.means, stds=series.stds, **common)


def load_series(path: str | Path) -> MobilitySeries | NormalizedSeries:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != SERIES_FORMAT_VERSION:
            raise IngestError(f"unsupported series format version {version}")
        region_ids = tuple(str(r) for r in data["region_ids"])
        time_origin = float(data["time_origin"])
        bin_seconds = int(data["bin_seconds"])
        kind = str(data["kind"])
        if kind == "counts":
            return MobilitySeries(
                counts=data["counts"],
                region_ids=region_ids,
                time_origin=time_origin,
                bin_seconds=bin_seconds,
            )
        if kind == "normalized":
            return NormalizedSeries(
                values=data["values"],
                means=data["means"],
                stds=data["stds"],
                region_ids=region_ids,
                time_origin=time_origin,
                bin_seconds=bin_seconds,
            )
    raise IngestError(f"unknown series kind {kind!r}")


def write_series_csv(path: str | Path, series: MobilitySeries | NormalizedSeries) -> None:
    """Long-format delimited export: region_id, bin, inbound, outbound."""
    data = series.counts if isinstance(series, MobilitySeries) else series.values
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "bin", "inbound", "outbound"])
        for n, rid in enumerate(series.region_ids):
            for t in range(data.shape[1]):
                writer.writerow([rid, t, data[n, t, INBOUND], data[n, t, OUTBOUND]])
