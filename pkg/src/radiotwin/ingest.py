"""Parsers and writers for measurements (CSV), antennas (JSON) and GIS scenes (JSON)."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

MEASUREMENT_COLUMNS = (
    "antenna_id", "timestamp", "latitude", "longitude",
    "rsrp_dbm", "sinr_db", "indoor", "accuracy_m",
)
MATERIALS = ("concrete", "brick", "glass")
N_LANDUSE_CLASSES = 24  # codes 0..23


class IngestError(ValueError):
    """Malformed or out-of-range input."""


@dataclass(frozen=True)
class MeasurementRecord:
    antenna_id: str
    timestamp: float
    latitude: float
    longitude: float
    rsrp: float
    sinr: float
    indoor: bool
    accuracy: float

    def __post_init__(self):
        if not -140.0 <= self.rsrp <= -40.0:
            raise IngestError(f"rsrp_dbm={self.rsrp} outside [-140, -40]")
        if not self.accuracy >= 0:
            raise IngestError(f"accuracy_m={self.accuracy} must be >= 0")
        if not -90.0 <= self.latitude <= 90.0:
            raise IngestError(f"latitude={self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise IngestError(f"longitude={self.longitude} outside [-180, 180]")


@dataclass(frozen=True)
class AntennaConfig:
    antenna_id: str
    latitude: float
    longitude: float
    height_m: float
    frequency_hz: float
    azimuth_rad: float
    tilt_rad: float
    tx_power_dbm: float
    hardware_loss_db: float
    bandwidth_hz: float

    def __post_init__(self):
        for name in ("frequency_hz", "bandwidth_hz", "height_m"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise IngestError(f"{name}={value} must be > 0")
        if not -90.0 <= self.latitude <= 90.0:
            raise IngestError(f"latitude={self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise IngestError(f"longitude={self.longitude} outside [-180, 180]")


@dataclass(frozen=True)
class Building:
    footprint: tuple  # ((lon, lat), ...)
    height: float
    material: str


@dataclass(frozen=True)
class LandUse:
    polygon: tuple
    landuse_class: int


@dataclass
class Scene:
    buildings: list = field(default_factory=list)
    landuse: list = field(default_factory=list)
    roads: list = field(default_factory=list)


# -- measurements ---------------------------------------------------------

def _parse_bool01(text, name):
    if text.strip() == "1":
        return True
    if text.strip() == "0":
        return False
    raise IngestError(f"{name}={text!r} must be 0 or 1")


def _row_to_record(row):
    if len(row) != len(MEASUREMENT_COLUMNS):
        raise IngestError(f"expected {len(MEASUREMENT_COLUMNS)} columns, got {len(row)}")
    values = {}
    for name, text in zip(MEASUREMENT_COLUMNS[1:], row[1:]):
        if name == "indoor":
            values[name] = _parse_bool01(text, name)
            continue
        try:
            values[name] = float(text)
        except ValueError:
            raise IngestError(f"{name}={text!r} is not a number") from None
    return MeasurementRecord(
        antenna_id=row[0].strip(),
        timestamp=values["timestamp"],
        latitude=values["latitude"],
        longitude=values["longitude"],
        rsrp=values["rsrp_dbm"],
        sinr=values["sinr_db"],
        indoor=values["indoor"],
        accuracy=values["accuracy_m"],
    )


def parse_measurements(path) -> list[MeasurementRecord]:
    """Read the measurement CSV. A header row naming the columns is optional."""
    records = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if lineno == 1 and row[0].strip() == MEASUREMENT_COLUMNS[0]:
                continue
            try:
                records.append(_row_to_record(row))
            except IngestError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
    return records


def write_measurements(records, path, header=True) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(MEASUREMENT_COLUMNS)
        for r in records:
            writer.writerow([
                r.antenna_id, repr(r.timestamp), repr(r.latitude), repr(r.longitude),
                repr(r.rsrp), repr(r.sinr), "1" if r.indoor else "0", repr(r.accuracy),
            ])


def filter_measurements(records, max_accuracy=10.0, outdoor_only=True):
    """Drop samples with poor position accuracy and, optionally, indoor samples."""
    return [
        r for r in records
        if r.accuracy <= max_accuracy and not (outdoor_only and r.indoor)
    ]


# -- antennas -------------------------------------------------------------

_ANTENNA_FIELDS = tuple(AntennaConfig.__dataclass_fields__)


def _antenna_from_json(obj, where):
    if not isinstance(obj, dict):
        raise IngestError(f"{where}: antenna entry must be an object")
    missing = [f for f in _ANTENNA_FIELDS if f not in obj]
    if missing:
        raise IngestError(f"{where}: missing field(s) {', '.join(missing)}")
    kwargs = {"antenna_id": str(obj["antenna_id"])}
    for name in _ANTENNA_FIELDS[1:]:
        try:
            kwargs[name] = float(obj[name])
        except (TypeError, ValueError):
            raise IngestError(f"{where}: {name}={obj[name]!r} is not a number") from None
    try:
        return AntennaConfig(**kwargs)
    except IngestError as exc:
        raise IngestError(f"{where}: {exc}") from None


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON ({exc})") from None


def parse_antennas(path) -> list[AntennaConfig]:
    """Antenna file: a JSON list of objects (a single object is accepted too)."""
    data = _load_json(path)
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise IngestError(f"{path}: expected a list of antenna objects")
    return [_antenna_from_json(obj, f"{path}[{i}]") for i, obj in enumerate(data)]


def write_antennas(antennas, path) -> None:
    with open(path, "w") as fh:
        json.dump([asdict(a) for a in antennas], fh, indent=2)


# -- scene ----------------------------------------------------------------

def _ring(coords, where):
    try:
        ring = tuple((float(p[0]), float(p[1])) for p in coords)
    except (TypeError, ValueError, IndexError):
        raise IngestError(f"{where}: coordinates must be [lon, lat] pairs") from None
    if len(ring) > 1 and ring[0] == ring[-1]:
        ring = ring[:-1]
    if len(ring) < 3:
        raise IngestError(f"{where}: polygon needs at least 3 distinct vertices")
    for lon, lat in ring:
        if not (-180 <= lon <= 180 and -90 <= lat <= 90):
            raise IngestError(f"{where}: vertex ({lon}, {lat}) out of range")
    return ring


def parse_scene(path) -> Scene:
    from .scene3d import polygon_is_simple  # local import: scene3d imports this module

    data = _load_json(path)
    if not isinstance(data, dict):
        raise IngestError(f"{path}: expected a JSON object with buildings/landuse/roads")
    scene = Scene()
    for i, b in enumerate(data.get("buildings", [])):
        where = f"{path}: buildings[{i}]"
        ring = _ring(b.get("footprint", []), where)
        height = b.get("height_m")
        if not isinstance(height, (int, float)) or not height > 0:
            raise IngestError(f"{where}: height_m={height!r} must be > 0")
        material = b.get("material")
        if material not in MATERIALS:
            raise IngestError(f"{where}: material={material!r} not one of {MATERIALS}")
        if not polygon_is_simple(ring):
            raise IngestError(f"{where}: footprint is self-intersecting or degenerate")
        scene.buildings.append(Building(ring, float(height), material))
    for i, lu in enumerate(data.get("landuse", [])):
        where = f"{path}: landuse[{i}]"
        ring = _ring(lu.get("polygon", []), where)
        cls = lu.get("class")
        if not isinstance(cls, int) or isinstance(cls, bool) or not 0 <= cls < N_LANDUSE_CLASSES:
            raise IngestError(f"{where}: class={cls!r} must be an integer in [0, 23]")
        scene.landuse.append(LandUse(ring, cls))
    for i, road in enumerate(data.get("roads", [])):
        try:
            line = tuple((float(p[0]), float(p[1])) for p in road)
        except (TypeError, ValueError, IndexError):
            raise IngestError(f"{path}: roads[{i}]: coordinates must be [lon, lat] pairs") from None
        if len(line) < 2:
            raise IngestError(f"{path}: roads[{i}]: polyline needs at least 2 points")
        scene.roads.append(line)
    return scene


def scene_to_json(scene: Scene) -> dict:
    return {
        "buildings": [
            {"footprint": [list(p) for p in b.footprint], "height_m": b.height, "material": b.material}
            for b in scene.buildings
        ],
        "landuse": [{"polygon": [list(p) for p in lu.polygon], "class": lu.landuse_class} for lu in scene.landuse],
        "roads": [[list(p) for p in road] for road in scene.roads],
    }


def write_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_json(scene), indent=2))
