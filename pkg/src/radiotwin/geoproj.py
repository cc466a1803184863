"""Antenna-centred raster grids and the lat/lon <-> cell mapping.

The grid is 512x512 cells and spans ``256 * resolution`` metres on each side
of the antenna, so the antenna sits on the corner shared by cells
(255, 255) and (256, 256) and falls into cell (256, 256) under the floor rule.
Row 0 is the northernmost row, column 0 the westernmost.

Coordinates are WGS84 lon/lat, projected with a local tangent-plane
(equirectangular) approximation around the antenna.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import GRID_SIZE

EARTH_RADIUS_M = 6_371_008.8
RESOLUTIONS = (5.0, 4.0, 3.0, 2.0)


@dataclass(frozen=True)
class GeoTransform:
    origin_lat: float
    origin_lon: float
    resolution: float
    width: int = GRID_SIZE
    height: int = GRID_SIZE

    def __post_init__(self):
        if self.width != GRID_SIZE or self.height != GRID_SIZE:
            raise ValueError(f"grid must be {GRID_SIZE}x{GRID_SIZE}, got {self.width}x{self.height}")
        if float(self.resolution) not in RESOLUTIONS:
            raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {self.resolution}")

    @property
    def half_extent(self) -> float:
        """Distance in metres from the antenna to the grid edge."""
        return self.resolution * self.width / 2

    @property
    def metres_per_deg_lat(self) -> float:
        return math.radians(1.0) * EARTH_RADIUS_M

    @property
    def metres_per_deg_lon(self) -> float:
        return math.radians(1.0) * EARTH_RADIUS_M * math.cos(math.radians(self.origin_lat))

    # local metric frame (east, north) relative to the antenna

    def to_local(self, lat, lon):
        """Project lat/lon (degrees) to east/north offsets in metres."""
        x = (np.asarray(lon, dtype=float) - self.origin_lon) * self.metres_per_deg_lon
        y = (np.asarray(lat, dtype=float) - self.origin_lat) * self.metres_per_deg_lat
        return x, y

    def to_geographic(self, x, y):
        lat = self.origin_lat + np.asarray(y, dtype=float) / self.metres_per_deg_lat
        lon = self.origin_lon + np.asarray(x, dtype=float) / self.metres_per_deg_lon
        return lat, lon

    def local_to_cell(self, x, y):
        """Return integer (row, col) arrays; out-of-grid cells are -1."""
        half = self.width // 2
        col = np.floor(np.asarray(x, dtype=float) / self.resolution + half).astype(np.int64)
        row = np.floor(half - np.asarray(y, dtype=float) / self.resolution).astype(np.int64)
        inside = (row >= 0) & (row < self.height) & (col >= 0) & (col < self.width)
        return np.where(inside, row, -1), np.where(inside, col, -1)

    def cell_centres(self):
        """East/north coordinates of every cell centre, each shaped (H, W)."""
        half = self.width // 2
        xs = (np.arange(self.width) - half + 0.5) * self.resolution
        ys = (half - 0.5 - np.arange(self.height)) * self.resolution
        return np.meshgrid(xs, ys)

    def affine(self):
        """GDAL-style affine coefficients (c, a, b, f, d, e) in local metres."""
        h = self.half_extent
        return (-h, self.resolution, 0.0, h, 0.0, -self.resolution)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "GeoTransform":
        return cls(**data)


def latlon_to_cell(transform: GeoTransform, latitude: float, longitude: float):
    """Cell containing the point, or ``None`` when it falls outside the grid."""
    x, y = transform.to_local(latitude, longitude)
    row, col = transform.local_to_cell(x, y)
    if row < 0:
        return None
    return int(row), int(col)


def cell_to_latlon(transform: GeoTransform, row: int, col: int):
    if not (0 <= row < transform.height and 0 <= col < transform.width):
        raise IndexError(f"cell ({row}, {col}) outside {transform.height}x{transform.width} grid")
    half = transform.width // 2
    x = (col - half + 0.5) * transform.resolution
    y = (half - 0.5 - row) * transform.resolution
    lat, lon = transform.to_geographic(x, y)
    return float(lat), float(lon)


def save_transform(transform: GeoTransform, path) -> None:
    with open(path, "w") as fh:
        json.dump(transform.to_json(), fh, indent=2, sort_keys=True)
