"""Per-cell geometry (distance, azimuth, elevation), the channel layer and GIS rasters.

Angles follow the antenna frame: the horizontal plane is first rotated by the
antenna azimuth (radians, counter-clockwise from east), then rotated about the
new y-axis by the tilt (positive = downtilt). ``Phi`` is the azimuth in that
frame and ``Theta`` the elevation, ``arcsin(dz' / d)``.

The channel layer is stored as predicted received power,
``L = P_tx + G - FSPL - L_H`` in dBm. The pattern ``G`` takes the zenith angle,
so it is evaluated at ``pi/2 - Theta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import RX_HEIGHT_M, SPEED_OF_LIGHT
from .antenna import AntennaParams, pattern_gain
from .geoproj import GeoTransform


@dataclass
class FeatureStack:
    D: np.ndarray
    Phi: np.ndarray
    Theta: np.ndarray
    L: np.ndarray
    height: np.ndarray
    landuse: np.ndarray
    road: np.ndarray
    transform: GeoTransform

    def layers(self):
        return {
            "distance": self.D, "azimuth": self.Phi, "elevation": self.Theta, "channel": self.L,
            "height": self.height, "landuse": self.landuse, "road": self.road,
        }


def antenna_frame(dx, dy, dz, azimuth, tilt):
    """Distance, azimuth and elevation of offsets (dx, dy, dz) in the antenna frame."""
    dx, dy, dz = (np.asarray(a, dtype=float) for a in (dx, dy, dz))
    ca, sa = math.cos(azimuth), math.sin(azimuth)
    xr = ca * dx + sa * dy
    yr = -sa * dx + ca * dy
    ct, st = math.cos(tilt), math.sin(tilt)
    xt = ct * xr - st * dz
    zt = st * xr + ct * dz
    d = np.sqrt(dx ** 2 + dy ** 2 + dz ** 2)
    phi = np.arctan2(yr, xt)
    phi = np.where(phi <= -math.pi, math.pi, phi)
    theta = np.arcsin(np.clip(zt / d, -1.0, 1.0))
    return d, phi, theta


def compute_geometry(transform: GeoTransform, antenna, rx_height=RX_HEIGHT_M, offset=(0.0, 0.0)):
    """(D, Phi, Theta) over the grid; ``offset`` places the antenna away from the grid origin."""
    x, y = transform.cell_centres()
    dz = np.full_like(x, rx_height - antenna.height_m)
    return antenna_frame(x - offset[0], y - offset[1], dz, antenna.azimuth_rad, antenna.tilt_rad)


def fspl_db(d, f):
    return 20.0 * np.log10(4.0 * math.pi * np.asarray(d, dtype=float) * f / SPEED_OF_LIGHT)


def compute_channel_layer(D, Phi, Theta, pattern: AntennaParams | None, f, P_tx, L_h):
    gain = 0.0 if pattern is None else pattern_gain(pattern, math.pi / 2 - np.asarray(Theta), Phi)
    return P_tx + gain - fspl_db(D, f) - L_h


# -- GIS rasterization ----------------------------------------------------

def winding_number(px, py, polygon):
    """Winding number of each point about a closed polygon (vectorized over points)."""
    poly = np.asarray(polygon, dtype=float)
    wn = np.zeros(np.shape(px), dtype=np.int64)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, c, d in zip(x0, y0, x1, y1):
        is_left = (c - a) * (py - b) - (px - a) * (d - b)
        up = (b <= py) & (d > py) & (is_left > 0)
        down = (b > py) & (d <= py) & (is_left < 0)
        wn += up.astype(np.int64) - down.astype(np.int64)
    return wn


def _polygon_mask(transform, x, y, polygon_xy):
    """Boolean mask of cells whose centre is inside the polygon; only the bbox is tested."""
    mask = np.zeros(x.shape, dtype=bool)
    res = transform.resolution
    half = transform.width // 2
    xmin, ymin = polygon_xy.min(axis=0)
    xmax, ymax = polygon_xy.max(axis=0)
    c0 = max(int(math.floor(xmin / res + half)), 0)
    c1 = min(int(math.ceil(xmax / res + half)) + 1, transform.width)
    r0 = max(int(math.floor(half - ymax / res)), 0)
    r1 = min(int(math.ceil(half - ymin / res)) + 1, transform.height)
    if c0 >= c1 or r0 >= r1:
        return mask
    sub = winding_number(x[r0:r1, c0:c1], y[r0:r1, c0:c1], polygon_xy) != 0
    mask[r0:r1, c0:c1] = sub
    return mask


def _lonlat_to_xy(transform, ring):
    arr = np.asarray(ring, dtype=float)
    x, y = transform.to_local(arr[:, 1], arr[:, 0])
    return np.column_stack([x, y])


def rasterize_gis(scene, transform: GeoTransform):
    """(height, landuse, road) layers; later polygons overwrite earlier ones."""
    x, y = transform.cell_centres()
    height = np.zeros(x.shape)
    landuse = np.zeros(x.shape, dtype=np.int64)
    road = np.zeros(x.shape, dtype=bool)
    for lu in scene.landuse:
        landuse[_polygon_mask(transform, x, y, _lonlat_to_xy(transform, lu.polygon))] = lu.landuse_class
    for b in scene.buildings:
        height[_polygon_mask(transform, x, y, _lonlat_to_xy(transform, b.footprint))] = b.height
    half_width = transform.resolution / 2
    for line in scene.roads:
        pts = _lonlat_to_xy(transform, line)
        for p, q in zip(pts[:-1], pts[1:]):
            road |= _segment_distance(x, y, p, q) <= half_width
    return height, landuse, road


def _segment_distance(x, y, p, q):
    d = q - p
    denom = float(d @ d)
    if denom == 0:
        return np.hypot(x - p[0], y - p[1])
    t = np.clip(((x - p[0]) * d[0] + (y - p[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(x - p[0] - t * d[0], y - p[1] - t * d[1])


def build_features(scene, antenna, transform: GeoTransform, pattern: AntennaParams | None, rx_height=RX_HEIGHT_M):
    D, Phi, Theta = compute_geometry(transform, antenna, rx_height)
    L = compute_channel_layer(D, Phi, Theta, pattern, antenna.frequency_hz, antenna.tx_power_dbm, antenna.hardware_loss_db)
    height, landuse, road = rasterize_gis(scene, transform)
    return FeatureStack(D, Phi, Theta, L, height, landuse, road, transform)
