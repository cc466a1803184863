"""Ground-truth RSRP radio maps from sparse measurements, plus raster file I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import GRID_SIZE, NO_COVERAGE_DBM
from .geoproj import GeoTransform

# max distance from antenna (m) -> resolution (m/cell)
EXTENTS = {512: 2.0, 768: 3.0, 1024: 4.0, 1280: 5.0}
HEATMAP_RANGE_DBM = (-140.0, -40.0)


@dataclass
class RadioMap:
    values: np.ndarray  # (512, 512) dBm
    valid: np.ndarray   # (512, 512) bool
    transform: GeoTransform

    @property
    def coverage_fraction(self) -> float:
        return float(np.count_nonzero(self.valid)) / self.valid.size

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def copy(self) -> "RadioMap":
        return RadioMap(self.values.copy(), self.valid.copy(), self.transform)


def classify_extent(records, antenna):
    """Snap the 90th-percentile antenna distance to the smallest grid extent covering it."""
    if not records:
        raise ValueError("classify_extent needs at least one record")
    tf = GeoTransform(antenna.latitude, antenna.longitude, 5.0)
    lat = np.array([r.latitude for r in records])
    lon = np.array([r.longitude for r in records])
    x, y = tf.to_local(lat, lon)
    p90 = float(np.percentile(np.hypot(x, y), 90))
    for extent in sorted(EXTENTS):
        if extent >= p90:
            return extent, EXTENTS[extent]
    largest = max(EXTENTS)
    return largest, EXTENTS[largest]


def cell_indices(records, transform: GeoTransform):
    """Flat cell index per record, -1 for records outside the grid."""
    lat = np.array([r.latitude for r in records], dtype=float)
    lon = np.array([r.longitude for r in records], dtype=float)
    row, col = transform.local_to_cell(*transform.to_local(lat, lon))
    return np.where(row >= 0, row * transform.width + col, -1)


def grouped_median(keys, values):
    """Median of ``values`` per distinct key; even counts use the midpoint."""
    keys = np.asarray(keys)
    values = np.asarray(values, dtype=float)
    order = np.lexsort((values, keys))
    k, v = keys[order], values[order]
    uniq, start, count = np.unique(k, return_index=True, return_counts=True)
    lo = v[start + (count - 1) // 2]
    hi = v[start + count // 2]
    return uniq, 0.5 * (lo + hi), count


def rasterize_measurements(records, transform: GeoTransform) -> RadioMap:
    values = np.zeros((transform.height, transform.width))
    valid = np.zeros_like(values, dtype=bool)
    if records:
        flat = cell_indices(records, transform)
        rsrp = np.array([r.rsrp for r in records], dtype=float)
        keep = flat >= 0
        if keep.any():
            cells, med, _ = grouped_median(flat[keep], rsrp[keep])
            values.flat[cells] = med
            valid.flat[cells] = True
    return RadioMap(values, valid, transform)


def cell_counts(records, transform: GeoTransform) -> np.ndarray:
    flat = cell_indices(records, transform)
    flat = flat[flat >= 0]
    return np.bincount(flat, minlength=transform.width * transform.height).reshape(transform.height, transform.width)


def split_records(records, train_fraction=0.7, seed=0):
    """Seeded random partition into (train, validation) with round(f*n) training items."""
    items = list(records)
    n = len(items)
    if n < 2:
        raise ValueError("need at least 2 records to split")
    n_train = int(round(train_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    train = [items[i] for i in sorted(perm[:n_train])]
    val = [items[i] for i in sorted(perm[n_train:])]
    return train, val


# -- raster files ---------------------------------------------------------

def mask_to_rle(mask: np.ndarray) -> list:
    """Run lengths of the flattened mask, starting with a run of False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_to_mask(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, value = 0, False
    for r in runs:
        flat[pos:pos + r] = value
        pos += r
        value = not value
    if pos != flat.size:
        raise ValueError(f"run lengths cover {pos} cells, expected {flat.size}")
    return flat.reshape(shape)


def write_raster(path, values, transform: GeoTransform, valid=None, extra=None) -> None:
    """Raw little-endian float32 row-major grid with a JSON sidecar at ``path + '.json'``."""
    path = Path(path)
    arr = np.asarray(values, dtype="<f4")
    if arr.shape != (transform.height, transform.width):
        raise ValueError(f"raster shape {arr.shape} does not match transform")
    path.write_bytes(arr.tobytes(order="C"))
    if valid is None:
        valid = np.ones(arr.shape, dtype=bool)
    sidecar = {
        "transform": transform.to_json(),
        "mask_rle": mask_to_rle(valid),
        "coverage_fraction": float(np.count_nonzero(valid)) / valid.size,
    }
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_raster(path):
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    tf = GeoTransform.from_json(meta["transform"])
    values = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(tf.height, tf.width).astype(float)
    valid = rle_to_mask(meta["mask_rle"], values.shape)
    return values, valid, tf, meta


def save_radiomap(radio_map: RadioMap, path, extra=None) -> None:
    write_raster(path, radio_map.values, radio_map.transform, radio_map.valid, extra)


def load_radiomap(path) -> RadioMap:
    values, valid, tf, _ = read_raster(path)
    return RadioMap(values, valid, tf)


def heatmap_bytes(values, lo=HEATMAP_RANGE_DBM[0], hi=HEATMAP_RANGE_DBM[1]) -> bytes:
    """8-bit binary PGM, linear in dBm over [lo, hi]."""
    v = np.asarray(values, dtype=float)
    scaled = np.clip(np.round((v - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    h, w = scaled.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + scaled.tobytes()


def write_heatmap(path, values) -> None:
    Path(path).write_bytes(heatmap_bytes(values))


def empty_map(transform: GeoTransform, fill=NO_COVERAGE_DBM) -> RadioMap:
    return RadioMap(np.full((GRID_SIZE, GRID_SIZE), float(fill)), np.zeros((GRID_SIZE, GRID_SIZE), bool), transform)
