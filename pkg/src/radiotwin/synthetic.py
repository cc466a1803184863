"""Synthetic scenes with planted antenna/material parameters and noisy measurements."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .antenna import AntennaParams, MaterialProps
from .geoproj import GeoTransform
from .ingest import AntennaConfig, Building, MeasurementRecord, Scene
from .radiomap import RadioMap, rasterize_measurements
from .scene3d import SceneGeometry, scene_from_footprints
from .solver import PathTable, SolverConfig, TrainableSceneParams, evaluate, itu_material, trace_paths
from .ingest import MATERIALS


@dataclass
class PlantedScene:
    geometry: SceneGeometry
    antenna: AntennaConfig
    antenna_params: AntennaParams
    materials: dict
    table: PathTable
    clean: RadioMap
    records: list
    truth: RadioMap


def random_footprints(rng, n, half_extent, clearance=40.0, size=(15.0, 70.0)):
    """Non-overlapping axis-aligned or rotated rectangles, kept ``clearance`` m from the origin."""
    out = []
    centres = []
    tries = 0
    while len(out) < n and tries < 100 * n:
        tries += 1
        w, h = rng.uniform(*size, 2)
        c = rng.uniform(-0.8 * half_extent, 0.8 * half_extent, 2)
        r = 0.5 * math.hypot(w, h)
        if np.hypot(*c) < clearance + r:
            continue
        if any(np.hypot(*(c - c2)) < r + r2 + 2.0 for c2, r2 in centres):
            continue
        a = rng.uniform(0, math.pi)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        corners = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]]) @ rot.T + c
        out.append(corners)
        centres.append((c, r))
    return out


def random_antenna(rng, antenna_id="site", lat=48.137, lon=11.575):
    return AntennaConfig(
        antenna_id=antenna_id, latitude=lat, longitude=lon,
        height_m=float(rng.uniform(20.0, 30.0)), frequency_hz=2.3e9,
        azimuth_rad=float(rng.uniform(-math.pi, math.pi)), tilt_rad=math.radians(float(rng.uniform(2.0, 8.0))),
        tx_power_dbm=18.0, hardware_loss_db=2.0, bandwidth_hz=20e6,
    )


def random_planted_params(rng, frequency_hz):
    ant = AntennaParams(
        theta0=float(rng.uniform(-0.15, 0.15)),
        hpbw_v=math.radians(float(rng.uniform(15.0, 50.0))),
        hpbw_h=math.radians(float(rng.uniform(45.0, 100.0))),
        g_max=float(rng.uniform(8.0, 22.0)),
    )
    mats = {}
    for name in MATERIALS:
        base = itu_material(name, frequency_hz)
        mats[name] = MaterialProps(
            eps_r=1.0 + (base.eps_r - 1.0) * float(np.exp(rng.uniform(-1.2, 1.2))),
            sigma=base.sigma * float(np.exp(rng.uniform(-1.5, 2.5))),
        )
    return ant, mats


def add_noise_db(rng, values_db, fraction):
    """Multiplicative Gaussian noise of the given relative size on linear power."""
    factor = np.maximum(1.0 + fraction * rng.normal(size=np.shape(values_db)), 0.05)
    return np.asarray(values_db) + 10.0 * np.log10(factor)


def planted_scene(seed, n_buildings=20, n_cells=400, noise=0.1, solver_config: SolverConfig | None = None,
                  resolution=2.0) -> PlantedScene:
    rng = np.random.default_rng(seed)
    cfg = solver_config or SolverConfig(resolution=resolution, seed=seed)
    tf_half = 256 * cfg.resolution
    fps = random_footprints(rng, n_buildings, tf_half)
    heights = rng.uniform(8.0, 40.0, len(fps))
    materials = [MATERIALS[i % 3] for i in range(len(fps))]
    geo = scene_from_footprints(fps, heights, materials)
    antenna = random_antenna(rng, f"site{seed}")
    ant, mats = random_planted_params(rng, antenna.frequency_hz)
    table = trace_paths(geo, antenna, cfg)
    clean = evaluate(table, antenna, ant, mats, cfg.no_coverage_fill)
    records = sample_records(rng, clean, n_cells, noise, antenna.antenna_id)
    truth = rasterize_measurements(records, clean.transform)
    return PlantedScene(geo, antenna, ant, mats, table, clean, records, truth)


def sample_records(rng, radio_map: RadioMap, n_cells, noise, antenna_id, per_cell=1):
    """Outdoor measurement records at random covered cells (one jittered sample per cell)."""
    tf = radio_map.transform
    ok = radio_map.valid & (radio_map.values > -138.0) & (radio_map.values < -42.0)
    cells = np.flatnonzero(ok.ravel())
    pick = np.sort(rng.choice(cells, size=min(n_cells, cells.size), replace=False))
    x, y = tf.cell_centres()
    records = []
    for c in pick:
        for _ in range(per_cell):
            jx, jy = rng.uniform(-0.3, 0.3, 2) * tf.resolution
            lat, lon = tf.to_geographic(x.flat[c] + jx, y.flat[c] + jy)
            rsrp = float(np.clip(add_noise_db(rng, radio_map.values.flat[c], noise), -140.0, -40.0))
            records.append(MeasurementRecord(
                antenna_id=antenna_id, timestamp=1.7e9 + float(len(records)), latitude=float(lat),
                longitude=float(lon), rsrp=rsrp, sinr=float(rng.uniform(-5, 25)), indoor=False,
                accuracy=float(rng.uniform(1.0, 10.0)),
            ))
    return records


def geometry_to_scene(geometry: SceneGeometry, transform: GeoTransform) -> Scene:
    """Express local-metre footprints as a lon/lat Scene."""
    scene = Scene()
    for fp, h, m in zip(geometry.footprints, geometry.heights, geometry.materials):
        lat, lon = transform.to_geographic(fp[:, 0], fp[:, 1])
        scene.buildings.append(Building(tuple(zip(lon.tolist(), lat.tolist())), float(h), m))
    return scene
