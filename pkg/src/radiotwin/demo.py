"""Bundled synthetic demo: three buildings, two antennas, 500 measurements.

The measurements come from the ray tracer run with planted antenna and
material parameters, plus 10 % multiplicative noise on linear power. The
shipped files under ``data/demo`` are the output of ``generate_demo``.
"""
from __future__ import annotations

import json
import math
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from .geoproj import GeoTransform
from .ingest import AntennaConfig, LandUse, Scene, write_antennas, write_measurements, write_scene
from .scene3d import build_scene
from .solver import SolverConfig, evaluate, trace_paths
from .synthetic import geometry_to_scene, random_planted_params, sample_records
from .scene3d import scene_from_footprints

DEMO_ORIGIN = (48.1370, 11.5750)
DEMO_SEED = 7
MEASUREMENTS_PER_ANTENNA = 250
SAMPLE_RADIUS_M = 230.0  # keeps the 90th-percentile distance inside the 512 m extent

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "out",
    "inputs": {"measurements": "measurements.csv", "antennas": "antennas.json", "scene": "scene.json"},
    "filter": {"max_accuracy_m": 10.0, "outdoor_only": True},
    "solver": {"n_rays": 65536, "max_reflections": 7, "resolution": "auto"},
    "calibration": {"modes": ["A", "AMv"], "iterations": 60, "lr": 0.05, "patience": 15,
                    "train_fraction": 0.7},
    "surrogate": {"epochs": 60, "lr": 1e-3, "weight_decay": 5e-2, "batch_size": 128,
                  "calibrate_epochs": 30},
    "poweropt": {"user_counts": [2, 4, 6, 8], "demand_median_bps": 2e6, "demand_sigma": 0.5,
                 "noise_dbm": -94.0, "power_cap_w": 40.0, "pieces": 6, "user_radius_m": 200.0},
    "handover": {"users": 100, "slots": 2000, "gamma": 1.0, "noise_dbm": -125.0, "epsilon": 0.1},
}


def _rectangle(cx, cy, w, h, angle_deg):
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    corners = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    return corners @ rot.T + np.array([cx, cy])


def _lonlat(tf: GeoTransform, pts):
    lat, lon = tf.to_geographic(np.asarray(pts)[:, 0], np.asarray(pts)[:, 1])
    return tuple(zip(lon.tolist(), lat.tolist()))


def demo_inputs():
    """Scene and antennas of the demo, in geographic coordinates."""
    tf = GeoTransform(*DEMO_ORIGIN, 2.0)
    footprints = [_rectangle(55, 45, 40, 25, 10), _rectangle(95, -55, 30, 50, -20), _rectangle(-60, 35, 35, 30, 35)]
    geo = scene_from_footprints(footprints, [18.0, 30.0, 12.0], ["concrete", "brick", "glass"])
    scene = geometry_to_scene(geo, tf)
    scene.landuse.append(LandUse(_lonlat(tf, [[-250, -250], [0, -250], [0, 250], [-250, 250]]), 3))
    scene.landuse.append(LandUse(_lonlat(tf, [[0, -250], [250, -250], [250, 250], [0, 250]]), 11))
    scene.roads.append(_lonlat(tf, [[-250, 5], [350, 5]]))
    scene.roads.append(_lonlat(tf, [[20, -250], [20, 250]]))
    east_lat, east_lon = tf.to_geographic(150.0, -20.0)
    antennas = [
        AntennaConfig("cell_a", DEMO_ORIGIN[0], DEMO_ORIGIN[1], 25.0, 2.3e9, math.radians(30.0),
                      math.radians(5.0), 18.0, 2.0, 20e6),
        AntennaConfig("cell_b", float(east_lat), float(east_lon), 22.0, 2.3e9, math.radians(200.0),
                      math.radians(4.0), 18.0, 2.0, 20e6),
    ]
    return scene, antennas


def generate_demo(out_dir, seed=DEMO_SEED, n_rays=65536):
    """Write measurements.csv, antennas.json, scene.json, config.json and the planted truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene, antennas = demo_inputs()
    records, planted = [], {}
    for ant in antennas:
        geo = build_scene(scene, ant)
        table = trace_paths(geo, ant, SolverConfig(n_rays=n_rays, resolution=2.0, seed=seed))
        params, mats = random_planted_params(rng, ant.frequency_hz)
        clean = evaluate(table, ant, params, mats)
        x, y = clean.transform.cell_centres()
        near = clean.copy()
        near.valid &= np.hypot(x, y) < SAMPLE_RADIUS_M
        records += sample_records(rng, near, MEASUREMENTS_PER_ANTENNA, 0.1, ant.antenna_id)
        planted[ant.antenna_id] = {"antenna": vars(params),
                                   "materials": {k: vars(v) for k, v in mats.items()}}
    records = [replace(r, timestamp=1.7e9 + k) for k, r in enumerate(records)]
    write_measurements(records, out / "measurements.csv")
    write_antennas(antennas, out / "antennas.json")
    write_scene(scene, out / "scene.json")
    (out / "config.json").write_text(json.dumps(DEFAULT_CONFIG, indent=2) + "\n")
    (out / "planted.json").write_text(json.dumps(planted, indent=2, sort_keys=True) + "\n")
    return out


def demo_dir() -> Path:
    """Location of the shipped demo files."""
    return Path(str(resources.files("radiotwin") / "data" / "demo"))
