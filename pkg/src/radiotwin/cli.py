"""Command-line pipeline driven by a single JSON run configuration.

Every subcommand reads the config, writes its outputs under
``<output_dir>/<subcommand>/`` and finishes with a ``manifest.json`` holding
input hashes, the seed, library versions and wall-clock time.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 infeasible
optimisation.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import platform
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .ingest import IngestError, filter_measurements, parse_antennas, parse_measurements, parse_scene, write_measurements
from .scene3d import GeometryError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 1, 2, 3

SUBCOMMANDS = (
    "ingest-check", "build-maps", "build-scene", "features", "trace", "calibrate", "surrogate-train",
    "surrogate-calibrate", "metrics", "poweropt-sweep", "handover-sim", "report",
)


HELP = {
    "ingest-check": "parse and filter the inputs, report per-antenna record counts and grid extents",
    "build-maps": "rasterize measurements into per-antenna radio maps",
    "build-scene": "tessellate and extrude buildings to PLY meshes",
    "features": "write the per-antenna feature layers",
    "trace": "ray-trace each antenna with uncalibrated parameters",
    "calibrate": "fit antenna and material parameters to the measurement maps",
    "surrogate-train": "train the per-cell MLP surrogate on training cells of every site",
    "surrogate-calibrate": "fine-tune the surrogate per site",
    "metrics": "score every prediction map on held-out measurement cells",
    "poweropt-sweep": "minimum total transmit power over a user-count ladder",
    "handover-sim": "simulate the online handover controller",
    "report": "collate CSV outputs into a markdown report with plots",
}


class ConfigError(ValueError):
    """Config validation failure; ``errors`` lists ``field: message`` strings."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class Infeasible(RuntimeError):
    pass


# -- configuration --------------------------------------------------------

_DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "inputs": {},
    "filter": {"max_accuracy_m": 10.0, "outdoor_only": True},
    "solver": {"n_rays": 65536, "max_reflections": 7, "resolution": "auto"},
    "calibration": {"modes": ["A", "AMv"], "iterations": 100, "lr": 0.05, "patience": 15, "train_fraction": 0.7},
    "surrogate": {"epochs": 200, "lr": 1e-3, "weight_decay": 5e-2, "batch_size": 128, "calibrate_epochs": 50},
    "poweropt": {"user_counts": [2, 4, 6, 8], "demand_median_bps": 2e6, "demand_sigma": 0.5, "noise_dbm": -94.0,
                 "power_cap_w": 40.0, "pieces": 6, "user_radius_m": 200.0},
    "handover": {"users": 100, "slots": 5000, "gamma": 1.0, "noise_dbm": -125.0, "epsilon": 0.1},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(data, dotted, value):
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError([f"{dotted}: '{k}' is not a section"])
    node[keys[-1]] = value


def parse_override(text):
    """``key.path=value`` with a JSON value (bare strings allowed)."""
    if "=" not in text:
        raise ConfigError([f"--set {text}: expected key=value"])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


@dataclass
class RunConfig:
    path: Path
    data: dict
    seed: int
    output_dir: Path
    measurements: Path
    antennas: Path
    scene: Path
    workers: int = 1
    sha256: str = ""
    sections: dict = field(default_factory=dict)

    def section(self, name):
        return self.data[name]


def _check_number(errors, data, section, key, kind=float, lo=None, hi=None, lo_open=False):
    v = data[section].get(key)
    name = f"{section}.{key}"
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not float(v).is_integer()):
        errors.append(f"{name}: expected {'an integer' if kind is int else 'a number'}, got {v!r}")
        return
    if not math.isfinite(v):
        errors.append(f"{name}: must be finite")
    elif lo is not None and (v <= lo if lo_open else v < lo):
        errors.append(f"{name}: must be {'>' if lo_open else '>='} {lo}, got {v}")
    elif hi is not None and v > hi:
        errors.append(f"{name}: must be <= {hi}, got {v}")


def validate_config(data: dict, base_dir: Path) -> list:
    errors = []
    for key in ("measurements", "antennas", "scene"):
        p = data["inputs"].get(key)
        if not isinstance(p, str) or not p:
            errors.append(f"inputs.{key}: missing file path")
        elif not (base_dir / p).is_file():
            errors.append(f"inputs.{key}: file not found: {base_dir / p}")
    if isinstance(data.get("seed"), bool) or not isinstance(data.get("seed"), int) or data["seed"] < 0:
        errors.append(f"seed: expected a non-negative integer, got {data.get('seed')!r}")
    if not isinstance(data.get("output_dir"), str) or not data["output_dir"]:
        errors.append("output_dir: expected a directory path")
    _check_number(errors, data, "filter", "max_accuracy_m", lo=0.0)
    _check_number(errors, data, "solver", "n_rays", int, lo=1)
    _check_number(errors, data, "solver", "max_reflections", int, lo=0, hi=7)
    res = data["solver"].get("resolution")
    if res != "auto" and res not in (2, 3, 4, 5, 2.0, 3.0, 4.0, 5.0):
        errors.append(f"solver.resolution: expected 'auto' or one of 2, 3, 4, 5, got {res!r}")
    modes = data["calibration"].get("modes")
    if not isinstance(modes, list) or not modes or any(m not in ("A", "AM", "AMv") for m in modes):
        errors.append(f"calibration.modes: expected a non-empty list drawn from A, AM, AMv, got {modes!r}")
    _check_number(errors, data, "calibration", "iterations", int, lo=0)
    _check_number(errors, data, "calibration", "lr", lo=0.0, lo_open=True)
    _check_number(errors, data, "calibration", "patience", int, lo=1)
    _check_number(errors, data, "calibration", "train_fraction", lo=0.0, hi=1.0, lo_open=True)
    for key in ("epochs", "calibrate_epochs", "batch_size"):
        _check_number(errors, data, "surrogate", key, int, lo=1)
    _check_number(errors, data, "surrogate", "lr", lo=0.0, lo_open=True)
    _check_number(errors, data, "surrogate", "weight_decay", lo=0.0)
    counts = data["poweropt"].get("user_counts")
    if not isinstance(counts, list) or not counts or any(isinstance(c, bool) or not isinstance(c, int) or c < 1
                                                         for c in counts):
        errors.append(f"poweropt.user_counts: expected a non-empty list of positive integers, got {counts!r}")
    for key in ("demand_median_bps", "power_cap_w", "user_radius_m"):
        _check_number(errors, data, "poweropt", key, lo=0.0, lo_open=True)
    _check_number(errors, data, "poweropt", "demand_sigma", lo=0.0)
    _check_number(errors, data, "poweropt", "noise_dbm")
    _check_number(errors, data, "poweropt", "pieces", int, lo=1)
    _check_number(errors, data, "handover", "users", int, lo=1)
    _check_number(errors, data, "handover", "slots", int, lo=1)
    _check_number(errors, data, "handover", "gamma", lo=0.0)
    _check_number(errors, data, "handover", "noise_dbm")
    _check_number(errors, data, "handover", "epsilon", lo=0.0, hi=1.0, lo_open=True)
    return errors


def load_config(path, overrides=(), seed=None, output_dir=None, workers=1) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config: file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: invalid JSON ({exc})"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be a JSON object"])
    for key, value in overrides:
        _set_path(raw, key, value)
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    unknown = sorted(set(raw) - set(_DEFAULTS))
    if unknown:
        raise ConfigError([f"{k}: unknown config section" for k in unknown])
    for k, v in raw.items():
        if isinstance(_DEFAULTS[k], dict) and not isinstance(v, dict):
            raise ConfigError([f"{k}: expected an object"])
    data = _merge(_DEFAULTS, raw)
    base = path.parent.resolve()
    errors = validate_config(data, base)
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        errors.append(f"workers: expected a positive integer, got {workers!r}")
    if errors:
        raise ConfigError(errors)
    out = Path(data["output_dir"])
    canonical = json.dumps(data, sort_keys=True).encode()
    return RunConfig(
        path=path, data=data, seed=int(data["seed"]), output_dir=out if out.is_absolute() else base / out,
        measurements=base / data["inputs"]["measurements"], antennas=base / data["inputs"]["antennas"],
        scene=base / data["inputs"]["scene"], workers=workers, sha256=hashlib.sha256(canonical).hexdigest(),
    )


# -- shared pipeline state --------------------------------------------------

class Pipeline:
    """Lazily parsed inputs and per-antenna intermediate products of one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._cache = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def all_records(self):
        return self._memo("all_records", lambda: parse_measurements(self.cfg.measurements))

    def records(self):
        f = self.cfg.data["filter"]
        return self._memo("records", lambda: filter_measurements(self.all_records(), f["max_accuracy_m"],
                                                                  bool(f["outdoor_only"])))

    def antennas(self):
        def load():
            ants = parse_antennas(self.cfg.antennas)
            if not ants:
                raise IngestError(f"{self.cfg.antennas}: no antennas")
            ids = [a.antenna_id for a in ants]
            if len(set(ids)) != len(ids):
                raise IngestError(f"{self.cfg.antennas}: duplicate antenna_id")
            return ants
        return self._memo("antennas", load)

    def scene(self):
        return self._memo("scene", lambda: parse_scene(self.cfg.scene))

    def records_for(self, ant):
        return [r for r in self.records() if r.antenna_id == ant.antenna_id]

    def resolution(self, ant):
        from .radiomap import classify_extent

        res = self.cfg.data["solver"]["resolution"]
        if res != "auto":
            return float(res)
        recs = self.records_for(ant)
        return float(classify_extent(recs, ant)[1]) if recs else 5.0

    def transform(self, ant):
        from .geoproj import GeoTransform

        return GeoTransform(ant.latitude, ant.longitude, self.resolution(ant))

    def solver_config(self, ant):
        from .solver import SolverConfig

        s = self.cfg.data["solver"]
        return SolverConfig(n_rays=int(s["n_rays"]), max_reflections=int(s["max_reflections"]),
                            resolution=self.resolution(ant), seed=self.cfg.seed, workers=self.cfg.workers)

    def geometry(self, ant):
        from .scene3d import build_scene

        return self._memo(("geometry", ant.antenna_id), lambda: build_scene(self.scene(), ant))

    def table(self, ant):
        from .solver import trace_paths

        return self._memo(("table", ant.antenna_id),
                          lambda: trace_paths(self.geometry(ant), ant, self.solver_config(ant)))

    def truth(self, ant):
        from .radiomap import rasterize_measurements

        return self._memo(("truth", ant.antenna_id),
                          lambda: rasterize_measurements(self.records_for(ant), self.transform(ant)))

    def split(self, ant):
        from .calibrate import split_cells

        frac = self.cfg.data["calibration"]["train_fraction"]
        return self._memo(("split", ant.antenna_id), lambda: split_cells(self.truth(ant), frac, self.cfg.seed))

    def initial_params(self, ant):
        from .solver import TrainableSceneParams

        return TrainableSceneParams.initial("A", self.table(ant).material_names, ant.frequency_hz,
                                            seed=self.cfg.seed)

    def default_pattern(self, ant):
        from .solver import TrainableSceneParams

        return TrainableSceneParams.initial("A", [], ant.frequency_hz, seed=self.cfg.seed).antenna_params()

    def features(self, ant):
        from .features import build_features

        return self._memo(("features", ant.antenna_id),
                          lambda: build_features(self.scene(), ant, self.transform(ant), self.default_pattern(ant)))

    def traced_map(self, ant):
        """Uncalibrated solver map; reuses the ``trace`` output when it exists."""
        from .radiomap import load_radiomap
        from .solver import trace

        def make():
            saved = self.cfg.output_dir / "trace" / f"{ant.antenna_id}.f32"
            if saved.is_file() and Path(str(saved) + ".json").is_file():
                return load_radiomap(saved)
            rm = trace(self.geometry(ant), ant, self.initial_params(ant), self.solver_config(ant),
                       table=self.table(ant))
            # same float32 rounding as the saved raster, so either path gives identical downstream results
            rm.values = rm.values.astype("<f4").astype(float)
            return rm
        return self._memo(("traced", ant.antenna_id), make)


# -- output bookkeeping ----------------------------------------------------

def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import numba
    import scipy

    return {"python": platform.python_version(), "radiotwin": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


class Outputs:
    """Tracks the files a subcommand writes into its own directory."""

    def __init__(self, root: Path, name: str):
        self.dir = root / name
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)
        self.files = []

    def path(self, name):
        p = self.dir / name
        self.files.append(p)
        return p

    def raster(self, name, radio_map, extra=None, heatmap=True):
        from .radiomap import save_radiomap, write_heatmap

        p = self.path(f"{name}.f32")
        save_radiomap(radio_map, p, extra)
        self.files.append(Path(str(p) + ".json"))
        if heatmap:
            write_heatmap(self.path(f"{name}.pgm"), radio_map.values)

    def json(self, name, data):
        self.path(name).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_manifest(cfg: RunConfig, out: Outputs, subcommand, inputs, started, status="ok", extra=None):
    manifest = {
        "subcommand": subcommand,
        "status": status,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "config": str(cfg.path),
        "config_sha256": cfg.sha256,
        "inputs": {str(p): _sha256_file(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p.relative_to(out.dir)): _sha256_file(p) for p in out.files if p.is_file()},
        "versions": _versions(),
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    (out.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _base_inputs(cfg):
    return [cfg.path, cfg.measurements, cfg.antennas, cfg.scene]


def _require(path: Path, producer):
    if not path.is_file():
        raise ConfigError([f"{path}: missing; run `{producer}` first"])
    return path


# -- subcommands ------------------------------------------------------------

def cmd_ingest_check(p: Pipeline, out: Outputs):
    from .radiomap import classify_extent

    all_recs, recs = p.all_records(), p.records()
    ants, scene = p.antennas(), p.scene()
    known = {a.antenna_id for a in ants}
    orphans = sorted({r.antenna_id for r in recs} - known)
    if orphans:
        raise IngestError(f"measurements reference unknown antenna ids: {', '.join(orphans)}")
    per = {}
    for a in ants:
        mine = p.records_for(a)
        extent = classify_extent(mine, a) if mine else (None, None)
        per[a.antenna_id] = {"records": len(mine), "extent_m": extent[0], "resolution_m": extent[1]}
    write_measurements(recs, out.path("measurements_filtered.csv"))
    out.json("summary.json", {
        "records_total": len(all_recs), "records_kept": len(recs), "records_dropped": len(all_recs) - len(recs),
        "antennas": per, "buildings": len(scene.buildings), "landuse_polygons": len(scene.landuse),
        "roads": len(scene.roads),
    })


def cmd_build_maps(p: Pipeline, out: Outputs):
    from .radiomap import cell_counts

    rows = []
    for a in p.antennas():
        truth = p.truth(a)
        out.raster(a.antenna_id, truth)
        counts = cell_counts(p.records_for(a), truth.transform)
        rows.append([a.antenna_id, truth.transform.resolution, truth.n_valid, int(counts.max(initial=0)),
                     f"{truth.coverage_fraction:.9f}"])
    with open(out.path("maps.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["antenna_id", "resolution_m", "measured_cells", "max_samples_per_cell", "coverage_fraction"])
        w.writerows(rows)


def cmd_build_scene(p: Pipeline, out: Outputs):
    from .scene3d import export_ply

    ref = p.antennas()[0]
    geo = p.geometry(ref)
    rows = []
    for k, mesh in enumerate(geo.meshes):
        out.path(f"building_{k:03d}.ply").write_bytes(export_ply(mesh))
        fp = np.asarray(geo.footprints[k])
        area = 0.5 * abs(float(np.dot(fp[:, 0], np.roll(fp[:, 1], -1)) - np.dot(fp[:, 1], np.roll(fp[:, 0], -1))))
        rows.append([k, mesh.material, f"{geo.heights[k]:.6f}", f"{area:.6f}", f"{mesh.volume():.6f}",
                     int(mesh.is_watertight()), len(mesh.triangles)])
    with open(out.path("buildings.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["building", "material", "height_m", "footprint_area_m2", "volume_m3", "watertight", "faces"])
        w.writerows(rows)
    out.json("frame.json", {"origin_antenna": ref.antenna_id, "latitude": ref.latitude, "longitude": ref.longitude})


def cmd_features(p: Pipeline, out: Outputs):
    from .radiomap import RadioMap

    for a in p.antennas():
        stack = p.features(a)
        for name, layer in stack.layers().items():
            rm = RadioMap(np.asarray(layer, float), np.ones(layer.shape, bool), stack.transform)
            out.raster(f"{a.antenna_id}_{name}", rm, {"layer": name}, heatmap=(name == "channel"))


def cmd_trace(p: Pipeline, out: Outputs):
    from .solver import trace

    report = {}
    for a in p.antennas():
        info = {}
        rm = trace(p.geometry(a), a, p.initial_params(a), p.solver_config(a), table=p.table(a), report=info)
        out.raster(a.antenna_id, rm)
        report[a.antenna_id] = info
    # timing lives in the manifest; the report itself stays reproducible
    out.json("report.json", {k: {kk: vv for kk, vv in v.items() if kk != "wall_clock_s"} for k, v in report.items()})
    return {"trace_wall_clock_s": {k: round(v["wall_clock_s"], 3) for k, v in report.items()}}


def cmd_calibrate(p: Pipeline, out: Outputs):
    from .calibrate import OptimizerConfig, calibrate_map
    from .solver import trace

    c = p.cfg.data["calibration"]
    rows = []
    for a in p.antennas():
        for mode in c["modes"]:
            opt = OptimizerConfig(iterations=int(c["iterations"]), lr=float(c["lr"]), patience=int(c["patience"]),
                                  train_fraction=float(c["train_fraction"]), seed=p.cfg.seed)
            run = calibrate_map(p.table(a), a, p.truth(a), mode, opt)
            stem = f"{a.antenna_id}_{mode}"
            run.write(out.path(f"{stem}.json"), out.path(f"{stem}.csv"))
            out.raster(stem, trace(p.geometry(a), a, run.params, p.solver_config(a), table=p.table(a)))
            rows.append([a.antenna_id, mode, repr(run.best_validation_mae), run.best_iteration, run.iterations])
    with open(out.path("summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["antenna_id", "mode", "best_validation_mae", "best_iteration", "iterations"])
        w.writerows(rows)


def _surrogate_config(p: Pipeline):
    from .surrogate import SurrogateConfig

    s = p.cfg.data["surrogate"]
    return SurrogateConfig(epochs=int(s["epochs"]), lr=float(s["lr"]), weight_decay=float(s["weight_decay"]),
                           batch_size=int(s["batch_size"]), seed=p.cfg.seed)


def _train_mask(p: Pipeline, a):
    train, _ = p.split(a)
    mask = np.zeros(p.truth(a).values.shape, bool)
    mask.flat[train] = True
    return mask


def cmd_surrogate_train(p: Pipeline, out: Outputs):
    from .surrogate import cell_samples, surrogate_train_arrays

    # pre-training sees only the calibration training cells of each site
    parts = [cell_samples(p.features(a), p.truth(a), _train_mask(p, a))[:2] for a in p.antennas()]
    X = np.concatenate([x for x, _ in parts])
    y = np.concatenate([t for _, t in parts])
    model = surrogate_train_arrays(X, y, _surrogate_config(p))
    model.save(out.path("model.json"))
    h = model.history
    with open(out.path("history.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for k, row in enumerate(zip(h["train_loss"], h["val_loss"], h["lr"])):
            w.writerow([k, *map(repr, row)])


def cmd_surrogate_calibrate(p: Pipeline, out: Outputs):
    from .surrogate import SurrogateModel, surrogate_calibrate

    src = _require(p.cfg.output_dir / "surrogate-train" / "model.json", "surrogate-train")
    base = SurrogateModel.load(src)
    cfg = _surrogate_config(p)
    epochs = int(p.cfg.data["surrogate"]["calibrate_epochs"])
    frac = float(p.cfg.data["calibration"]["train_fraction"])
    rows = []
    for a in p.antennas():
        stack = p.features(a)
        res = surrogate_calibrate(base, stack, p.truth(a), epochs, frac, cfg)
        res.model.save(out.path(f"{a.antenna_id}_model.json"))
        out.json(f"{a.antenna_id}_calibration.json", res.to_json())
        with open(out.path(f"{a.antenna_id}_calibration.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "validation_mae"])
            w.writerows([k, repr(v)] for k, v in enumerate(res.validation_mae))
        out.raster(a.antenna_id, res.model.predict_map(stack))
        rows.append([a.antenna_id, repr(res.validation_mae[0]), repr(res.best_validation_mae), res.best_epoch])
    with open(out.path("summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["antenna_id", "uncalibrated_mae", "best_validation_mae", "best_epoch"])
        w.writerows(rows)
    return {"inputs_extra": [src]}


def _prediction_sources(p: Pipeline, a):
    """(model, mode, raster path) of every prediction map written by earlier subcommands."""
    root = p.cfg.output_dir
    found = [("solver", "uncalibrated", root / "trace" / f"{a.antenna_id}.f32")]
    for mode in ("A", "AM", "AMv"):
        found.append(("solver", mode, root / "calibrate" / f"{a.antenna_id}_{mode}.f32"))
    found.append(("surrogate", "calibrated", root / "surrogate-calibrate" / f"{a.antenna_id}.f32"))
    return [f for f in found if f[2].is_file()]


def cmd_metrics(p: Pipeline, out: Outputs):
    from .metrics import append_metric_rows, sparse_map_metrics
    from .radiomap import load_radiomap

    used = []
    rows = []
    for a in p.antennas():
        truth = p.truth(a)
        _, val = p.split(a)
        mask = np.zeros(truth.values.shape, bool)
        mask.flat[val] = True
        for model, mode, path in _prediction_sources(p, a):
            pred = load_radiomap(path)
            if pred.transform != truth.transform:
                raise ConfigError([f"{path}: grid differs from the measurement map of {a.antenna_id}"])
            rep = sparse_map_metrics(pred.values, truth.values, mask)
            rows.append({"scene": a.antenna_id, "model": model, "mode": mode, **rep.as_row()})
            used.append(path)
    if not rows:
        raise ConfigError(["metrics: no prediction maps found; run trace, calibrate or surrogate-calibrate first"])
    for r in rows:
        for k in ("rmse", "mae", "smape", "pcc"):
            r[k] = repr(float(r[k]))
        r["ssim"] = ""
    append_metric_rows(out.path("metrics.csv"), rows)
    return {"inputs_extra": used}


def _sample_users(rng, centre, radius, n):
    r = radius * np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0, 2 * np.pi, n)
    return centre[0] + r * np.cos(a), centre[1] + r * np.sin(a)


def cmd_poweropt_sweep(p: Pipeline, out: Outputs):
    from .poweropt import (PowerInstance, fit_capacity_pieces, gains_from_map, random_demands, solve_power,
                           write_solution, write_sweep_csv, SweepRow)

    c = p.cfg.data["poweropt"]
    ants = p.antennas()
    maps = [p.traced_map(a) for a in ants]
    ref = maps[0].transform
    centre = np.mean([ref.to_local(a.latitude, a.longitude) for a in ants], axis=0)
    counts = [int(n) for n in c["user_counts"]]
    rng = np.random.default_rng(p.cfg.seed)
    n_max = max(counts)
    x, y = _sample_users(rng, centre, float(c["user_radius_m"]), n_max)
    lat, lon = ref.to_geographic(x, y)
    try:
        gains = np.column_stack([gains_from_map(m, a.tx_power_dbm, lat, lon) for m, a in zip(maps, ants)])
    except ValueError as exc:
        raise ConfigError([f"poweropt.user_radius_m: {exc}"]) from None
    demands = random_demands(rng, n_max, float(c["demand_median_bps"]), float(c["demand_sigma"]))
    a_k, b_k = fit_capacity_pieces(int(c["pieces"]))
    noise_w = 10 ** ((float(c["noise_dbm"]) - 30.0) / 10.0)
    base = PowerInstance(gains, demands, [a.bandwidth_hz for a in ants], noise_w, float(c["power_cap_w"]), a_k, b_k)
    out.json("instance.json", base.to_json())
    rows, best = [], None
    for n in sorted(set(counts)):
        sol = solve_power(base.subset(n))
        total = sol.objective if sol.status == "optimal" else math.nan
        rows.append(SweepRow(n, total, sol.status, sol.kkt_residual))
        if sol.status == "optimal":
            best = (n, sol)
    write_sweep_csv(out.path("sweep.csv"), rows)
    if best is not None:
        write_solution(out.path(f"solution_{best[0]}_users.json"), base.subset(best[0]), best[1])
    bad = [r for r in rows if r.status != "optimal"]
    if any(r.status == "infeasible" for r in bad):
        raise Infeasible(f"infeasible at {', '.join(str(r.users) for r in bad if r.status == 'infeasible')} users")
    if bad:
        raise RuntimeError(f"solver did not converge at {', '.join(str(r.users) for r in bad)} users")


def cmd_handover_sim(p: Pipeline, out: Outputs):
    from .handover import HandoverInstance, shared_channel_maps, simulate, write_summary, write_trace_csv

    c = p.cfg.data["handover"]
    ants = p.antennas()
    tf = p.transform(ants[0])
    rsrp, valid = shared_channel_maps(ants, tf, radio_maps=[p.traced_map(a) for a in ants])
    inst = HandoverInstance(rsrp, valid, tf.resolution, [a.bandwidth_hz for a in ants], n_users=int(c["users"]),
                            gamma=float(c["gamma"]), horizon=int(c["slots"]), epsilon=float(c["epsilon"]),
                            noise_dbm=float(c["noise_dbm"]))
    trace = simulate(inst, seed=p.cfg.seed)
    write_trace_csv(out.path("trace.csv"), trace)
    write_summary(out.path("summary.json"), trace, {"gamma": inst.gamma, "users": inst.n_users})
    if not (trace.assignments_valid and trace.loads_consistent):
        raise RuntimeError("assignment constraint violated during the simulation")


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(p: Pipeline, out: Outputs):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    root = p.cfg.output_dir
    sources = {"metrics": root / "metrics" / "metrics.csv", "sweep": root / "poweropt-sweep" / "sweep.csv",
               "handover": root / "handover-sim" / "trace.csv"}
    present = {k: v for k, v in sources.items() if v.is_file()}
    if not present:
        raise ConfigError(["report: no CSV outputs found; run metrics, poweropt-sweep or handover-sim first"])
    png_meta = {"Software": None}
    lines = ["# radiotwin run report", "", f"Seed: {p.cfg.seed}", ""]

    if "metrics" in present:
        rows = _read_csv(present["metrics"])
        lines += ["## Prediction error on held-out measurement cells", "",
                  "| site | model | mode | RMSE (dB) | MAE (dB) | sMAPE | PCC | cells |",
                  "|---|---|---|---|---|---|---|---|"]
        for r in rows:
            lines.append(f"| {r['scene']} | {r['model']} | {r['mode']} | {float(r['rmse']):.3f} | "
                         f"{float(r['mae']):.3f} | {float(r['smape']):.5f} | {float(r['pcc']):.3f} | {r['n_points']} |")
        lines.append("")
        with open(out.path("metrics_table.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["site", "model", "mode", "rmse", "mae", "smape", "pcc", "n_points"])
            for r in rows:
                w.writerow([r["scene"], r["model"], r["mode"], r["rmse"], r["mae"], r["smape"], r["pcc"], r["n_points"]])

    if "sweep" in present:
        rows = _read_csv(present["sweep"])
        users = [int(r["users"]) for r in rows]
        power = [float(r["total_power_w"]) for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(users, power, "o-")
        ax.set_xlabel("users")
        ax.set_ylabel("total transmit power (W)")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out.path("power_sweep.png"), dpi=100, metadata=png_meta)
        plt.close(fig)
        lines += ["## Minimum total power vs. number of users", "", "![power sweep](power_sweep.png)", "",
                  "| users | total power (W) | status |", "|---|---|---|"]
        lines += [f"| {u} | {pw:.6g} | {r['status']} |" for u, pw, r in zip(users, power, rows)]
        lines.append("")

    if "handover" in present:
        rows = _read_csv(present["handover"])
        thr = np.array([float(r["total_throughput"]) for r in rows])
        ho = np.array([int(r["handovers"]) for r in rows])
        fig, (a1, a2) = plt.subplots(2, 1, figsize=(6, 4.5), sharex=True)
        a1.plot(thr / 1e6, lw=0.6)
        a1.set_ylabel("throughput (Mbit/s)")
        a2.plot(ho, lw=0.6)
        a2.set_ylabel("handovers")
        a2.set_xlabel("slot")
        fig.tight_layout()
        fig.savefig(out.path("handover_trace.png"), dpi=100, metadata=png_meta)
        plt.close(fig)
        w = min(100, len(rows))
        lines += ["## Handover controller trace", "", "![handover trace](handover_trace.png)", "",
                  f"Last {w} slots: mean throughput {thr[-w:].mean() / 1e6:.3f} Mbit/s, "
                  f"mean handovers {ho[-w:].mean():.3f} per slot.", ""]
    out.path("report.md").write_text("\n".join(lines))
    return {"inputs_extra": list(present.values())}


COMMANDS = {
    "ingest-check": cmd_ingest_check, "build-maps": cmd_build_maps, "build-scene": cmd_build_scene,
    "features": cmd_features, "trace": cmd_trace, "calibrate": cmd_calibrate,
    "surrogate-train": cmd_surrogate_train, "surrogate-calibrate": cmd_surrogate_calibrate,
    "metrics": cmd_metrics, "poweropt-sweep": cmd_poweropt_sweep, "handover-sim": cmd_handover_sim,
    "report": cmd_report,
}


def run_subcommand(name, cfg: RunConfig):
    """Run one subcommand; returns (exit code, manifest or None)."""
    started = time.perf_counter()
    pipeline = Pipeline(cfg)
    out = Outputs(cfg.output_dir, name)
    status, code, extra = "ok", EXIT_OK, {}
    try:
        extra = COMMANDS[name](pipeline, out) or {}
    except (ConfigError, IngestError, GeometryError) as exc:
        status, code = "validation-error", EXIT_VALIDATION
        _report_error(name, exc)
    except Infeasible as exc:
        status, code = "infeasible", EXIT_INFEASIBLE
        _report_error(name, exc)
    except Exception as exc:  # noqa: BLE001 - every module error maps to the runtime exit code
        status, code = "runtime-error", EXIT_RUNTIME
        _report_error(name, exc)
    inputs = _base_inputs(cfg) + list(extra.pop("inputs_extra", []))
    manifest = write_manifest(cfg, out, name, inputs, started, status, extra)
    return code, manifest


def _report_error(name, exc):
    errors = getattr(exc, "errors", None) or [str(exc)]
    for e in errors:
        print(f"radiotwin {name}: {type(exc).__name__}: {e}", file=sys.stderr)


def build_parser():
    parser = argparse.ArgumentParser(prog="radiotwin", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"radiotwin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--workers", type=int, default=1, help="ray-tracing worker threads")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--output-dir", help="override output_dir")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field, e.g. solver.n_rays=16384")
    sp = sub.add_parser("init-demo", help="copy the bundled demo dataset and config into a directory")
    sp.add_argument("directory")
    sp.add_argument("--regenerate", action="store_true", help="re-run the generator instead of copying")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "init-demo":
        from .demo import demo_dir, generate_demo

        target = Path(args.directory)
        if args.regenerate:
            generate_demo(target)
        else:
            target.mkdir(parents=True, exist_ok=True)
            for f in sorted(demo_dir().iterdir()):
                if f.is_file():
                    shutil.copyfile(f, target / f.name)
        print(target / "config.json")
        return EXIT_OK
    try:
        cfg = load_config(args.config, [parse_override(s) for s in args.set], args.seed, args.output_dir,
                          args.workers)
    except ConfigError as exc:
        _report_error(args.command, exc)
        return EXIT_VALIDATION
    code, manifest = run_subcommand(args.command, cfg)
    if code == EXIT_OK:
        print(f"{args.command}: {len(manifest['outputs'])} files in {cfg.output_dir / args.command} "
              f"({manifest['wall_clock_s']} s)")
    return code


if __name__ == "__main__":
    sys.exit(main())
