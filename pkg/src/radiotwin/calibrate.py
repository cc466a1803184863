"""Site-specific calibration of solver parameters against measurement maps."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import filter_measurements
from .optim import AdamW
from .radiomap import RadioMap, rasterize_measurements, split_records
from .geoproj import GeoTransform
from .solver import (
    PathTable, SolverConfig, TrainableSceneParams, _full_materials, derived_gradients, evaluate, trace_paths,
)

MIN_CELLS = 20


class CalibrationError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    iterations: int = 100
    lr: float = 0.05
    weight_decay: float = 0.0
    patience: int = 15
    train_fraction: float = 0.7
    seed: int = 0


@dataclass
class CalibrationRun:
    mode: str
    iterations: int
    train_loss: list
    validation_mae: list
    best_validation_mae: float
    best_iteration: int
    params: TrainableSceneParams
    n_train_cells: int = 0
    n_validation_cells: int = 0
    excluded_cells: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "iterations": self.iterations,
            "train_loss": self.train_loss,
            "validation_mae": self.validation_mae,
            "best_validation_mae": self.best_validation_mae,
            "best_iteration": self.best_iteration,
            "n_train_cells": self.n_train_cells,
            "n_validation_cells": self.n_validation_cells,
            "params": self.params.to_json(),
        }

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["iteration", "train_loss", "validation_mae"])
                for k, (tl, vm) in enumerate(zip(self.train_loss, self.validation_mae)):
                    w.writerow([k, repr(tl), repr(vm)])


def masked_mae(pred: RadioMap, truth: RadioMap):
    """MAE over cells valid in both maps; returns ``(mae, n_excluded)``.

    ``n_excluded`` counts truth-valid cells dropped because the prediction has
    no coverage there.
    """
    if pred.transform != truth.transform:
        raise ValueError("maps do not share a transform")
    both = truth.valid & pred.valid
    n = int(np.count_nonzero(both))
    if n == 0:
        raise CalibrationError("no overlapping valid cells")
    mae = float(np.mean(np.abs(pred.values[both] - truth.values[both])))
    return mae, int(np.count_nonzero(truth.valid)) - n


def _cell_mask(flat_cells, shape):
    m = np.zeros(int(np.prod(shape)), dtype=bool)
    m[np.asarray(flat_cells, dtype=np.int64)] = True
    return m.reshape(shape)


def calibration_loss(table: PathTable, antenna, params: TrainableSceneParams, truth: RadioMap, train_mask,
                     fill=-140.0):
    """Masked MAE on the training cells and its gradient w.r.t. the free vector."""
    mats = _full_materials(params, table.material_names, antenna.frequency_hz)
    ant = params.antenna_params()
    pred = evaluate(table, antenna, ant, mats, fill)
    use = train_mask & truth.valid & pred.valid
    n = int(np.count_nonzero(use))
    if n == 0:
        raise CalibrationError("no covered training cells")
    diff = pred.values - truth.values
    loss = float(np.abs(diff[use]).mean())
    adjoint = np.where(use, np.sign(diff), 0.0) / n
    g_ant, g_mat = derived_gradients(table, antenna, ant, mats, adjoint, fill)
    return loss, params.chain(g_ant, g_mat), pred


def split_cells(truth: RadioMap, train_fraction=0.7, seed=0):
    cells = np.flatnonzero(truth.valid.ravel())
    if cells.size < MIN_CELLS:
        raise CalibrationError(f"need at least {MIN_CELLS} valid measurement cells, got {cells.size}")
    train, val = split_records(cells.tolist(), train_fraction, seed)
    if not train or not val:
        raise CalibrationError("degenerate train/validation split")
    return np.asarray(train, np.int64), np.asarray(val, np.int64)


def calibrate_map(table: PathTable, antenna, truth: RadioMap, mode: str, config: OptimizerConfig | None = None,
                  init: TrainableSceneParams | None = None, fill=-140.0) -> CalibrationRun:
    """Calibrate against an already-rasterized truth map using a traced path table."""
    config = config or OptimizerConfig()
    train, val = split_cells(truth, config.train_fraction, config.seed)
    table = table.restrict(np.concatenate([train, val]))
    shape = truth.values.shape
    train_mask = _cell_mask(train, shape)
    val_mask = _cell_mask(val, shape)
    params = init or TrainableSceneParams.initial(mode, table.material_names, antenna.frequency_hz, seed=config.seed)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    vec = params.free_vector()
    train_hist, val_hist = [], []
    best, best_k, best_params = np.inf, 0, params
    for k in range(config.iterations + 1):
        loss, grad, pred = calibration_loss(table, antenna, params, truth, train_mask, fill)
        vuse = val_mask & pred.valid
        if not vuse.any():
            raise CalibrationError("prediction covers no validation cells")
        vmae = float(np.abs(pred.values[vuse] - truth.values[vuse]).mean())
        train_hist.append(loss)
        val_hist.append(vmae)
        if vmae < best:
            best, best_k, best_params = vmae, k, params
        if k == config.iterations or k - best_k >= config.patience:
            break
        (vec,) = opt.step([vec], [grad])
        params = params.with_free_vector(vec)
    return CalibrationRun(mode, len(val_hist) - 1, train_hist, val_hist, best, best_k, best_params,
                          len(train), len(val))


def calibrate_scene(geometry, antenna, measurements, mode, optimizer_config: OptimizerConfig | None = None,
                    solver_config: SolverConfig | None = None, table: PathTable | None = None) -> CalibrationRun:
    """Trace once, rasterize the filtered measurements and run gradient calibration."""
    solver_config = solver_config or SolverConfig()
    tf = GeoTransform(antenna.latitude, antenna.longitude, solver_config.resolution)
    truth = rasterize_measurements(filter_measurements(measurements), tf)
    if table is None:
        table = trace_paths(geometry, antenna, solver_config)
    return calibrate_map(table, antenna, truth, mode, optimizer_config, fill=solver_config.no_coverage_fill)
