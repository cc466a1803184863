import numpy as np
import pytest
from hypothesis import given, strategies as st

from radiotwin.calibrate import (
    CalibrationError, OptimizerConfig, calibrate_map, calibrate_scene, calibration_loss, masked_mae, split_cells,
)
from radiotwin.geoproj import GeoTransform
from radiotwin.radiomap import RadioMap
from radiotwin.solver import SolverConfig, TrainableSceneParams
from radiotwin.synthetic import planted_scene

TF = GeoTransform(48.137, 11.575, 2.0)


def _map(values, valid):
    v = np.full((512, 512), -140.0)
    m = np.zeros((512, 512), dtype=bool)
    for (r, c), x, ok in zip([(0, 0), (0, 1), (1, 0), (1, 1)], values, valid):
        v[r, c] = x
        m[r, c] = ok
    return RadioMap(v, m, TF)


def test_masked_mae_examples():
    truth = _map([-80, -90, -100, -110], [True] * 4)
    assert masked_mae(truth, truth) == (0.0, 0)
    assert masked_mae(_map([-77, -87, -97, -107], [True] * 4), truth) == (3.0, 0)
    three = _map([-80, -90, -100, 0], [True, True, True, False])
    assert masked_mae(_map([-85, -90, -95, 0], [True] * 4), three) == (pytest.approx(10 / 3), 0)
    mae, excluded = masked_mae(_map([-70, -90, -100, -110], [True, True, True, False]), truth)
    assert mae == pytest.approx(10 / 3) and excluded == 1


def test_masked_mae_without_overlap_raises():
    with pytest.raises(CalibrationError):
        masked_mae(_map([0] * 4, [False] * 4), _map([0] * 4, [True] * 4))


@pytest.fixture(scope="module")
def scene():
    return planted_scene(3, n_buildings=12, n_cells=300, solver_config=SolverConfig(n_rays=16384, resolution=2.0, seed=3))


def test_split_is_disjoint_and_covers_cells(scene):
    train, val = split_cells(scene.truth, 0.7, 0)
    assert not set(train) & set(val)
    assert sorted(np.concatenate([train, val])) == sorted(np.flatnonzero(scene.truth.valid.ravel()))
    assert abs(len(train) / (len(train) + len(val)) - 0.7) < 0.01


def test_split_needs_twenty_cells():
    truth = _map([-80] * 4, [True] * 4)
    with pytest.raises(CalibrationError, match="20"):
        split_cells(truth)


def test_zero_iterations_reports_uncalibrated_mae(scene):
    run = calibrate_map(scene.table, scene.antenna, scene.truth, "A", OptimizerConfig(iterations=0))
    params = TrainableSceneParams.initial("A", scene.table.material_names, scene.antenna.frequency_hz)
    _, _, pred = calibration_loss(scene.table, scene.antenna, params, scene.truth, scene.truth.valid)
    _, val = split_cells(scene.truth)
    vmask = np.zeros(scene.truth.values.size, bool)
    vmask[val] = True
    vmask = vmask.reshape(scene.truth.values.shape) & pred.valid
    expected = np.abs(pred.values[vmask] - scene.truth.values[vmask]).mean()
    assert run.iterations == 0 and run.best_validation_mae == pytest.approx(expected, rel=1e-12)


def test_best_mae_is_monotone_in_iterations(scene):
    maes = [calibrate_map(scene.table, scene.antenna, scene.truth, "AM", OptimizerConfig(iterations=n, patience=10 ** 6))
            .best_validation_mae for n in (0, 5, 20, 40)]
    assert all(b <= a for a, b in zip(maes, maes[1:])), maes
    assert maes[-1] < maes[0]


def test_best_is_minimum_of_trajectory(scene):
    run = calibrate_map(scene.table, scene.antenna, scene.truth, "AMv", OptimizerConfig(iterations=30))
    assert run.best_validation_mae == min(run.validation_mae)
    assert run.validation_mae[run.best_iteration] == run.best_validation_mae


def test_early_stopping_respects_patience(scene):
    run = calibrate_map(scene.table, scene.antenna, scene.truth, "A", OptimizerConfig(iterations=500, patience=3))
    assert run.iterations <= 500
    if run.iterations < 500:
        assert run.iterations - run.best_iteration == 3


@pytest.mark.parametrize("mode", ["A", "AM", "AMv"])
def test_calibration_loss_gradient_matches_finite_differences(scene, mode):
    rng = np.random.default_rng(11)
    train, _ = split_cells(scene.truth)
    mask = np.zeros(scene.truth.values.size, bool)
    mask[train] = True
    mask = mask.reshape(scene.truth.values.shape)
    table = scene.table.restrict(train)
    base = TrainableSceneParams.initial(mode, table.material_names, scene.antenna.frequency_hz, seed=5)
    n_checked = 0
    for _ in range(10):
        vec = base.free_vector() + rng.normal(0, 0.3, base.n_free)
        p = base.with_free_vector(vec)
        _, grad, pred = calibration_loss(table, scene.antenna, p, scene.truth, mask)
        resid = np.abs(pred.values - scene.truth.values)[mask & pred.valid]
        h = 1e-6
        if resid.min() < 1e-3:  # too close to an |x| kink for central differences
            continue
        num = np.zeros_like(vec)
        for i in range(vec.size):
            e = np.zeros_like(vec)
            e[i] = h
            lp = calibration_loss(table, scene.antenna, base.with_free_vector(vec + e), scene.truth, mask)[0]
            lm = calibration_loss(table, scene.antenna, base.with_free_vector(vec - e), scene.truth, mask)[0]
            num[i] = (lp - lm) / (2 * h)
        assert np.max(np.abs(grad - num)) / np.max(np.abs(num)) < 1e-4
        n_checked += 1
    assert n_checked >= 8


def test_planted_recovery(scene):
    a = calibrate_map(scene.table, scene.antenna, scene.truth, "A")
    v = calibrate_map(scene.table, scene.antenna, scene.truth, "AMv")
    assert v.best_validation_mae <= 1.0
    assert v.best_validation_mae <= a.best_validation_mae
    assert abs(v.params.antenna_params().g_max - scene.antenna_params.g_max) < 1.0


def test_calibrate_scene_from_records(scene):
    cfg = SolverConfig(n_rays=16384, resolution=2.0, seed=3)
    run = calibrate_scene(scene.geometry, scene.antenna, scene.records, "A", OptimizerConfig(iterations=3), cfg,
                          table=scene.table)
    assert run.n_train_cells + run.n_validation_cells == scene.truth.n_valid


@given(st.integers(0, 2 ** 31), st.floats(0.1, 0.9))
def test_split_fraction_property(seed, frac):
    truth = _map([-80] * 4, [True] * 4)
    truth.valid[5:15, 5:15] = True
    train, val = split_cells(truth, frac, seed)
    assert len(train) + len(val) == truth.n_valid
    assert not set(train.tolist()) & set(val.tolist())
