import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from radiotwin.metrics import (
    append_metric_rows, full_map_metrics, per_site_min_mae, sparse_map_metrics, ssim,
)

maps = arrays(np.float64, (12, 12), elements=st.floats(-140, -40))


def test_identical_maps():
    x = np.random.default_rng(0).uniform(-140, -40, (16, 16))
    r = full_map_metrics(x, x)
    assert (r.rmse, r.mae, r.smape) == (0.0, 0.0, 0.0)
    assert r.ssim == pytest.approx(1.0, abs=1e-12)


def test_uniform_offset():
    x = np.random.default_rng(1).uniform(-140, -40, (16, 16))
    r = full_map_metrics(x + 2, x)
    assert r.mae == pytest.approx(2.0) and r.rmse == pytest.approx(2.0) and r.pcc == pytest.approx(1.0)


def test_two_by_two_by_hand():
    r = full_map_metrics(np.array([[0, 10], [20, 40.0]]), np.array([[0, 10], [20, 30.0]]))
    assert r.rmse == 5.0 and r.mae == 2.5 and r.n_points == 4
    assert r.smape == pytest.approx(10 / 70 / 4)


def test_three_cells_by_hand():
    truth = np.array([[-80.0, 0.0], [-90.0, -100.0]])
    pred = np.array([[-82.0, -55.0], [-90.0, -96.0]])
    r = sparse_map_metrics(pred, truth)
    assert r.n_points == 3
    assert r.mae == 2.0 and r.rmse == math.sqrt(20 / 3)


def test_single_cell_flags_pcc():
    truth = np.zeros((3, 3))
    truth[1, 1] = -70.0
    r = sparse_map_metrics(np.full((3, 3), -66.0), truth)
    assert r.rmse == r.mae == 4.0
    assert r.pcc_undefined and math.isnan(r.pcc)


def test_constant_full_map_flags_pcc():
    r = full_map_metrics(np.full((4, 4), -80.0), np.full((4, 4), -80.0))
    assert r.pcc_undefined


def test_two_scenes_pool_cells():
    t1, p1 = np.array([[-80.0, 0.0]]), np.array([[-78.0, 5.0]])
    t2, p2 = np.array([[-90.0, -91.0, -92.0]]), np.array([[-90.0, -91.0, -96.0]])
    r = sparse_map_metrics([p1, p2], [t1, t2])
    assert r.n_points == 4
    assert r.mae == 1.5  # 6 dB over 4 cells, not the mean of per-scene MAEs
    assert r.rmse == math.sqrt(20 / 4)


def test_per_site_min_mae():
    assert per_site_min_mae([9, 7, 8]) == 7
    assert per_site_min_mae([5, 4, 3, 2]) == 2
    with pytest.raises(ValueError):
        per_site_min_mae([])


@given(st.lists(st.floats(0, 50), min_size=1), st.lists(st.floats(0, 50)))
def test_min_mae_never_increases_when_appending(a, b):
    assert per_site_min_mae(a + b) <= per_site_min_mae(a)


@given(maps, maps)
def test_full_mask_sparse_equals_full(p, t):
    full = full_map_metrics(p, t)
    sparse = sparse_map_metrics(p, t, np.ones(p.shape, bool))
    for name in ("rmse", "mae", "smape"):
        assert getattr(sparse, name) == pytest.approx(getattr(full, name), abs=1e-9)
    if not full.pcc_undefined:
        assert sparse.pcc == pytest.approx(full.pcc, abs=1e-9)


@given(maps, maps, st.floats(-50, 50))
def test_rmse_and_mae_translation_invariant(p, t, c):
    a, b = full_map_metrics(p, t), full_map_metrics(p + c, t + c)
    assert b.rmse == pytest.approx(a.rmse, abs=1e-9) and b.mae == pytest.approx(a.mae, abs=1e-9)


@given(maps, maps)
def test_report_invariants(p, t):
    r = full_map_metrics(p, t)
    assert r.rmse >= r.mae - 1e-12 >= -1e-12
    assert 0.0 <= r.smape <= 1.0
    assert -1.0 - 1e-9 <= r.ssim <= 1.0 + 1e-9


def test_smape_is_not_translation_invariant():
    p, t = np.array([[-80.0]]), np.array([[-70.0]])
    assert full_map_metrics(p + 60, t + 60).smape > full_map_metrics(p, t).smape


@given(arrays(np.float64, (10, 10), elements=st.floats(-140, -40)).filter(lambda a: np.ptp(a) > 1e-3))
def test_ssim_self_is_one(x):
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_ssim_drops_for_noise():
    rng = np.random.default_rng(2)
    x = rng.uniform(-140, -40, (32, 32))
    assert ssim(x, x + rng.normal(0, 20, x.shape)) < 0.9


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        full_map_metrics(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        sparse_map_metrics(np.zeros((2, 2)), np.zeros((2, 2)))


def test_append_rows(tmp_path):
    path = tmp_path / "results.csv"
    r = full_map_metrics(np.array([[0, 10], [20, 40.0]]), np.array([[0, 10], [20, 30.0]]))
    append_metric_rows(path, [{"scene": "s", "model": "m", "mode": "A", **r.as_row()}])
    append_metric_rows(path, [{"scene": "s2", "model": "m", "mode": "A", **r.as_row()}])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("scene,model,mode,rmse") and len(lines) == 3
