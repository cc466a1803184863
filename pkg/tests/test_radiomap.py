import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ORIGIN, make_antenna, make_record
from radiotwin.geoproj import GeoTransform
from radiotwin.radiomap import (
    RadioMap, cell_counts, classify_extent, grouped_median, heatmap_bytes, load_radiomap, mask_to_rle,
    rasterize_measurements, read_raster, rle_to_mask, save_radiomap, split_records, write_heatmap,
)

TF = GeoTransform(*ORIGIN, 2.0)


def at(x, y, **kw):
    lat, lon = TF.to_geographic(x, y)
    return make_record(float(lat), float(lon), **kw)


def test_extent_within_400m_is_smallest():
    recs = [at(400 * np.cos(a), 400 * np.sin(a)) for a in np.linspace(0, 6, 30)]
    assert classify_extent(recs, make_antenna()) == (512, 2.0)


def test_extent_1100m_percentile():
    recs = [at(1100.0, 0.0) for _ in range(10)]
    assert classify_extent(recs, make_antenna()) == (1280, 5.0)
    assert classify_extent([at(3000.0, 0.0)], make_antenna()) == (1280, 5.0)


def test_single_close_measurement():
    assert classify_extent([at(10.0, 0.0)], make_antenna()) == (512, 2.0)
    with pytest.raises(ValueError):
        classify_extent([], make_antenna())


@given(st.lists(st.floats(1.0, 2000.0), min_size=1, max_size=30), st.floats(1.0, 3000.0))
def test_extent_is_monotone_in_added_distance(dists, extra):
    ant = make_antenna()
    before = classify_extent([at(d, 0.0) for d in dists], ant)[0]
    after = classify_extent([at(d, 0.0) for d in dists + [max(dists + [extra])]], ant)[0]
    assert after >= before


def test_odd_and_even_medians():
    odd = rasterize_measurements([at(1, 1, rsrp=v) for v in (-80, -90, -100)], TF)
    even = rasterize_measurements([at(1, 1, rsrp=v) for v in (-80, -90)], TF)
    assert odd.values[255, 256] == -90 and odd.valid[255, 256]
    assert even.values[255, 256] == -85
    assert odd.n_valid == 1 and odd.coverage_fraction == 1 / 512 ** 2


def test_empty_cells_are_zero_and_invalid():
    m = rasterize_measurements([at(1, 1)], TF)
    assert m.values[0, 0] == 0 and not m.valid[0, 0]
    empty = rasterize_measurements([], TF)
    assert not empty.valid.any() and not empty.values.any()


def test_out_of_grid_records_are_ignored():
    m = rasterize_measurements([at(5000, 0), at(1, 1, rsrp=-70)], TF)
    assert m.n_valid == 1


positions = st.lists(st.tuples(st.floats(-600, 600), st.floats(-600, 600), st.floats(-140, -40)), max_size=40)


@given(positions, st.randoms(use_true_random=False))
def test_median_is_permutation_invariant(pts, rnd):
    recs = [at(x, y, rsrp=v) for x, y, v in pts]
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    a, b = rasterize_measurements(recs, TF), rasterize_measurements(shuffled, TF)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.valid, b.valid)


@given(positions)
def test_counts_sum_to_in_grid_records(pts):
    recs = [at(x, y, rsrp=v) for x, y, v in pts]
    inside = sum(abs(x) < 512 and abs(y) < 512 for x, y, _ in pts)
    counts = cell_counts(recs, TF)
    assert counts.sum() == inside
    assert np.array_equal(counts > 0, rasterize_measurements(recs, TF).valid)


def test_grouped_median_matches_numpy(rng):
    keys = rng.integers(0, 5, 200)
    vals = rng.normal(size=200)
    uniq, med, count = grouped_median(keys, vals)
    for k, m, c in zip(uniq, med, count):
        assert m == pytest.approx(np.median(vals[keys == k])) and c == np.sum(keys == k)


def test_split_ten_records():
    train, val = split_records(list(range(10)), 0.7, seed=3)
    assert (len(train), len(val)) == (7, 3)
    assert split_records(list(range(10)), 0.7, seed=3) == (train, val)
    assert sorted(train + val) == list(range(10))
    with pytest.raises(ValueError):
        split_records([1])


@given(st.integers(2, 200), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_partition(n, frac, seed):
    train, val = split_records(list(range(n)), frac, seed)
    assert len(train) == round(frac * n)
    assert set(train).isdisjoint(val) and set(train) | set(val) == set(range(n))


@given(st.lists(st.booleans(), min_size=1, max_size=300))
def test_rle_round_trip(bits):
    mask = np.array(bits)
    assert np.array_equal(rle_to_mask(mask_to_rle(mask), mask.shape), mask)


def test_raster_file_round_trip(tmp_path, rng):
    values = rng.normal(-90, 10, (512, 512))
    valid = rng.random((512, 512)) > 0.5
    save_radiomap(RadioMap(values, valid, TF), tmp_path / "m.f32", {"note": "x"})
    raw = (tmp_path / "m.f32").read_bytes()
    assert len(raw) == 512 * 512 * 4
    assert np.array_equal(np.frombuffer(raw, "<f4").reshape(512, 512), values.astype("<f4"))
    back = load_radiomap(tmp_path / "m.f32")
    assert back.transform == TF and np.array_equal(back.valid, valid)
    _, _, _, meta = read_raster(tmp_path / "m.f32")
    assert meta["note"] == "x" and meta["coverage_fraction"] == pytest.approx(valid.mean())


def test_heatmap_scaling(tmp_path):
    values = np.full((512, 512), -90.0)
    values[0, :3] = [-140, -40, -200]
    data = heatmap_bytes(values)
    header = b"P5\n512 512\n255\n"
    assert data.startswith(header)
    px = np.frombuffer(data[len(header):], np.uint8).reshape(512, 512)
    assert list(px[0, :3]) == [0, 255, 0] and px[1, 0] == 128
    write_heatmap(tmp_path / "h.pgm", values)
    assert (tmp_path / "h.pgm").read_bytes() == data
