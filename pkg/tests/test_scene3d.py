import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ORIGIN, make_antenna
from radiotwin.features import winding_number
from radiotwin.geoproj import GeoTransform
from radiotwin.ingest import Building, Scene
from radiotwin.scene3d import (
    GeometryError, build_scene, export_ply, extrude, point_in_triangle, polygon_is_simple, read_ply,
    signed_area, tessellate_footprint, triangle_areas,
)

SQUARE = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
L_SHAPE = np.array([[0, 0], [4, 0], [4, 1], [1, 1], [1, 3], [0, 3]], float)


@st.composite
def star_polygons(draw, max_n=24):
    """Star-shaped (hence simple) polygons around the origin."""
    n = draw(st.integers(3, max_n))
    jit = draw(st.lists(st.floats(0.1, 0.9), min_size=n, max_size=n))
    radii = draw(st.lists(st.floats(1.0, 50.0), min_size=n, max_size=n))
    ang = 2 * math.pi * (np.arange(n) + np.array(jit)) / n
    pts = np.column_stack([np.array(radii) * np.cos(ang), np.array(radii) * np.sin(ang)])
    if draw(st.booleans()):
        pts = pts[::-1]
    return pts


def test_unit_square_two_halves():
    v, t = tessellate_footprint(SQUARE)
    assert len(t) == 2
    np.testing.assert_allclose(triangle_areas(v, t), [0.5, 0.5])


def test_convex_pentagon():
    ang = np.linspace(0, 2 * math.pi, 6)[:-1]
    pent = np.column_stack([np.cos(ang), np.sin(ang)]) * 3
    v, t = tessellate_footprint(pent)
    assert len(t) == 3
    assert triangle_areas(v, t).sum() == pytest.approx(signed_area(pent), rel=1e-12)


def test_concave_l_shape_stays_inside():
    v, t = tessellate_footprint(L_SHAPE)
    cent = v[t].mean(axis=1)
    assert np.all(winding_number(cent[:, 0], cent[:, 1], L_SHAPE) != 0)
    assert triangle_areas(v, t).sum() == pytest.approx(6.0, rel=1e-12)


def test_clockwise_input_and_closing_vertex_accepted():
    v, t = tessellate_footprint(np.vstack([SQUARE[::-1], SQUARE[-1:]]))
    assert signed_area(v) > 0 and np.all(triangle_areas(v, t) > 0)


@pytest.mark.parametrize("poly", [
    [[0, 0], [1, 1], [1, 0], [0, 1]],          # bow tie
    [[0, 0], [1, 0]],                          # too few
    [[0, 0], [1, 0], [2, 0]],                  # collinear
])
def test_invalid_polygons_rejected(poly):
    with pytest.raises(GeometryError):
        tessellate_footprint(np.array(poly, float))


def _circumcircle_contains(a, b, c, p):
    m = np.array([[a[0] - p[0], a[1] - p[1], (a[0] - p[0]) ** 2 + (a[1] - p[1]) ** 2],
                  [b[0] - p[0], b[1] - p[1], (b[0] - p[0]) ** 2 + (b[1] - p[1]) ** 2],
                  [c[0] - p[0], c[1] - p[1], (c[0] - p[0]) ** 2 + (c[1] - p[1]) ** 2]])
    scale = max(np.abs(m).max(), 1.0) ** 2
    return np.linalg.det(m) > 1e-9 * scale


@given(star_polygons())
def test_tessellation_tiles_polygon(poly):
    v, t = tessellate_footprint(poly)
    areas = triangle_areas(v, t)
    assert len(t) == len(v) - 2 and np.all(areas > 0)
    assert abs(areas.sum() - abs(signed_area(poly))) <= 1e-9 * abs(signed_area(poly))
    cent = v[t].mean(axis=1)
    assert np.all(winding_number(cent[:, 0], cent[:, 1], v) != 0)


@given(star_polygons())
def test_interior_edges_are_locally_delaunay(poly):
    v, t = tessellate_footprint(poly)
    n = len(v)
    boundary = {frozenset((i, (i + 1) % n)) for i in range(n)}
    owner = {}
    for k, tri in enumerate(t):
        for e in range(3):
            owner.setdefault(frozenset((tri[e], tri[(e + 1) % 3])), []).append(k)
    for edge, tris in owner.items():
        if edge in boundary:
            assert len(tris) == 1
            continue
        assert len(tris) == 2
        k1, k2 = tris
        opp = [x for x in t[k2] if x not in edge][0]
        assert not _circumcircle_contains(*v[t[k1]], v[opp])


def test_unit_cube():
    mesh = extrude(tessellate_footprint(SQUARE), 1.0)
    assert len(mesh.triangles) == 12
    assert mesh.surface_area() == pytest.approx(6.0)
    assert mesh.euler_characteristic() == 2
    assert mesh.is_watertight() and mesh.volume() == pytest.approx(1.0)


def test_triangle_prism_face_count():
    mesh = extrude(tessellate_footprint(np.array([[0, 0], [2, 0], [0, 2]], float)), 2.0)
    assert len(mesh.triangles) == 8 and mesh.is_watertight()


def test_non_positive_height():
    with pytest.raises(GeometryError):
        extrude(tessellate_footprint(SQUARE), 0.0)


@given(star_polygons(), st.floats(0.5, 200.0))
def test_extrusion_watertight_with_exact_volume(poly, h):
    mesh = extrude(tessellate_footprint(poly), h)
    assert mesh.is_watertight()
    assert mesh.euler_characteristic() == 2
    expected = abs(signed_area(poly)) * h
    assert abs(mesh.volume() - expected) <= 1e-6 * expected


def test_ply_cube_counts_and_round_trip():
    mesh = extrude(tessellate_footprint(SQUARE), 3.0, "glass")
    data = export_ply(mesh)
    text = data.decode()
    assert "element vertex 8" in text and "element face 12" in text and "comment material glass" in text
    back = read_ply(data)
    assert back.material == "glass"
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)


def test_read_ply_rejects_garbage():
    with pytest.raises(GeometryError):
        read_ply(b"not a ply")


def test_build_scene_centres_on_antenna():
    tf = GeoTransform(*ORIGIN, 5.0)
    ring = np.array([[10, 10], [30, 10], [30, 25], [10, 25]], float)
    lat, lon = tf.to_geographic(ring[:, 0], ring[:, 1])
    scene = Scene([Building(tuple(zip(lon, lat)), 12.0, "brick")])
    geo = build_scene(scene, make_antenna())
    assert len(geo) == 1 and geo.materials == ["brick"]
    np.testing.assert_allclose(geo.footprints[0], ring, atol=1e-6)
    assert geo.meshes[0].volume() == pytest.approx(300 * 12.0, rel=1e-6)
    assert len(build_scene(Scene(), make_antenna())) == 0


def test_thousand_buildings_under_two_seconds():
    rng = np.random.default_rng(0)
    polys = []
    for _ in range(1000):
        n = int(rng.integers(4, 12))
        ang = 2 * math.pi * (np.arange(n) + rng.uniform(0.1, 0.9, n)) / n
        r = rng.uniform(5, 30, n)
        polys.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
    start = time.perf_counter()
    meshes = [extrude(tessellate_footprint(p), 10.0) for p in polys]
    assert time.perf_counter() - start < 2.0
    assert len(meshes) == 1000


def test_helpers():
    assert polygon_is_simple(SQUARE) and not polygon_is_simple(np.array([[0, 0], [1, 1], [1, 0], [0, 1]]))
    assert point_in_triangle((0.2, 0.2), (0, 0), (1, 0), (0, 1))
    assert not point_in_triangle((0.8, 0.8), (0, 0), (1, 0), (0, 1))
