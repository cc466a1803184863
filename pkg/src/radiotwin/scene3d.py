"""Footprint tessellation, extrusion to closed prisms, PLY I/O and scene assembly."""
from __future__ import annotations

import io
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .geoproj import GeoTransform


class GeometryError(ValueError):
    pass


# -- 2D polygon helpers ---------------------------------------------------

def signed_area(poly) -> float:
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d1 = _cross(p3, p4, p1)
    d2 = _cross(p3, p4, p2)
    d3 = _cross(p1, p2, p3)
    d4 = _cross(p1, p2, p4)
    if ((d1 > 0) != (d2 > 0)) and d1 != 0 and d2 != 0 and ((d3 > 0) != (d4 > 0)) and d3 != 0 and d4 != 0:
        return True

    def on_segment(p, q, r):
        return min(p[0], q[0]) <= r[0] <= max(p[0], q[0]) and min(p[1], q[1]) <= r[1] <= max(p[1], q[1])

    return ((d1 == 0 and on_segment(p3, p4, p1)) or (d2 == 0 and on_segment(p3, p4, p2))
            or (d3 == 0 and on_segment(p1, p2, p3)) or (d4 == 0 and on_segment(p1, p2, p4)))


def polygon_is_simple(poly) -> bool:
    """True for a non-degenerate polygon whose edges meet only at shared vertices."""
    pts = [tuple(map(float, p)) for p in poly]
    n = len(pts)
    if n < 3 or len(set(pts)) != n:
        return False
    scale = max(np.ptp(np.asarray(pts), axis=0).max(), 1e-300)
    if abs(signed_area(pts)) <= 1e-12 * scale * scale:
        return False
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            if _segments_intersect(a, b, pts[j], pts[(j + 1) % n]):
                return False
    return True


def point_in_triangle(p, a, b, c) -> bool:
    return _cross(a, b, p) >= 0 and _cross(b, c, p) >= 0 and _cross(c, a, p) >= 0


def _in_circumcircle(a, b, c, d) -> bool:
    """d strictly inside the circumcircle of the CCW triangle abc."""
    m = np.array([
        [a[0] - d[0], a[1] - d[1], (a[0] - d[0]) ** 2 + (a[1] - d[1]) ** 2],
        [b[0] - d[0], b[1] - d[1], (b[0] - d[0]) ** 2 + (b[1] - d[1]) ** 2],
        [c[0] - d[0], c[1] - d[1], (c[0] - d[0]) ** 2 + (c[1] - d[1]) ** 2],
    ])
    scale = max(np.abs(m).max(), 1e-300)
    return np.linalg.det(m) > 1e-12 * scale ** 2


def _ear_clip(pts):
    n = len(pts)
    idx = list(range(n))
    tris = []
    guard = 0
    while len(idx) > 3:
        m = len(idx)
        for k in range(m):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % m]
            a, b, c = pts[i0], pts[i1], pts[i2]
            if _cross(a, b, c) <= 0:
                continue
            if any(point_in_triangle(pts[j], a, b, c) for j in idx if j not in (i0, i1, i2)):
                continue
            tris.append((i0, i1, i2))
            del idx[k]
            break
        else:
            raise GeometryError("no ear found; polygon is not simple")
        guard += 1
        if guard > n * n:
            raise GeometryError("ear clipping did not terminate")
    tris.append(tuple(idx))
    return tris


def _lawson_flip(pts, tris, n):
    """Flip non-boundary edges until every triangle pair is locally Delaunay."""
    boundary = {frozenset((i, (i + 1) % n)) for i in range(n)}
    tris = [list(t) for t in tris]
    changed = True
    sweeps = 0
    while changed:
        changed = False
        sweeps += 1
        if sweeps > 10 * n + 10:
            break
        edge_map = {}
        for ti, t in enumerate(tris):
            for k in range(3):
                e = frozenset((t[k], t[(k + 1) % 3]))
                edge_map.setdefault(e, []).append(ti)
        for e, owners in edge_map.items():
            if len(owners) != 2 or e in boundary:
                continue
            t1, t2 = tris[owners[0]], tris[owners[1]]
            a, b = tuple(e)
            c = next(v for v in t1 if v not in e)
            d = next(v for v in t2 if v not in e)
            # orient t1 as (a, b, c) CCW
            if _cross(pts[a], pts[b], pts[c]) < 0:
                a, b = b, a
            if not _in_circumcircle(pts[a], pts[b], pts[c], pts[d]):
                continue
            # quad a-d-b-c must be strictly convex for the flip to stay valid
            if _cross(pts[c], pts[d], pts[a]) * _cross(pts[c], pts[d], pts[b]) >= 0:
                continue
            new1 = [c, a, d] if _cross(pts[c], pts[a], pts[d]) > 0 else [c, d, a]
            new2 = [c, d, b] if _cross(pts[c], pts[d], pts[b]) > 0 else [c, b, d]
            tris[owners[0]], tris[owners[1]] = new1, new2
            changed = True
            break
    return [tuple(t) for t in tris]


def tessellate_footprint(polygon):
    """Constrained Delaunay triangulation of a simple polygon.

    Returns ``(vertices, triangles)``: the polygon vertices (made counter-clockwise)
    as an (n, 2) array and an (n-2, 3) integer array of CCW triangles.
    """
    pts = np.asarray(polygon, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise GeometryError("polygon needs at least 3 (x, y) vertices")
    if len(pts) > 3 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    if not polygon_is_simple(pts):
        raise GeometryError("polygon is self-intersecting or degenerate")
    if signed_area(pts) < 0:
        pts = pts[::-1].copy()
    plist = [tuple(p) for p in pts]
    tris = _ear_clip(plist)
    tris = _lawson_flip(plist, tris, len(plist))
    return pts, np.asarray(tris, dtype=np.int64)


def triangle_areas(vertices, triangles):
    v = np.asarray(vertices, dtype=float)
    a, b, c = v[triangles[:, 0]], v[triangles[:, 1]], v[triangles[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


# -- 3D meshes ------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) metres
    triangles: np.ndarray  # (F, 3) vertex indices, outward CCW winding
    material: str = "concrete"

    def edge_counts(self) -> Counter:
        counts = Counter()
        for t in self.triangles:
            for k in range(3):
                a, b = int(t[k]), int(t[(k + 1) % 3])
                counts[(min(a, b), max(a, b))] += 1
        return counts

    def is_watertight(self) -> bool:
        counts = self.edge_counts()
        if not counts or any(c != 2 for c in counts.values()):
            return False
        # consistent orientation: every directed edge appears exactly once
        directed = Counter()
        for t in self.triangles:
            for k in range(3):
                directed[(int(t[k]), int(t[(k + 1) % 3]))] += 1
        return all(c == 1 for c in directed.values()) and not self.has_degenerate()

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.triangles[:, 0]], v[self.triangles[:, 1]], v[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def has_degenerate(self) -> bool:
        areas = self.face_areas()
        scale = max(np.ptp(self.vertices, axis=0).max(), 1.0)
        return bool(np.any(areas <= 1e-12 * scale * scale))

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def volume(self) -> float:
        """Signed volume from the tetrahedron fan about the origin."""
        v = self.vertices
        a, b, c = v[self.triangles[:, 0]], v[self.triangles[:, 1]], v[self.triangles[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edge_counts()) + len(self.triangles)


def extrude(triangles2d, height, material="concrete") -> TriangleMesh:
    """Extrude a tessellated footprint ``(vertices, triangles)`` into a closed prism."""
    if not height > 0:
        raise GeometryError(f"height must be > 0, got {height}")
    verts2d, tris = triangles2d
    verts2d = np.asarray(verts2d, dtype=float)
    tris = np.asarray(tris, dtype=np.int64)
    n = len(verts2d)
    bottom = np.column_stack([verts2d, np.zeros(n)])
    top = np.column_stack([verts2d, np.full(n, float(height))])
    vertices = np.vstack([bottom, top])
    faces = [tris[:, ::-1], tris + n]  # bottom faces down, top faces up
    i = np.arange(n)
    j = (i + 1) % n
    faces.append(np.column_stack([i, j, j + n]))
    faces.append(np.column_stack([i, j + n, i + n]))
    return TriangleMesh(vertices, np.vstack(faces), material)


def export_ply(mesh: TriangleMesh) -> bytes:
    out = io.StringIO()
    out.write("ply\nformat ascii 1.0\n")
    out.write(f"comment material {mesh.material}\n")
    out.write(f"element vertex {len(mesh.vertices)}\n")
    out.write("property float x\nproperty float y\nproperty float z\n")
    out.write(f"element face {len(mesh.triangles)}\n")
    out.write("property list uchar int vertex_indices\nend_header\n")
    for x, y, z in mesh.vertices:
        out.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
    for a, b, c in mesh.triangles:
        out.write(f"3 {a} {b} {c}\n")
    return out.getvalue().encode("ascii")


def read_ply(data: bytes) -> TriangleMesh:
    lines = data.decode("ascii").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise GeometryError("not a PLY file")
    material = "concrete"
    n_vert = n_face = 0
    k = 1
    while lines[k].strip() != "end_header":
        parts = lines[k].split()
        if parts[:2] == ["comment", "material"]:
            material = parts[2]
        elif parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        k += 1
    k += 1
    verts = np.array([[float(t) for t in lines[k + i].split()] for i in range(n_vert)]).reshape(n_vert, 3)
    k += n_vert
    faces = []
    for i in range(n_face):
        parts = [int(t) for t in lines[k + i].split()]
        if parts[0] != 3:
            raise GeometryError("only triangular faces are supported")
        faces.append(parts[1:])
    return TriangleMesh(verts, np.asarray(faces, dtype=np.int64).reshape(n_face, 3), material)


# -- scene assembly -------------------------------------------------------

@dataclass
class SceneGeometry:
    """Buildings in antenna-centred ENU metres."""
    meshes: list = field(default_factory=list)
    footprints: list = field(default_factory=list)  # (n, 2) CCW arrays
    heights: list = field(default_factory=list)
    materials: list = field(default_factory=list)

    def __len__(self):
        return len(self.meshes)

    def material_names(self):
        return sorted(set(self.materials))

    def walls(self):
        """Vertical wall segments: (p0 (W,2), p1 (W,2), outward normal (W,2), building index (W,))."""
        p0, p1, owner = [], [], []
        for b, fp in enumerate(self.footprints):
            fp = np.asarray(fp, dtype=float)
            p0.append(fp)
            p1.append(np.roll(fp, -1, axis=0))
            owner.append(np.full(len(fp), b))
        if not p0:
            empty = np.zeros((0, 2))
            return empty, empty, empty, np.zeros(0, dtype=np.int64)
        p0, p1 = np.vstack(p0), np.vstack(p1)
        e = p1 - p0
        normal = np.column_stack([e[:, 1], -e[:, 0]]) / np.linalg.norm(e, axis=1)[:, None]
        return p0, p1, normal, np.concatenate(owner)


def build_scene(scene, antenna) -> SceneGeometry:
    """Tessellate and extrude every building around ``antenna`` (local ENU frame)."""
    tf = GeoTransform(antenna.latitude, antenna.longitude, 5.0)
    geo = SceneGeometry()
    for b in scene.buildings:
        lonlat = np.asarray(b.footprint, dtype=float)
        x, y = tf.to_local(lonlat[:, 1], lonlat[:, 0])
        verts, tris = tessellate_footprint(np.column_stack([x, y]))
        mesh = extrude((verts, tris), b.height, b.material)
        geo.meshes.append(mesh)
        geo.footprints.append(verts)
        geo.heights.append(float(b.height))
        geo.materials.append(b.material)
    return geo


def scene_from_footprints(footprints, heights, materials) -> SceneGeometry:
    """Assemble a SceneGeometry straight from local-metre footprints."""
    geo = SceneGeometry()
    for fp, h, m in zip(footprints, heights, materials):
        verts, tris = tessellate_footprint(fp)
        geo.meshes.append(extrude((verts, tris), h, m))
        geo.footprints.append(verts)
        geo.heights.append(float(h))
        geo.materials.append(m)
    return geo
