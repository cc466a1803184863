"""2.5D differentiable ray-launching propagation solver.

Rays are launched uniformly in azimuth in the horizontal plane at the antenna
and reflect specularly off vertical building walls (plan view). Every grid
cell crossed by a ray records the ray's path, identified by its ordered
sequence of reflecting walls. A path's received power at a cell is evaluated
with the image-source construction: the unfolded horizontal distance from the
path's image source to the cell centre, combined with the transmitter/receiver
height difference, gives the 3D path length and the launch elevation.

Tracing produces a :class:`PathTable` that depends only on geometry. Antenna
and material parameters enter through :func:`evaluate`, so calibration traces
once and re-evaluates the table with analytic gradients (path geometry is
treated as fixed).
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from . import GRID_SIZE, NO_COVERAGE_DBM, RX_HEIGHT_M
from .antenna import (
    ANTENNA_PARAMS, EMBED_DIM, PARAM_BOUNDS, AntennaParams, MaterialProps, TrainableMaterial,
    TrainablePattern, antenna_param_jacobians, derive_antenna_params, derive_material_params,
    embedding_for_logit, material_param_jacobians, pattern_gain, pattern_gain_partials,
)
from .features import antenna_frame, fspl_db
from .geoproj import GeoTransform
from .radiomap import RadioMap
from .scene3d import GeometryError, SceneGeometry
from .features import winding_number

EPS0 = 8.8541878128e-12
MAX_REFLECTION_LOSS_DB = 60.0
MODES = ("A", "AM", "AMv")


@dataclass
class SolverConfig:
    n_rays: int = 65_536
    max_reflections: int = 7
    no_coverage_fill: float = NO_COVERAGE_DBM
    rx_height: float = RX_HEIGHT_M
    resolution: float = 5.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_rays < 1:
            raise ValueError("n_rays must be >= 1")
        if self.max_reflections < 0:
            raise ValueError("max_reflections must be >= 0")


# -- materials ------------------------------------------------------------

# ITU-R P.2040 style frequency dependence: eps_r = a, sigma = c * f_GHz ** d
ITU_MATERIALS = {
    "concrete": (5.24, 0.0462, 0.7822),
    "brick": (3.91, 0.0238, 0.16),
    "glass": (6.31, 0.0036, 1.3394),
}


def itu_material(name, frequency_hz) -> MaterialProps:
    a, c, d = ITU_MATERIALS[name]
    return MaterialProps(a, c * (frequency_hz / 1e9) ** d)


def _fresnel_te(eps_r, sigma, cos_i, frequency_hz):
    """TE reflection loss (dB) and its derivatives w.r.t. eps_r and sigma."""
    eps_r = np.asarray(eps_r, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    c = np.clip(np.asarray(cos_i, dtype=float), 0.0, 1.0)
    w_eps0 = 2.0 * math.pi * frequency_hz * EPS0
    eps = eps_r - 1j * sigma / w_eps0
    s = np.sqrt(eps - 1.0 + c * c)
    denom = c + s
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(np.abs(denom) > 0, (c - s) / denom, -1.0 + 0j)
        mag = np.abs(gamma)
        loss = np.where(mag > 0, -20.0 * np.log10(mag), np.inf)
        # d ln(Gamma) / d eps = c / (s (eps - 1))
        dlng = np.where((np.abs(s) > 0) & (np.abs(eps - 1.0) > 0), c / (s * (eps - 1.0)), 0.0)
    k = -20.0 / math.log(10.0)
    d_eps = k * np.real(dlng)
    d_sigma = k * np.real(dlng * (-1j / w_eps0))
    clamped = ~(loss < MAX_REFLECTION_LOSS_DB)
    loss = np.where(clamped, MAX_REFLECTION_LOSS_DB, np.maximum(loss, 0.0))
    d_eps = np.where(clamped, 0.0, d_eps)
    d_sigma = np.where(clamped, 0.0, d_sigma)
    return loss, d_eps, d_sigma


def reflection_loss(material: MaterialProps, incidence_angle, frequency_hz):
    """Reflection loss in dB (>= 0, capped at 60 dB) for a TE wave off a lossy half-space."""
    loss, _, _ = _fresnel_te(material.eps_r, material.sigma, np.cos(incidence_angle), frequency_hz)
    return loss


def reflection_loss_grad(material: MaterialProps, incidence_angle, frequency_hz):
    """(d loss / d eps_r, d loss / d sigma)."""
    _, de, ds = _fresnel_te(material.eps_r, material.sigma, np.cos(incidence_angle), frequency_hz)
    return de, ds


# -- trainable scene parameters ------------------------------------------

def _logit_for(name, value):
    lo, hi = PARAM_BOUNDS[name]
    s = (value - lo) / (hi - lo)
    s = min(max(s, 1e-9), 1 - 1e-9)
    return math.log(s / (1 - s))


@dataclass
class TrainableSceneParams:
    """Calibration state.

    ``A``: four bounded antenna scalars. ``AM``: plus (eps_r, sigma) per material,
    ``2M + 4`` scalars. ``AMv``: every parameter is an embedding vector projected
    by a shared, trainable read-out (one for the antenna, one for materials).
    """
    mode: str
    pattern: TrainablePattern
    materials: dict              # name -> TrainableMaterial
    u_mat: np.ndarray

    @classmethod
    def initial(cls, mode, material_names, frequency_hz, antenna: AntennaParams | None = None,
                material_props: dict | None = None, seed=0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode == "AMv":
            rng = np.random.default_rng(seed)
            u_ant = rng.normal(size=EMBED_DIM)
            u_mat = rng.normal(size=EMBED_DIM)
        else:
            u_ant = np.ones(1)
            u_mat = np.ones(1)
        emb = {}
        for name in ANTENNA_PARAMS:
            z = 0.0 if antenna is None else _logit_for(name, getattr(antenna, name))
            emb[name] = embedding_for_logit(z, u_ant)
        mats = {}
        for name in sorted(material_names):
            props = (material_props or {}).get(name) or itu_material(name, frequency_hz)
            mats[name] = TrainableMaterial(
                embedding_for_logit(math.log(props.eps_r - 1.0), u_mat),
                embedding_for_logit(math.log(props.sigma), u_mat),
            )
        return cls(mode, TrainablePattern(emb, u_ant), mats, u_mat)

    def antenna_params(self) -> AntennaParams:
        return derive_antenna_params(self.pattern)

    def material_props(self) -> dict:
        return {name: derive_material_params(m, self.u_mat) for name, m in self.materials.items()}

    # flat free-parameter vector

    def free_vector(self) -> np.ndarray:
        parts = [self.pattern.embeddings[n] for n in ANTENNA_PARAMS]
        if self.mode == "AMv":
            parts.append(self.pattern.u)
        if self.mode in ("AM", "AMv"):
            for name in sorted(self.materials):
                parts += [self.materials[name].w_eps, self.materials[name].w_sigma]
        if self.mode == "AMv":
            parts.append(self.u_mat)
        return np.concatenate(parts).astype(float)

    @property
    def n_free(self) -> int:
        return self.free_vector().size

    def with_free_vector(self, vec) -> "TrainableSceneParams":
        vec = np.asarray(vec, dtype=float)
        k = len(self.pattern.u)
        pos = 0

        def take(n):
            nonlocal pos
            out = vec[pos:pos + n].copy()
            pos += n
            return out

        emb = {n: take(k) for n in ANTENNA_PARAMS}
        u_ant = take(k) if self.mode == "AMv" else self.pattern.u.copy()
        mats = {}
        km = len(self.u_mat)
        for name in sorted(self.materials):
            if self.mode in ("AM", "AMv"):
                mats[name] = TrainableMaterial(take(km), take(km))
            else:
                m = self.materials[name]
                mats[name] = TrainableMaterial(m.w_eps.copy(), m.w_sigma.copy())
        u_mat = take(km) if self.mode == "AMv" else self.u_mat.copy()
        if pos != vec.size:
            raise ValueError(f"expected {pos} free parameters, got {vec.size}")
        return TrainableSceneParams(self.mode, TrainablePattern(emb, u_ant), mats, u_mat)

    def chain(self, grad_antenna: dict, grad_materials: dict) -> np.ndarray:
        """Map gradients w.r.t. derived parameters onto the free vector."""
        jac = antenna_param_jacobians(self.pattern)
        parts = [grad_antenna[n] * jac[n][0] for n in ANTENNA_PARAMS]
        if self.mode == "AMv":
            parts.append(sum(grad_antenna[n] * jac[n][1] for n in ANTENNA_PARAMS))
        if self.mode in ("AM", "AMv"):
            du_mat = np.zeros_like(self.u_mat)
            for name in sorted(self.materials):
                g_eps, g_sig = grad_materials.get(name, (0.0, 0.0))
                (de_w, de_u), (ds_w, ds_u) = material_param_jacobians(self.materials[name], self.u_mat)
                parts += [g_eps * de_w, g_sig * ds_w]
                du_mat = du_mat + g_eps * de_u + g_sig * ds_u
            if self.mode == "AMv":
                parts.append(du_mat)
        return np.concatenate(parts).astype(float)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "embeddings": {n: self.pattern.embeddings[n].tolist() for n in ANTENNA_PARAMS},
            "u_ant": self.pattern.u.tolist(),
            "materials": {
                n: {"w_eps": m.w_eps.tolist(), "w_sigma": m.w_sigma.tolist()} for n, m in self.materials.items()
            },
            "u_mat": self.u_mat.tolist(),
            "derived": {
                "antenna": self.antenna_params().as_dict(),
                "materials": {n: {"eps_r": p.eps_r, "sigma": p.sigma} for n, p in self.material_props().items()},
            },
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrainableSceneParams":
        pattern = TrainablePattern({n: np.asarray(data["embeddings"][n], float) for n in ANTENNA_PARAMS},
                                   np.asarray(data["u_ant"], float))
        mats = {n: TrainableMaterial(np.asarray(m["w_eps"], float), np.asarray(m["w_sigma"], float))
                for n, m in data["materials"].items()}
        return cls(data["mode"], pattern, mats, np.asarray(data["u_mat"], float))


# -- ray launching kernel -------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _walk_cells(ox, oy, dx, dy, length, res, half, pid, stamp, keys, nk):
    side = 2 * half
    ncell = side * side
    gx = ox / res + half
    gy = half - oy / res
    vx = dx
    vy = -dy
    tl = length / res
    col = int(math.floor(gx))
    row = int(math.floor(gy))
    inf = 1e300
    if vx > 0:
        step_x, tmax_x, tdel_x = 1, (col + 1 - gx) / vx, 1.0 / vx
    elif vx < 0:
        step_x, tmax_x, tdel_x = -1, (gx - col) / -vx, -1.0 / vx
    else:
        step_x, tmax_x, tdel_x = 0, inf, inf
    if vy > 0:
        step_y, tmax_y, tdel_y = 1, (row + 1 - gy) / vy, 1.0 / vy
    elif vy < 0:
        step_y, tmax_y, tdel_y = -1, (gy - row) / -vy, -1.0 / vy
    else:
        step_y, tmax_y, tdel_y = 0, inf, inf
    while True:
        if 0 <= row < side and 0 <= col < side:
            cell = row * side + col
            if stamp[cell] != pid:
                stamp[cell] = pid
                if nk == keys.shape[0]:
                    grown = np.empty(2 * keys.shape[0], np.int64)
                    grown[:nk] = keys[:nk]
                    keys = grown
                keys[nk] = pid * ncell + cell
                nk += 1
        if tmax_x < tmax_y:
            t = tmax_x
            col += step_x
            tmax_x += tdel_x
        else:
            t = tmax_y
            row += step_y
            tmax_y += tdel_y
        if t > tl:
            break
    return keys, nk


@numba.njit(cache=True, nogil=True)
def _trace_chunk(angles, p0, p1, nrm, active, half_ext, res, half, max_refl):
    n_rays = angles.shape[0]
    n_walls = p0.shape[0]
    max_paths = 1 + n_rays * max_refl
    parent = np.empty(max_paths, np.int64)
    wall = np.empty(max_paths, np.int64)
    parent[0] = -1
    wall[0] = -1
    n_paths = 1
    lookup = dict()
    lookup[np.int64(-1)] = np.int64(0)
    stamp = np.full(4 * half * half, -1, np.int64)
    keys = np.empty(1 << 16, np.int64)
    nk = 0
    for r in range(n_rays):
        ox = 0.0
        oy = 0.0
        dx = math.cos(angles[r])
        dy = math.sin(angles[r])
        pid = 0
        last = -1
        for level in range(max_refl + 1):
            tbest = 1e300
            wbest = -1
            for w in range(n_walls):
                if w == last or not active[w]:
                    continue
                ex = p1[w, 0] - p0[w, 0]
                ey = p1[w, 1] - p0[w, 1]
                denom = dx * ey - dy * ex
                if abs(denom) < 1e-12:
                    continue
                qx = p0[w, 0] - ox
                qy = p0[w, 1] - oy
                t = (qx * ey - qy * ex) / denom
                s = (qx * dy - qy * dx) / denom
                if t > 1e-9 and s >= -1e-12 and s <= 1.0 + 1e-12 and t < tbest:
                    tbest = t
                    wbest = w
            texit = 1e300
            if dx > 0:
                texit = min(texit, (half_ext - ox) / dx)
            elif dx < 0:
                texit = min(texit, (-half_ext - ox) / dx)
            if dy > 0:
                texit = min(texit, (half_ext - oy) / dy)
            elif dy < 0:
                texit = min(texit, (-half_ext - oy) / dy)
            hit = tbest < texit
            length = tbest if hit else texit
            keys, nk = _walk_cells(ox, oy, dx, dy, length, res, half, pid, stamp, keys, nk)
            if not hit or level == max_refl:
                break
            ox += tbest * dx
            oy += tbest * dy
            nx = nrm[wbest, 0]
            ny = nrm[wbest, 1]
            dot = dx * nx + dy * ny
            dx -= 2.0 * dot * nx
            dy -= 2.0 * dot * ny
            code = pid * (n_walls + 1) + wbest
            if code in lookup:
                pid = lookup[code]
            else:
                lookup[code] = n_paths
                parent[n_paths] = pid
                wall[n_paths] = wbest
                pid = n_paths
                n_paths += 1
            last = wbest
    return keys[:nk].copy(), parent[:n_paths].copy(), wall[:n_paths].copy()


# -- path table -----------------------------------------------------------

@dataclass
class PathTable:
    """Frozen per-(cell, path) geometry, sorted by cell."""
    transform: GeoTransform
    cell: np.ndarray            # (E,) flat cell index
    d3: np.ndarray              # (E,) unfolded 3D path length, m
    zenith: np.ndarray          # (E,) launch zenith angle in the antenna frame
    phi: np.ndarray             # (E,) launch azimuth in the antenna frame
    n_bounces: np.ndarray       # (E,)
    bounce_entry: np.ndarray    # (B,)
    bounce_material: np.ndarray  # (B,) index into material_names
    bounce_cos: np.ndarray      # (B,) cosine of the 3D incidence angle
    material_names: list
    n_rays: int = 0
    n_paths: int = 0
    cells: np.ndarray = field(init=False)
    starts: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.cell.size:
            self.cells, self.starts = np.unique(self.cell, return_index=True)
        else:
            self.cells = np.zeros(0, np.int64)
            self.starts = np.zeros(0, np.int64)

    @property
    def n_entries(self) -> int:
        return int(self.cell.size)

    def restrict(self, flat_cells) -> "PathTable":
        """Sub-table with only the entries of the given cells."""
        keep = np.isin(self.cell, np.asarray(flat_cells))
        new_index = np.cumsum(keep) - 1
        bkeep = keep[self.bounce_entry]
        return PathTable(
            self.transform, self.cell[keep], self.d3[keep], self.zenith[keep], self.phi[keep],
            self.n_bounces[keep], new_index[self.bounce_entry[bkeep]], self.bounce_material[bkeep],
            self.bounce_cos[bkeep], list(self.material_names), self.n_rays, self.n_paths,
        )


def _launch_angles(n_rays, seed):
    offset = np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi)
    return offset + 2.0 * math.pi * np.arange(n_rays) / n_rays


def _check_geometry(geometry: SceneGeometry):
    for i, mesh in enumerate(geometry.meshes):
        if not mesh.is_watertight():
            raise GeometryError(f"mesh {i} is not watertight")


RAY_CHUNK = 8192


def trace_paths(geometry: SceneGeometry, antenna, config: SolverConfig) -> PathTable:
    """Launch rays and collect the distinct (cell, path) pairs with their geometry."""
    _check_geometry(geometry)
    tf = GeoTransform(antenna.latitude, antenna.longitude, config.resolution)
    half = GRID_SIZE // 2
    ncell = GRID_SIZE * GRID_SIZE
    p0, p1, normal, owner = geometry.walls()
    material_names = geometry.material_names()
    wall_material = np.array([material_names.index(geometry.materials[b]) for b in owner], dtype=np.int64)
    # a building enclosing the antenna is its mount: its walls do not block
    active = np.ones(len(p0), dtype=np.bool_)
    for b, fp in enumerate(geometry.footprints):
        if winding_number(np.array(0.0), np.array(0.0), fp) != 0:
            active[owner == b] = False

    angles = _launch_angles(config.n_rays, config.seed)
    # the partition is fixed so path numbering does not depend on the worker count
    chunks = [angles[i:i + RAY_CHUNK] for i in range(0, len(angles), RAY_CHUNK)]
    args = (np.ascontiguousarray(p0), np.ascontiguousarray(p1), np.ascontiguousarray(normal), active,
            tf.half_extent, float(tf.resolution), half, int(config.max_reflections))
    workers = max(1, int(config.workers))
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _trace_chunk(c, *args), chunks))
    else:
        results = [_trace_chunk(c, *args) for c in chunks]

    # merge chunk-local path ids into global ids in chunk order
    n_walls = len(p0)
    global_code = {-1: 0}
    g_parent, g_wall = [-1], [-1]
    all_keys = []
    for keys, parent, wall in results:
        local_to_global = np.empty(len(parent), dtype=np.int64)
        local_to_global[0] = 0
        for lid in range(1, len(parent)):
            code = int(local_to_global[parent[lid]]) * (n_walls + 1) + int(wall[lid])
            gid = global_code.get(code)
            if gid is None:
                gid = len(g_parent)
                global_code[code] = gid
                g_parent.append(int(local_to_global[parent[lid]]))
                g_wall.append(int(wall[lid]))
            local_to_global[lid] = gid
        all_keys.append(local_to_global[keys // ncell] * ncell + keys % ncell)
    keys = np.unique(np.concatenate(all_keys)) if all_keys else np.zeros(0, np.int64)
    pid = keys // ncell
    cell = keys % ncell
    order = np.lexsort((pid, cell))
    pid, cell = pid[order], cell[order]

    g_parent = np.asarray(g_parent, dtype=np.int64)
    g_wall = np.asarray(g_wall, dtype=np.int64)
    level, image = _path_images(g_parent, g_wall, p0, normal)

    # unfolded geometry per entry
    x, y = tf.cell_centres()
    cx, cy = x.ravel()[cell], y.ravel()[cell]
    vx, vy = cx - image[pid, 0], cy - image[pid, 1]
    s = np.hypot(vx, vy)
    s = np.maximum(s, 1e-9)
    hx, hy = vx / s, vy / s
    dz = config.rx_height - antenna.height_m
    d3 = np.sqrt(s * s + dz * dz)
    cos_elev = s / d3
    nb = level[pid]
    b_entry, b_mat, b_cos = [], [], []
    cur = pid.copy()
    live = np.flatnonzero(nb > 0)
    # walk each path back from its last wall to the launch direction
    while live.size:
        w = g_wall[cur[live]]
        nx, ny = normal[w, 0], normal[w, 1]
        dot = hx[live] * nx + hy[live] * ny
        b_entry.append(live)
        b_mat.append(wall_material[w])
        b_cos.append(np.abs(dot) * cos_elev[live])
        hx[live] -= 2.0 * dot * nx
        hy[live] -= 2.0 * dot * ny
        cur[live] = g_parent[cur[live]]
        live = live[cur[live] > 0]
    _, phi, elev = antenna_frame(hx * s, hy * s, np.full_like(s, dz), antenna.azimuth_rad, antenna.tilt_rad)
    if b_entry:
        b_entry = np.concatenate(b_entry)
        b_mat = np.concatenate(b_mat)
        b_cos = np.concatenate(b_cos)
        border = np.argsort(b_entry, kind="stable")
        b_entry, b_mat, b_cos = b_entry[border], b_mat[border], b_cos[border]
    else:
        b_entry = np.zeros(0, np.int64)
        b_mat = np.zeros(0, np.int64)
        b_cos = np.zeros(0)
    return PathTable(tf, cell, d3, math.pi / 2 - elev, phi, nb, b_entry, b_mat, b_cos,
                     material_names, config.n_rays, len(g_parent))


def _path_images(parent, wall, p0, normal):
    n = len(parent)
    level = np.zeros(n, dtype=np.int64)
    image = np.zeros((n, 2))
    # parents always precede children
    for pid in range(1, n):
        level[pid] = level[parent[pid]] + 1
    for lv in range(1, int(level.max(initial=0)) + 1):
        ids = np.flatnonzero(level == lv)
        src = image[parent[ids]]
        w = wall[ids]
        dist = np.einsum("ij,ij->i", src - p0[w], normal[w])
        image[ids] = src - 2.0 * dist[:, None] * normal[w]
    return level, image


# -- evaluation -----------------------------------------------------------

def _material_arrays(table: PathTable, materials: dict):
    eps = np.array([materials[n].eps_r for n in table.material_names])
    sig = np.array([materials[n].sigma for n in table.material_names])
    return eps, sig


def entry_powers(table: PathTable, antenna, ant: AntennaParams, materials: dict):
    """Per-entry received power (dBm) and reflection-loss derivatives per bounce."""
    p = (antenna.tx_power_dbm - antenna.hardware_loss_db
         + pattern_gain(ant, table.zenith, table.phi) - fspl_db(table.d3, antenna.frequency_hz))
    if table.bounce_entry.size:
        eps, sig = _material_arrays(table, materials)
        loss, d_eps, d_sig = _fresnel_te(eps[table.bounce_material], sig[table.bounce_material],
                                         table.bounce_cos, antenna.frequency_hz)
        p = p - np.bincount(table.bounce_entry, weights=loss, minlength=table.n_entries)
    else:
        d_eps = d_sig = np.zeros(0)
    return p, d_eps, d_sig


def _cell_power(table: PathTable, p):
    m = np.maximum.reduceat(p, table.starts)
    rel = 10.0 ** ((p - np.repeat(m, np.diff(np.append(table.starts, p.size)))) / 10.0)
    total = np.add.reduceat(rel, table.starts)
    return m + 10.0 * np.log10(total)


def evaluate(table: PathTable, antenna, ant: AntennaParams, materials: dict, fill=NO_COVERAGE_DBM) -> RadioMap:
    """Power-sum of all paths per cell; unreached cells and cells below ``fill`` are invalid."""
    values = np.full(GRID_SIZE * GRID_SIZE, float(fill))
    valid = np.zeros(GRID_SIZE * GRID_SIZE, dtype=bool)
    if table.n_entries:
        p, _, _ = entry_powers(table, antenna, ant, materials)
        power = _cell_power(table, p)
        ok = power >= fill
        values[table.cells[ok]] = power[ok]
        valid[table.cells[ok]] = True
    shape = (GRID_SIZE, GRID_SIZE)
    return RadioMap(values.reshape(shape), valid.reshape(shape), table.transform)


def derived_gradients(table: PathTable, antenna, ant: AntennaParams, materials: dict, loss_adjoint,
                      fill=NO_COVERAGE_DBM):
    """Gradient of sum(adjoint * map) w.r.t. antenna parameters and (eps_r, sigma) per material.

    Cells that are uncovered or below ``fill`` carry the constant fill value and
    contribute nothing.
    """
    grad_ant = {n: 0.0 for n in ANTENNA_PARAMS}
    grad_mat = {n: (0.0, 0.0) for n in table.material_names}
    if not table.n_entries:
        return grad_ant, grad_mat
    adj = np.asarray(loss_adjoint, dtype=float).ravel()
    p, d_eps, d_sig = entry_powers(table, antenna, ant, materials)
    power = _cell_power(table, p)
    counts = np.diff(np.append(table.starts, p.size))
    cell_adj = np.where(power >= fill, adj[table.cells], 0.0)
    weight = 10.0 ** ((p - np.repeat(power, counts)) / 10.0)
    coef = np.repeat(cell_adj, counts) * weight
    partials = pattern_gain_partials(ant, table.zenith, table.phi)
    for n in ANTENNA_PARAMS:
        grad_ant[n] = float(coef @ partials[n])
    if table.bounce_entry.size:
        bcoef = coef[table.bounce_entry]
        m = len(table.material_names)
        ge = np.bincount(table.bounce_material, weights=-bcoef * d_eps, minlength=m)
        gs = np.bincount(table.bounce_material, weights=-bcoef * d_sig, minlength=m)
        grad_mat = {n: (float(ge[i]), float(gs[i])) for i, n in enumerate(table.material_names)}
    return grad_ant, grad_mat


def _full_materials(params: TrainableSceneParams, names, frequency_hz):
    props = params.material_props()
    return {n: props.get(n) or itu_material(n, frequency_hz) for n in names}


def trace(geometry: SceneGeometry, antenna, params: TrainableSceneParams, config: SolverConfig,
          table: PathTable | None = None, report: dict | None = None) -> RadioMap:
    start = time.perf_counter()
    if table is None:
        table = trace_paths(geometry, antenna, config)
    mats = _full_materials(params, table.material_names, antenna.frequency_hz)
    out = evaluate(table, antenna, params.antenna_params(), mats, config.no_coverage_fill)
    if report is not None:
        report.update({
            "n_rays": config.n_rays,
            "reflections": config.max_reflections,
            "coverage_fraction": out.coverage_fraction,
            "n_paths": table.n_paths,
            "n_entries": table.n_entries,
            "wall_clock_s": time.perf_counter() - start,
        })
    return out


def trace_with_gradients(geometry: SceneGeometry, antenna, params: TrainableSceneParams, config: SolverConfig,
                         loss_adjoint, table: PathTable | None = None) -> np.ndarray:
    """Gradient of ``sum(loss_adjoint * map)`` w.r.t. ``params.free_vector()``."""
    if table is None:
        table = trace_paths(geometry, antenna, config)
    mats = _full_materials(params, table.material_names, antenna.frequency_hz)
    g_ant, g_mat = derived_gradients(table, antenna, params.antenna_params(), mats, loss_adjoint,
                                     config.no_coverage_fill)
    return params.chain(g_ant, g_mat)
