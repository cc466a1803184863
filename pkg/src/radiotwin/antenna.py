"""Trainable sector antenna pattern and material parameters.

Every trainable scalar ``p`` is produced from an embedding ``w_p`` and a
read-out vector ``u`` shared by its family (antenna or material)::

    z = u . w_p / sqrt(d_e)
    p = p_min + (p_max - p_min) * sigmoid(z)      # antenna parameters
    eps_r = exp(z_eps) + 1,  sigma = exp(z_sigma)  # material parameters

With ``d_e = 1`` and ``u = [1]`` this degenerates to one free scalar per
parameter, which is how the non-vectorized calibration modes are expressed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EMBED_DIM = 5
SLA_V_DB = 30.0
A_M_DB = 30.0

ANTENNA_PARAMS = ("theta0", "hpbw_v", "hpbw_h", "g_max")
# bounds in radians / dBi; beamwidths are specified in degrees
PARAM_BOUNDS = {
    "theta0": (-math.pi, math.pi),
    "hpbw_v": (math.radians(10.0), math.radians(120.0)),
    "hpbw_h": (math.radians(10.0), math.radians(120.0)),
    "g_max": (0.0, 30.0),
}


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def readout(w, u, d_e=None):
    w = np.asarray(w, dtype=float)
    u = np.asarray(u, dtype=float)
    if w.shape != u.shape or w.ndim != 1:
        raise ValueError(f"embedding {w.shape} and read-out {u.shape} must be equal-length vectors")
    d_e = len(w) if d_e is None else d_e
    if d_e != len(w):
        raise ValueError(f"dimension {d_e} does not match vector length {len(w)}")
    return float(u @ w) / math.sqrt(d_e)


@dataclass
class AntennaParams:
    """Derived pattern parameters; beamwidths in radians."""
    theta0: float
    hpbw_v: float
    hpbw_h: float
    g_max: float

    def as_dict(self):
        return {
            "theta0_rad": self.theta0,
            "hpbw_v_deg": math.degrees(self.hpbw_v),
            "hpbw_h_deg": math.degrees(self.hpbw_h),
            "g_max_dbi": self.g_max,
        }


@dataclass
class TrainablePattern:
    embeddings: dict           # name -> (d_e,) array, one per ANTENNA_PARAMS entry
    u: np.ndarray              # shared read-out

    @classmethod
    def zeros(cls, d_e=EMBED_DIM, rng=None):
        u = np.ones(d_e) if rng is None else rng.normal(size=d_e)
        return cls({name: np.zeros(d_e) for name in ANTENNA_PARAMS}, u)

    @property
    def d_e(self):
        return len(self.u)

    def logits(self):
        return {name: readout(self.embeddings[name], self.u) for name in ANTENNA_PARAMS}


@dataclass
class TrainableMaterial:
    w_eps: np.ndarray
    w_sigma: np.ndarray


@dataclass
class MaterialProps:
    eps_r: float
    sigma: float


def derive_antenna_params(pattern: TrainablePattern) -> AntennaParams:
    vals = {}
    for name, z in pattern.logits().items():
        lo, hi = PARAM_BOUNDS[name]
        vals[name] = lo + (hi - lo) * float(sigmoid(z))
    return AntennaParams(**vals)


def antenna_param_jacobians(pattern: TrainablePattern):
    """d p / d w_p (vector) and d p / d u (vector) for each antenna parameter."""
    out = {}
    s = math.sqrt(pattern.d_e)
    for name, z in pattern.logits().items():
        lo, hi = PARAM_BOUNDS[name]
        g = float(sigmoid(z))
        dp_dz = (hi - lo) * g * (1.0 - g)
        out[name] = (dp_dz * pattern.u / s, dp_dz * pattern.embeddings[name] / s)
    return out


def derive_material_params(material: TrainableMaterial, u) -> MaterialProps:
    return MaterialProps(
        eps_r=math.exp(readout(material.w_eps, u)) + 1.0,
        sigma=math.exp(readout(material.w_sigma, u)),
    )


def material_param_jacobians(material: TrainableMaterial, u):
    """((d eps/d w_eps, d eps/d u), (d sigma/d w_sigma, d sigma/d u))."""
    u = np.asarray(u, dtype=float)
    s = math.sqrt(len(u))
    e = math.exp(readout(material.w_eps, u))
    g = math.exp(readout(material.w_sigma, u))
    return (e * u / s, e * material.w_eps / s), (g * u / s, g * material.w_sigma / s)


def embedding_for_logit(z, u):
    """Embedding ``w`` with ``readout(w, u) == z`` (minimum-norm solution)."""
    u = np.asarray(u, dtype=float)
    return z * math.sqrt(len(u)) * u / float(u @ u)


# -- pattern --------------------------------------------------------------

def _pattern_terms(params: AntennaParams, theta, phi):
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    tv = (theta - (math.pi / 2 - params.theta0)) / params.hpbw_v
    th = phi / params.hpbw_h
    qv = 12.0 * tv ** 2
    qh = 12.0 * th ** 2
    v_active = qv <= SLA_V_DB  # ties take the quadratic branch
    h_active = qh <= A_M_DB
    a_v = -np.where(v_active, qv, SLA_V_DB)
    a_h = -np.where(h_active, qh, A_M_DB)
    s = -(a_v + a_h)
    sum_active = s <= A_M_DB
    a_tot = -np.where(sum_active, s, A_M_DB) + params.g_max
    return a_tot, tv, th, v_active, h_active, sum_active


def pattern_gain(params: AntennaParams, theta, phi):
    """Element gain in dB; ``theta`` is the zenith angle and ``phi`` the azimuth (rad)."""
    return _pattern_terms(params, theta, phi)[0]


def pattern_gain_linear(params: AntennaParams, theta, phi):
    return 10.0 ** (pattern_gain(params, theta, phi) / 10.0)


def pattern_gain_partials(params: AntennaParams, theta, phi):
    """d A_tot / d (theta0, hpbw_v, hpbw_h, g_max) as arrays shaped like ``theta``.

    At min() kinks the active-branch derivative is used, quadratic branch on ties.
    """
    a_tot, tv, th, v_active, h_active, sum_active = _pattern_terms(params, theta, phi)
    # A_v = -12 tv^2 with tv = (theta - pi/2 + theta0) / hpbw_v
    dav_dtheta0 = np.where(v_active, -24.0 * tv / params.hpbw_v, 0.0)
    dav_dhv = np.where(v_active, 24.0 * tv ** 2 / params.hpbw_v, 0.0)
    dah_dhh = np.where(h_active, 24.0 * th ** 2 / params.hpbw_h, 0.0)
    on = sum_active.astype(float)
    return {
        "theta0": on * dav_dtheta0,
        "hpbw_v": on * dav_dhv,
        "hpbw_h": on * dah_dhh,
        "g_max": np.ones_like(a_tot),
    }


def pattern_gain_gradients(pattern: TrainablePattern, theta, phi):
    """Gradients of A_tot w.r.t. each embedding vector and the read-out.

    Returns ``{name: (..., d_e)}`` for the four embeddings plus ``"u"``.
    """
    params = derive_antenna_params(pattern)
    partials = pattern_gain_partials(params, theta, phi)
    jac = antenna_param_jacobians(pattern)
    grads = {}
    du = 0.0
    for name in ANTENNA_PARAMS:
        dw, dup = jac[name]
        grads[name] = partials[name][..., None] * dw
        du = du + partials[name][..., None] * dup
    grads["u"] = du
    return grads
