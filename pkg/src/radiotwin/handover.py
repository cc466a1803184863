"""Online user-to-antenna association with a switching penalty.

Per slot the controller picks one antenna per user to maximise
``sum x_ij log(c_ij / y_j) - gamma * ||x_t - x_{t-1}||_A`` where ``c`` is the
Shannon rate and ``y`` the antenna load.  A bank of exponentiated-gradient
experts with different step sizes proposes assignments; a Hedge meta-learner
follows the expert with the largest weight.  Users move with a Gauss-Markov
process and read their SINR from per-antenna RSRP maps.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .poweropt import nearest_valid_lookup

DIRECTION_SIGMA = math.pi / 4
MIN_RATE_BPS = 1.0
DEFAULT_ETAS = (math.inf, 10.0, 1.0, 0.1, 0.01)
DEFAULT_PROFILE_MIX = (0.1, 0.1, 0.3, 0.5)
DEVICE_TYPES = ("smartphone", "tablet", "wearable", "iot", "feature_phone")
DEVICE_MIX = (0.935, 0.03, 0.011, 0.005, 0.019)
DEVICE_SWITCH_WEIGHT = (1.0, 1.2, 1.5, 2.0, 1.8)


@dataclass(frozen=True)
class MobilityProfile:
    name: str
    speed_range: tuple
    memory: float

    @property
    def mean_speed(self):
        return 0.5 * (self.speed_range[0] + self.speed_range[1])

    @property
    def speed_sigma(self):
        return (self.speed_range[1] - self.speed_range[0]) / 4.0


PROFILES = {
    "static": MobilityProfile("static", (0.0, 0.2), 0.99),
    "pedestrian": MobilityProfile("pedestrian", (0.8, 1.6), 0.8),
    "cyclist": MobilityProfile("cyclist", (4.0, 7.0), 0.88),
    "vehicle": MobilityProfile("vehicle", (10.0, 25.0), 0.96),
}
PROFILE_ORDER = ("static", "pedestrian", "cyclist", "vehicle")


# -- mobility ------------------------------------------------------------

@dataclass
class MobilityState:
    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    direction: np.ndarray
    mean_direction: np.ndarray


def _reflect(pos, lo, hi):
    """Fold positions back into [lo, hi]; returns (pos, flipped mask)."""
    span = hi - lo
    rel = np.mod(pos - lo, 2 * span)
    flipped = (pos < lo) | (pos > hi)
    return lo + np.where(rel > span, 2 * span - rel, rel), flipped


def gauss_markov_step(state: MobilityState, memory, mean_speed, speed_sigma, rng, bounds, dt=1.0):
    """One Gauss-Markov update of speed and heading, then move and reflect at the bounds.

    ``bounds`` = (xmin, xmax, ymin, ymax).  Parameters broadcast per user.
    """
    a = np.asarray(memory, dtype=float)
    k = np.sqrt(1.0 - a * a)
    w = rng.standard_normal((2, state.x.size))
    speed = a * state.speed + (1 - a) * mean_speed + k * speed_sigma * w[0]
    direction = a * state.direction + (1 - a) * state.mean_direction + k * DIRECTION_SIGMA * w[1]
    x = state.x + speed * np.cos(direction) * dt
    y = state.y + speed * np.sin(direction) * dt
    xmin, xmax, ymin, ymax = bounds
    x, fx = _reflect(x, xmin, xmax)
    y, fy = _reflect(y, ymin, ymax)
    mean_dir = state.mean_direction.copy()
    # mirror the heading (and its mean) off the wall that was hit
    direction = np.where(fx, math.pi - direction, direction)
    mean_dir = np.where(fx, math.pi - mean_dir, mean_dir)
    direction = np.where(fy, -direction, direction)
    mean_dir = np.where(fy, -mean_dir, mean_dir)
    return MobilityState(x, y, speed, direction, mean_dir)


# -- objective -----------------------------------------------------------

def rates(sinr, bandwidths):
    """c_ij = B_j log2(1 + SINR_ij), floored at 1 bit/s."""
    return np.maximum(np.asarray(bandwidths)[None, :] * np.log2(1.0 + sinr), MIN_RATE_BPS)


def check_assignment(x):
    x = np.asarray(x)
    if x.ndim != 2 or not np.all((x == 0) | (x == 1)) or not np.all(x.sum(axis=1) == 1):
        raise ValueError("assignment must give each user exactly one antenna")


def one_hot(choice, n_antennas):
    x = np.zeros((choice.size, n_antennas))
    x[np.arange(choice.size), choice] = 1.0
    return x


def switching_cost(x, x_prev, A):
    """sum A_ij |x_ij - x'_ij| / 2, i.e. each handover counted once."""
    if x_prev is None:
        return 0.0
    return float(np.sum(A * np.abs(np.asarray(x) - np.asarray(x_prev)))) / 2.0


def slot_objective(x, x_prev, sinr, bandwidths, gamma, A) -> float:
    check_assignment(x)
    c = rates(np.asarray(sinr, dtype=float), bandwidths)
    y = x.sum(axis=0)
    throughput = float(np.sum(x * np.log(c / np.maximum(y, 1.0)[None, :])))
    return throughput - gamma * switching_cost(x, x_prev, A)


def _objective_for_choice(choice, prev, log_c, gamma, A_user):
    """slot_objective for integer choices; A is uniform across antennas per user."""
    n, J = log_c.shape
    load = np.bincount(choice, minlength=J)
    value = float(np.sum(log_c[np.arange(n), choice] - np.log(load[choice])))
    if prev is not None:
        value -= gamma * float(np.sum(A_user[choice != prev]))
    return value


def sinr_from_rsrp(rsrp_dbm, noise_dbm):
    """Per-user SINR against every antenna; all other antennas interfere."""
    p = 10.0 ** (np.asarray(rsrp_dbm) / 10.0)
    total = p.sum(axis=1, keepdims=True)
    return p / (10.0 ** (noise_dbm / 10.0) + total - p)


# -- learners ------------------------------------------------------------

@dataclass
class Expert:
    eta: float
    log_prob: np.ndarray  # (I, J)

    def decision(self):
        return np.argmax(self.log_prob, axis=1)


def expert_step(expert: Expert, utilities, eta=None) -> Expert:
    """Exponentiated-gradient update of each user's antenna distribution."""
    eta = expert.eta if eta is None else eta
    if not np.all(np.isfinite(utilities)):
        raise ValueError("utilities must be finite")
    if math.isinf(eta):
        best = np.argmax(utilities, axis=1)
        lp = np.full(utilities.shape, -np.inf)
        lp[np.arange(best.size), best] = 0.0
        return Expert(expert.eta, lp)
    lp = expert.log_prob + eta * utilities
    lp = lp - lp.max(axis=1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
    return Expert(expert.eta, lp)


def expert_probabilities(expert: Expert):
    return np.exp(expert.log_prob)


def user_utilities(log_c, prev_choice, gamma, A_user):
    """Per-antenna utility of each user given the other users' previous loads."""
    n, J = log_c.shape
    load = np.bincount(prev_choice, minlength=J).astype(float)
    others = load[None, :] - one_hot(prev_choice, J)
    u = log_c - np.log(others + 1.0)
    switch = np.ones((n, J))
    switch[np.arange(n), prev_choice] = 0.0
    return u - gamma * A_user[:, None] * switch


@dataclass
class MetaLearner:
    weights: np.ndarray
    epsilon: float = 0.1

    def choose(self):
        return int(np.argmax(self.weights))


def meta_step(meta: MetaLearner, rewards) -> MetaLearner:
    """Hedge update with rewards rescaled to [0, 1] within the slot."""
    r = np.asarray(rewards, dtype=float)
    span = r.max() - r.min()
    rn = (r - r.min()) / span if span > 0 else np.zeros_like(r)
    logw = np.log(meta.weights) + meta.epsilon * rn
    w = np.exp(logw - logw.max())
    return MetaLearner(w / w.sum(), meta.epsilon)


# -- simulation ----------------------------------------------------------

@dataclass
class HandoverInstance:
    rsrp_maps: np.ndarray          # (J, H, W) dBm on a common grid
    valid: np.ndarray              # (J, H, W)
    resolution: float              # m per cell of the common grid
    bandwidths: np.ndarray         # (J,) Hz
    n_users: int = 100
    gamma: float = 1.0
    horizon: int = 5000
    profile_mix: tuple = DEFAULT_PROFILE_MIX
    device_mix: tuple = DEVICE_MIX
    device_weights: tuple = DEVICE_SWITCH_WEIGHT
    etas: tuple = DEFAULT_ETAS
    epsilon: float = 0.1
    noise_dbm: float = -125.0
    profile_override: str | None = None

    def __post_init__(self):
        self.rsrp_maps = np.asarray(self.rsrp_maps, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.bandwidths = np.broadcast_to(np.asarray(self.bandwidths, dtype=float), (self.rsrp_maps.shape[0],))
        if abs(sum(self.profile_mix) - 1.0) > 1e-9 or abs(sum(self.device_mix) - 1.0) > 1e-9:
            raise ValueError("profile and device probabilities must each sum to 1")
        if self.gamma < 0 or min(self.device_weights) < 0:
            raise ValueError("gamma and switching weights must be non-negative")
        if self.n_users < 1 or self.horizon < 1 or not self.etas:
            raise ValueError("need at least one user, one slot and one expert")

    @property
    def n_antennas(self):
        return self.rsrp_maps.shape[0]

    @property
    def bounds(self):
        H, W = self.rsrp_maps.shape[1:]
        return (0.0, W * self.resolution - 1e-9, 0.0, H * self.resolution - 1e-9)


@dataclass
class HandoverTrace:
    throughput: np.ndarray
    handovers: np.ndarray
    chosen_expert: np.ndarray
    objective: np.ndarray
    expert_rewards: np.ndarray  # (T, K)
    assignments_valid: bool
    loads_consistent: bool
    etas: tuple
    mean_speed: np.ndarray = field(default=None)

    def summary(self, window=100):
        w = min(window, self.throughput.size)
        regret = float(self.expert_rewards.sum(axis=0).max() - self.objective.sum())
        return {
            "slots": int(self.throughput.size),
            "last_window": w,
            "mean_throughput_last": float(self.throughput[-w:].mean()),
            "mean_handovers_last": float(self.handovers[-w:].mean()),
            "total_handovers": int(self.handovers.sum()),
            "cumulative_objective": float(self.objective.sum()),
            "best_expert_objective": float(self.expert_rewards.sum(axis=0).max()),
            "regret": regret,
            "assignments_valid": self.assignments_valid,
            "loads_consistent": self.loads_consistent,
        }


def shared_channel_maps(antennas, transform, patterns=None, radio_maps=None):
    """RSRP maps of several antennas on one grid (the frame of ``transform``).

    Antennas without a traced map use the channel layer; ``radio_maps`` may
    supply traced maps, which are resampled by nearest cell.
    """
    from .features import compute_channel_layer, compute_geometry

    maps, valid = [], []
    for j, ant in enumerate(antennas):
        rm = None if radio_maps is None else radio_maps[j]
        if rm is not None:
            x, y = transform.cell_centres()
            lat, lon = transform.to_geographic(x, y)
            row, col = rm.transform.local_to_cell(*rm.transform.to_local(lat, lon))
            inside = row >= 0
            vals = np.where(inside, rm.values[np.maximum(row, 0), np.maximum(col, 0)], -140.0)
            ok = inside & rm.valid[np.maximum(row, 0), np.maximum(col, 0)]
            maps.append(vals)
            valid.append(ok)
            continue
        off = transform.to_local(ant.latitude, ant.longitude)
        D, Phi, Theta = compute_geometry(transform, ant, offset=(float(off[0]), float(off[1])))
        pat = None if patterns is None else patterns[j]
        maps.append(compute_channel_layer(D, Phi, Theta, pat, ant.frequency_hz, ant.tx_power_dbm,
                                          ant.hardware_loss_db))
        valid.append(np.ones(D.shape, dtype=bool))
    return np.array(maps), np.array(valid)


def _cell_lookup(inst: HandoverInstance):
    return [nearest_valid_lookup(v) for v in inst.valid]


def simulate(inst: HandoverInstance, seed=0, keep_assignments=False):
    """Run the expert/meta controller for ``inst.horizon`` slots."""
    ss = np.random.SeedSequence(seed)
    init_rng, move_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    I, J = inst.n_users, inst.n_antennas
    H, W = inst.rsrp_maps.shape[1:]
    xmin, xmax, ymin, ymax = inst.bounds

    if inst.profile_override:
        prof_idx = np.full(I, PROFILE_ORDER.index(inst.profile_override))
    else:
        prof_idx = init_rng.choice(len(PROFILE_ORDER), size=I, p=inst.profile_mix)
    profiles = [PROFILES[PROFILE_ORDER[k]] for k in prof_idx]
    memory = np.array([p.memory for p in profiles])
    mean_speed = np.array([p.mean_speed for p in profiles])
    speed_sigma = np.array([p.speed_sigma for p in profiles])
    device = init_rng.choice(len(inst.device_mix), size=I, p=inst.device_mix)
    A_user = np.asarray(inst.device_weights, dtype=float)[device]
    heading = init_rng.uniform(-math.pi, math.pi, I)
    state = MobilityState(
        x=init_rng.uniform(xmin, xmax, I), y=init_rng.uniform(ymin, ymax, I),
        speed=mean_speed.copy(), direction=heading.copy(), mean_direction=heading,
    )
    lookups = _cell_lookup(inst)

    def observe(st):
        col = np.clip((st.x / inst.resolution).astype(np.int64), 0, W - 1)
        row = np.clip(H - 1 - (st.y / inst.resolution).astype(np.int64), 0, H - 1)
        rsrp = np.stack([inst.rsrp_maps[j][lk[0][row, col], lk[1][row, col]] for j, lk in enumerate(lookups)], axis=1)
        return np.log(rates(sinr_from_rsrp(rsrp, inst.noise_dbm), inst.bandwidths))

    log_c = observe(state)
    prev = np.argmax(log_c, axis=1)
    start = np.full((I, J), math.log(0.5 / J))
    start[np.arange(I), prev] = math.log(0.5 + 0.5 / J)
    experts = [Expert(eta, start.copy()) for eta in inst.etas]
    meta = MetaLearner(np.full(len(experts), 1.0 / len(experts)), inst.epsilon)

    T, K = inst.horizon, len(experts)
    throughput = np.empty(T)
    handovers = np.zeros(T, dtype=np.int64)
    chosen = np.empty(T, dtype=np.int64)
    objective = np.empty(T)
    rewards = np.empty((T, K))
    valid = loads_ok = True
    history = [] if keep_assignments else None

    for t in range(T):
        if t > 0:
            state = gauss_markov_step(state, memory, mean_speed, speed_sigma, move_rng, inst.bounds)
            log_c = observe(state)
        util = user_utilities(log_c, prev, inst.gamma, A_user)
        experts = [expert_step(e, util) for e in experts]
        decisions = [e.decision() for e in experts]
        rewards[t] = [_objective_for_choice(d, prev, log_c, inst.gamma, A_user) for d in decisions]
        k = meta.choose()
        choice = decisions[k]
        chosen[t] = k
        objective[t] = rewards[t, k]
        load = np.bincount(choice, minlength=J)
        valid &= choice.shape == (I,) and choice.min() >= 0 and choice.max() < J
        loads_ok &= int(load.sum()) == I
        throughput[t] = float(np.sum(np.exp(log_c[np.arange(I), choice]) / load[choice]))
        handovers[t] = int(np.count_nonzero(choice != prev)) if t > 0 else 0
        meta = meta_step(meta, rewards[t])
        if history is not None:
            history.append(choice.copy())
        prev = choice

    trace = HandoverTrace(throughput, handovers, chosen, objective, rewards, bool(valid), bool(loads_ok),
                          tuple(inst.etas))
    if history is not None:
        trace.assignments = np.array(history)
    return trace


def write_trace_csv(path, trace: HandoverTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "total_throughput", "handovers", "chosen_expert"])
        for t in range(trace.throughput.size):
            eta = trace.etas[trace.chosen_expert[t]]
            w.writerow([t, f"{trace.throughput[t]:.6f}", int(trace.handovers[t]), "inf" if math.isinf(eta) else repr(eta)])


def write_summary(path, trace: HandoverTrace, extra=None) -> None:
    data = trace.summary()
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True))
