"""Downlink transmit-power minimisation under per-user throughput demands.

The bilinear problem (powers P_j, resource shares x_ij) becomes convex after
replacing log2(1 + SINR) by the minimum of monomial tangents a * s**b and
changing variables to q_j = log P_j, u_i = log x_i.  Every user is served by a
fixed antenna (its ``serving`` index), so there is one share variable per user.

The convex program is solved with a log-barrier method whose centering steps
are damped Newton iterations; a phase-1 problem either finds a strictly
feasible start or certifies infeasibility.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, sparse
from scipy.ndimage import distance_transform_edt
from scipy.special import logsumexp, softmax

DEFAULT_PIECES = 6
DEFAULT_SINR_RANGE = (1e-2, 1e3)
LOG_FLOOR = 100.0  # box: q_j >= log(cap_j) - LOG_FLOOR, u_i >= -LOG_FLOOR


class InfeasibleError(RuntimeError):
    pass


# -- channel -------------------------------------------------------------

def sinr(P, g, noise, i, j) -> float:
    """SINR of user i served by antenna j; every other antenna interferes."""
    P = np.asarray(P, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any(P < 0):
        raise ValueError("powers must be non-negative")
    interference = float(np.dot(P, g[i]) - P[j] * g[i, j])
    return float(P[j] * g[i, j] / (noise + interference))


def sinr_matrix(P, g, noise) -> np.ndarray:
    """SINR for every (user, antenna) pair."""
    received = np.asarray(g) * np.asarray(P)[None, :]
    total = received.sum(axis=1, keepdims=True)
    return received / (noise + total - received)


def nearest_valid_lookup(valid: np.ndarray):
    """Per-cell (row, col) of the nearest valid cell (itself when valid)."""
    if not np.any(valid):
        raise ValueError("radio map has no valid cells")
    _, (rows, cols) = distance_transform_edt(~valid, return_indices=True)
    return rows, cols


def gains_from_map(radio_map, tx_power_ref_dbm, lat, lon, lookup=None) -> np.ndarray:
    """Linear channel gain 10**((RSRP - P_ref)/10) at each user position.

    Users on cells without coverage take the value of the nearest valid cell.
    """
    tf = radio_map.transform
    row, col = tf.local_to_cell(*tf.to_local(lat, lon))
    row, col = np.atleast_1d(row), np.atleast_1d(col)
    if np.any(row < 0):
        raise ValueError("user position outside the radio-map grid")
    nr, nc = lookup if lookup is not None else nearest_valid_lookup(radio_map.valid)
    rsrp = radio_map.values[nr[row, col], nc[row, col]]
    return 10.0 ** ((rsrp - tx_power_ref_dbm) / 10.0)


# -- capacity approximation ----------------------------------------------

def _h(z):
    return np.log(np.log2(1.0 + np.exp(z)))


def _dh(z):
    return np.exp(z) / ((1.0 + np.exp(z)) * np.log1p(np.exp(z)))


def fit_capacity_pieces(m=DEFAULT_PIECES, sinr_range=DEFAULT_SINR_RANGE):
    """Monomials a*s**b tangent to log2(1+s) in log-log space at m log-spaced SINRs.

    Returns arrays (a, b).  With m = 1 the tangent point is the geometric
    midpoint of the range.
    """
    lo, hi = sinr_range
    if m < 1 or not 0 < lo < hi:
        raise ValueError("need m >= 1 and 0 < s_lo < s_hi")
    if m == 1:
        z = np.array([0.5 * (math.log(lo) + math.log(hi))])
    else:
        z = np.linspace(math.log(lo), math.log(hi), m)
    b = _dh(z)
    a = np.exp(_h(z) - b * z)
    return a, b


def capacity_bound(s, a, b):
    """min over pieces of a * s**b (the concave over-estimate of log2(1+s))."""
    s = np.asarray(s, dtype=float)[..., None]
    return np.min(a * s ** b, axis=-1)


# -- problem data --------------------------------------------------------

@dataclass
class PowerInstance:
    gains: np.ndarray       # (n, N) linear
    demands: np.ndarray     # (n,) bit/s
    bandwidths: np.ndarray  # (N,) Hz
    noise: float            # W
    power_cap: np.ndarray   # (N,) W
    a: np.ndarray
    b: np.ndarray
    serving: np.ndarray = None  # (n,) antenna index; default strongest gain

    def __post_init__(self):
        self.gains = np.atleast_2d(np.asarray(self.gains, dtype=float))
        n, N = self.gains.shape
        self.demands = np.asarray(self.demands, dtype=float).reshape(n)
        self.bandwidths = np.broadcast_to(np.asarray(self.bandwidths, dtype=float), (N,)).copy()
        self.power_cap = np.broadcast_to(np.asarray(self.power_cap, dtype=float), (N,)).copy()
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if self.serving is None:
            self.serving = np.argmax(self.gains, axis=1)
        self.serving = np.asarray(self.serving, dtype=np.int64).reshape(n)
        if not np.all(self.gains > 0):
            raise ValueError("gains must be positive")
        if not np.all(self.demands > 0):
            raise ValueError("demands must be positive")
        if not (np.all(self.bandwidths > 0) and np.all(self.power_cap > 0) and self.noise > 0):
            raise ValueError("bandwidths, power caps and noise must be positive")
        if not (np.all(self.a > 0) and np.all((self.b > 0) & (self.b <= 1))):
            raise ValueError("pieces need a > 0 and b in (0, 1]")
        if self.serving.min() < 0 or self.serving.max() >= N:
            raise ValueError("serving antenna index out of range")

    @property
    def n_users(self):
        return self.gains.shape[0]

    @property
    def n_antennas(self):
        return self.gains.shape[1]

    def subset(self, n):
        """The first n users (keeps the serving assignment)."""
        return PowerInstance(self.gains[:n], self.demands[:n], self.bandwidths, self.noise,
                             self.power_cap, self.a, self.b, self.serving[:n])

    def required_shares(self, P):
        """Smallest x_i meeting each demand at powers P under the piecewise capacity."""
        s = sinr_matrix(P, self.gains, self.noise)[np.arange(self.n_users), self.serving]
        rate = self.bandwidths[self.serving] * capacity_bound(s, self.a, self.b)
        with np.errstate(divide="ignore"):
            return self.demands / rate

    def to_json(self):
        return {
            "gains": self.gains.tolist(), "demands": self.demands.tolist(),
            "bandwidths": self.bandwidths.tolist(), "noise": self.noise,
            "power_cap": self.power_cap.tolist(), "a": self.a.tolist(), "b": self.b.tolist(),
            "serving": self.serving.tolist(),
        }

    @classmethod
    def from_json(cls, d):
        return cls(**{k: (np.asarray(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class PowerSolution:
    powers: np.ndarray
    allocations: np.ndarray
    objective: float
    status: str  # optimal | infeasible | max-iterations
    kkt_residual: float = math.nan
    newton_steps: int = 0

    def to_json(self):
        return {
            "powers": self.powers.tolist(), "allocations": self.allocations.tolist(),
            "objective": self.objective, "status": self.status,
            "kkt_residual": self.kkt_residual, "newton_steps": self.newton_steps,
        }


# -- barrier machinery ---------------------------------------------------

class _Program:
    """Convex constraints c_k(z) <= 0 on z = [q (N), u (n), v (n)].

    v_i bounds log(1/SINR_i) from above, which turns the m throughput pieces
    into linear constraints v_i - u_i/b_l <= log(B a_l / t_i)/b_l and leaves a
    single log-sum-exp constraint per user.
    """

    def __init__(self, inst: PowerInstance):
        n, N = inst.n_users, inst.n_antennas
        m = inst.a.size
        self.n, self.N, self.m = n, N, m
        self.dim = N + 2 * n
        self.log_cap = np.log(inst.power_cap)
        g = inst.gains
        srv = inst.serving
        gs = g[np.arange(n), srv]

        # log(1/SINR_i) = LSE_t(coef[i, t] . q + const[i, t]); slot t = serving carries the noise
        coef = np.zeros((n, N, N))
        coef[:, np.arange(N), np.arange(N)] = 1.0
        coef[np.arange(n), srv, srv] = 0.0
        coef[np.arange(n), :, srv] -= 1.0
        const = np.log(g / gs[:, None])
        const[np.arange(n), srv] = np.log(inst.noise / gs)
        self.coef, self.const = coef, const

        self.groups = [grp for grp in (np.flatnonzero(srv == j) for j in range(N)) if grp.size]

        qi, ui, vi = np.arange(N), N + np.arange(n), N + n + np.arange(n)
        rows, cols, data, off = [], [], [], []
        r = 0
        rhs = np.log(inst.bandwidths[srv][:, None] * inst.a[None, :] / inst.demands[:, None]) / inst.b[None, :]
        for ell in range(m):
            rows += [r + np.arange(n)] * 2
            cols += [vi, ui]
            data += [np.ones(n), np.full(n, -1.0 / inst.b[ell])]
            off.append(-rhs[:, ell])
            r += n
        for var, sign, o in ((qi, 1.0, -self.log_cap), (ui, 1.0, np.zeros(n)),
                             (qi, -1.0, self.log_cap - LOG_FLOOR), (ui, -1.0, np.full(n, -LOG_FLOOR))):
            rows.append(r + np.arange(var.size))
            cols.append(var)
            data.append(np.full(var.size, sign))
            off.append(o)
            r += var.size
        self.A = sparse.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                                   shape=(r, self.dim))
        self.A_off = np.concatenate(off)
        self.n_cons = n + len(self.groups) + r

    def _lse(self, z):
        N, n = self.N, self.n
        e = np.matmul(self.coef, z[:N]) + self.const
        emax = e.max(axis=1, keepdims=True)
        ex = np.exp(e - emax)
        tot = ex.sum(axis=1, keepdims=True)
        return (emax + np.log(tot))[:, 0], ex / tot

    def _group(self, z):
        vals, probs = [], []
        for grp in self.groups:
            uz = z[self.N + grp]
            um = uz.max()
            eu = np.exp(uz - um)
            vals.append(um + math.log(eu.sum()))
            probs.append(eu / eu.sum())
        return np.array(vals), probs

    def values(self, z):
        lse, _ = self._lse(z)
        gv, _ = self._group(z)
        return np.concatenate([lse - z[self.N + self.n:], gv, self.A @ z + self.A_off])

    def evaluate(self, z):
        """Constraint values, sparse Jacobian, and a closure for sum_k w_k * Hess c_k."""
        N, n = self.N, self.n
        lse, p = self._lse(z)
        gv, gp = self._group(z)
        vals = np.concatenate([lse - z[N + n:], gv, self.A @ z + self.A_off])
        grad_q = np.einsum("it,itk->ik", p, self.coef)  # (n, N)
        rows = [np.repeat(np.arange(n), N), np.arange(n)]
        cols = [np.tile(np.arange(N), n), N + n + np.arange(n)]
        data = [grad_q.ravel(), -np.ones(n)]
        for r, (grp, pg) in enumerate(zip(self.groups, gp)):
            rows.append(np.full(grp.size, n + r))
            cols.append(N + grp)
            data.append(pg)
        top = sparse.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                                shape=(n + len(self.groups), self.dim))
        J = sparse.vstack([top, self.A]).tocsr()

        def weighted_hessian(w):
            H = np.zeros((self.dim, self.dim))
            wi = w[:n]
            pc = self.coef * (p * wi[:, None])[:, :, None]
            H[:N, :N] = np.einsum("itk,itl->kl", pc, self.coef) - np.einsum("i,ik,il->kl", wi, grad_q, grad_q)
            for r, (grp, pg) in enumerate(zip(self.groups, gp)):
                idx = N + grp
                H[np.ix_(idx, idx)] += w[n + r] * (np.diag(pg) - np.outer(pg, pg))
            return H

        return vals, J, weighted_hessian

    def start(self):
        z = np.empty(self.dim)
        z[:self.N] = self.log_cap - 1.0
        u = np.full(self.n, -1.0)
        for grp in self.groups:
            u[grp] = -math.log(grp.size) - 1.0
        z[self.N:self.N + self.n] = u
        lse, _ = self._lse(z)
        z[self.N + self.n:] = lse + 1.0
        return z


def _objective(z, N):
    q = z[:N]
    p = softmax(q)
    g = np.zeros_like(z)
    g[:N] = p
    H = np.zeros((z.size, z.size))
    H[:N, :N] = np.diag(p) - np.outer(p, p)
    return float(logsumexp(q)), g, H


def _solve(H, g):
    """-H^{-1} g with symmetric diagonal equilibration."""
    d = 1.0 / np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H * d[:, None] * d[None, :]
    gs = g * d
    try:
        step = linalg.cho_solve(linalg.cho_factor(Hs, check_finite=False), gs, check_finite=False)
    except linalg.LinAlgError:
        step = np.linalg.lstsq(Hs + 1e-12 * np.eye(H.shape[0]), gs, rcond=None)[0]
    return -step * d


class _Phase1:
    """min s  s.t.  c(z) <= s, on x = [z, s]."""

    def __init__(self, prog):
        self.prog = prog

    def objective(self, x):
        g = np.zeros_like(x)
        g[-1] = 1.0
        return float(x[-1]), g, np.zeros((x.size, x.size))

    def values(self, x):
        return self.prog.values(x[:-1]) - x[-1]

    def evaluate(self, x):
        vals, J, hess = self.prog.evaluate(x[:-1])
        J = sparse.hstack([J, -np.ones((J.shape[0], 1))]).tocsr()

        def padded(w):
            H = np.zeros((x.size, x.size))
            H[:-1, :-1] = hess(w)
            return H

        return vals - x[-1], J, padded


class _Phase2:
    """min log(sum_j exp(q_j))  s.t.  c(z) <= 0."""

    def __init__(self, prog):
        self.prog = prog
        self.values = prog.values
        self.evaluate = prog.evaluate

    def objective(self, x):
        return _objective(x, self.prog.N)


def _primal_dual(problem, x, mu=10.0, tol=1e-9, max_iter=1000, stop=None):
    """Primal-dual interior-point iterations from a strictly feasible x.

    Returns (x, multipliers, dual residual, surrogate gap, iterations, converged).
    ``stop(x)`` may end the run early (used by phase 1 once s < 0).
    """
    vals, J, hess = problem.evaluate(x)
    lam = 1.0 / -vals
    m = vals.size
    r_dual = gap = math.inf
    for it in range(1, max_iter + 1):
        if stop is not None and stop(x):
            return x, lam, r_dual, gap, it - 1, True
        gap = float(-vals @ lam)
        t = mu * m / gap
        _, fg, fH = problem.objective(x)
        rd = fg + J.T @ lam
        r_dual = float(np.max(np.abs(rd)))
        if r_dual <= tol and gap <= tol:
            return x, lam, r_dual, gap, it - 1, True
        ratio = lam / -vals
        Jw = J.multiply(np.sqrt(ratio)[:, None]).tocsr()
        H = fH + hess(lam) + (Jw.T @ Jw).toarray()
        rhs = fg + J.T @ (1.0 / (t * -vals))
        dx = _solve(H, rhs)
        dlam = -(lam / vals) * (J @ dx) - lam - 1.0 / (t * vals)
        neg = dlam < 0
        step = min(1.0, float(np.min(-lam[neg] / dlam[neg]))) if neg.any() else 1.0
        step *= 0.99
        while step > 1e-14 and np.any(problem.values(x + step * dx) >= 0):
            step *= 0.5

        def residual_norm(xv, lv, vv, Jv):
            _, g, _ = problem.objective(xv)
            return math.sqrt(float(np.sum((g + Jv.T @ lv) ** 2)) + float(np.sum((-lv * vv - 1.0 / t) ** 2)))

        r0 = residual_norm(x, lam, vals, J)
        while step > 1e-14:
            xn, ln = x + step * dx, lam + step * dlam
            vn, Jn, hn = problem.evaluate(xn)
            if residual_norm(xn, ln, vn, Jn) <= (1.0 - 0.01 * step) * r0:
                break
            step *= 0.5
        else:
            return x, lam, r_dual, gap, it, False
        x, lam, vals, J, hess = xn, ln, vn, Jn, hn
    return x, lam, r_dual, gap, max_iter, False


def solve_power(inst: PowerInstance, tol=1e-9, max_iter=1000) -> PowerSolution:
    """Minimise sum_j P_j subject to throughput, share and power-cap constraints."""
    prog = _Program(inst)
    z = prog.start()
    steps = 0
    N = inst.n_antennas
    infeasible = PowerSolution(np.full(N, math.nan), np.zeros(inst.gains.shape), math.nan, "infeasible")
    vals = prog.values(z)
    if np.any(vals >= 0):
        x0 = np.append(z, float(vals.max()) + 1.0)
        x, _, _, gap, k, ok = _primal_dual(_Phase1(prog), x0, tol=tol, max_iter=max_iter,
                                           stop=lambda xv: xv[-1] < 0)
        steps += k
        z = x[:-1]
        if x[-1] >= 0 or np.any(prog.values(z) >= 0):
            # phase 1 converged with a positive optimum: no strictly feasible point
            infeasible.newton_steps = steps
            if not ok:
                infeasible.status = "max-iterations"
            return infeasible

    z, lam, r_dual, gap, k, ok = _primal_dual(_Phase2(prog), z, tol=tol, max_iter=max_iter)
    steps += k
    P = np.exp(z[:N])
    x = np.zeros(inst.gains.shape)
    x[np.arange(inst.n_users), inst.serving] = np.exp(z[N:N + inst.n_users])
    return PowerSolution(P, x, float(P.sum()), "optimal" if ok else "max-iterations",
                         max(r_dual, gap), steps)


def constraint_violation(inst: PowerInstance, sol: PowerSolution) -> float:
    """Largest violation over share, cap and (piecewise) throughput constraints."""
    P, x = sol.powers, sol.allocations
    viol = [float(np.max(P - inst.power_cap)), float(np.max(x - 1.0)), float(np.max(x.sum(axis=0) - 1.0))]
    xs = x[np.arange(inst.n_users), inst.serving]
    need = inst.required_shares(P)
    viol.append(float(np.max((need - xs) / np.maximum(xs, 1e-300))))
    return max(viol)


def closed_form_single(inst: PowerInstance) -> float:
    """Optimal power of a one-user, one-antenna, one-piece instance."""
    g = float(inst.gains[0, 0])
    t = float(inst.demands[0])
    B = float(inst.bandwidths[0])
    a, b = float(inst.a[0]), float(inst.b[0])
    return inst.noise * (t / (B * a)) ** (1.0 / b) / g


def brute_force_power(inst: PowerInstance, points=200, rounds=6, span=12.0):
    """Grid search over powers with the exact minimal shares for each power vector.

    A log-spaced lattice of ``points`` values per antenna is refined ``rounds``
    times around the incumbent.  Returns (best sum power, best P) or (inf, None).
    """
    N = inst.n_antennas
    if N > 3:
        raise ValueError("brute force is limited to 3 antennas")
    hi = np.log(inst.power_cap)
    lo = hi - span * math.log(10.0)
    best_val, best_P = math.inf, None
    centre = None
    width = hi - lo
    for _ in range(rounds):
        if centre is None:
            axes = [np.linspace(lo[j], hi[j], points) for j in range(N)]
        else:
            axes = [np.linspace(max(lo[j], centre[j] - width[j]), min(hi[j], centre[j] + width[j]), points)
                    for j in range(N)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, N)
        P = np.exp(mesh)
        received = P[:, None, :] * inst.gains[None]
        total = received.sum(axis=2)
        s = received[:, np.arange(inst.n_users), inst.serving] / (inst.noise + total - received[:, np.arange(inst.n_users), inst.serving])
        rate = inst.bandwidths[inst.serving][None] * capacity_bound(s, inst.a, inst.b)
        need = inst.demands[None] / rate
        ok = np.all(need <= 1.0, axis=1)
        for j in range(N):
            mask = inst.serving == j
            if mask.any():
                ok &= need[:, mask].sum(axis=1) <= 1.0
        if ok.any():
            cost = np.where(ok, P.sum(axis=1), np.inf)
            k = int(np.argmin(cost))
            if cost[k] < best_val:
                best_val, best_P = float(cost[k]), P[k]
            centre = mesh[k]
        elif centre is None:
            return math.inf, None
        width = np.array([(ax[-1] - ax[0]) / (points - 1) * 4 for ax in axes])
    return best_val, best_P


# -- sweeps --------------------------------------------------------------

@dataclass
class SweepRow:
    users: int
    total_power: float
    status: str
    kkt_residual: float


def random_demands(rng, n, median_bps=2e6, sigma=0.5):
    """Synthetic log-normal throughput demands."""
    return median_bps * np.exp(sigma * rng.standard_normal(n))


def sweep_users(base: PowerInstance, user_counts) -> list:
    """Solve nested instances made of the first n users of ``base`` for each n."""
    rows = []
    for n in user_counts:
        sol = solve_power(base.subset(int(n)))
        rows.append(SweepRow(int(n), sol.objective, sol.status, sol.kkt_residual))
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["users", "total_power_w", "status"])
        for r in rows:
            w.writerow([r.users, f"{r.total_power:.9e}", r.status])


def write_solution(path, inst: PowerInstance, sol: PowerSolution) -> None:
    Path(path).write_text(json.dumps({"instance": inst.to_json(), "solution": sol.to_json()}, indent=1))
