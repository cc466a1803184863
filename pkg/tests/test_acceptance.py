"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal."""
import filecmp
import math
import time

import numpy as np
import pytest

from conftest import make_antenna
from radiotwin.antenna import (
    ANTENNA_PARAMS, MaterialProps, TrainablePattern, _pattern_terms, derive_antenna_params, pattern_gain,
    pattern_gain_gradients,
)
from radiotwin.calibrate import OptimizerConfig, calibrate_map, calibration_loss, split_cells
from radiotwin.cli import SUBCOMMANDS, main
from radiotwin.features import compute_channel_layer, compute_geometry, fspl_db
from radiotwin.handover import PROFILES, HandoverInstance, MobilityState, gauss_markov_step, simulate
from radiotwin.metrics import full_map_metrics, sparse_map_metrics, ssim
from radiotwin.poweropt import (
    PowerInstance, brute_force_power, closed_form_single, fit_capacity_pieces, random_demands, solve_power,
    sweep_users,
)
from radiotwin.scene3d import SceneGeometry, extrude, signed_area, tessellate_footprint, triangle_areas
from radiotwin.solver import (
    SolverConfig, TrainableSceneParams, itu_material, reflection_loss, reflection_loss_grad, trace,
)
from radiotwin.surrogate import SurrogateModel, gradient_check
from radiotwin.synthetic import planted_scene


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _random_footprint(rng):
    n = int(rng.integers(4, 16))
    ang = 2 * math.pi * (np.arange(n) + rng.uniform(0.1, 0.9, n)) / n
    r = rng.uniform(5, 40, n)
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)]) + rng.uniform(-500, 500, 2)


def test_criterion_1_geometry(capsys):
    rng = np.random.default_rng(1)
    polys = [_random_footprint(rng) for _ in range(1000)]
    heights = rng.uniform(3, 120, 1000)
    start = time.perf_counter()
    tess = [tessellate_footprint(p) for p in polys]
    meshes = [extrude(t, h) for t, h in zip(tess, heights)]
    elapsed = time.perf_counter() - start
    watertight = all(m.is_watertight() for m in meshes)
    vol_err = max(abs(m.volume() - abs(signed_area(p)) * h) / (abs(signed_area(p)) * h)
                  for m, p, h in zip(meshes, polys, heights))
    area_err = max(abs(triangle_areas(*t).sum() - abs(signed_area(p))) / abs(signed_area(p))
                   for t, p in zip(tess, polys))
    ok = watertight and vol_err <= 1e-6 and area_err <= 1e-9 and elapsed < 2.0
    verdict(capsys, 1, ok, f"watertight={watertight} max volume rel err {vol_err:.1e} (<=1e-6), "
                           f"max area rel err {area_err:.1e} (<=1e-9), 1000 buildings in {elapsed:.2f} s (<2 s)")


def test_criterion_2_features(capsys):
    ant = make_antenna(azimuth_rad=1.1, tilt_rad=math.radians(6))
    worst, coverage = 0.0, []
    for res in (2.0, 5.0):
        params = TrainableSceneParams.initial("A", [], ant.frequency_hz)
        rm = trace(SceneGeometry(), ant, params, SolverConfig(n_rays=65536, resolution=res))
        D, Phi, Theta = compute_geometry(rm.transform, ant)
        L = compute_channel_layer(D, Phi, Theta, params.antenna_params(), ant.frequency_hz, ant.tx_power_dbm,
                                  ant.hardware_loss_db)
        worst = max(worst, float(np.max(np.abs(rm.values[rm.valid] - L[rm.valid]))))
        coverage.append(rm.coverage_fraction)
    d = np.array([1.0, 37.0, 512.0, 5000.0])
    step = fspl_db(2 * d, 2.3e9) - fspl_db(d, 2.3e9)
    step_err = float(np.max(np.abs(step - 20 * math.log10(2))))
    ok = worst <= 0.5 and step_err < 1e-9 and round(float(step[0]), 4) == 6.0206
    verdict(capsys, 2, ok, f"free-space max |trace - L| {worst:.3f} dB (<=0.5) on hit cells "
                           f"(coverage {min(coverage):.2f}-{max(coverage):.2f}); doubling step {step[0]:.4f} dB")


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def _pattern_errors(rng, n):
    errors = []
    while len(errors) < n:
        theta, phi = rng.uniform(0.3, 2.8), rng.uniform(-2.5, 2.5)
        pat = TrainablePattern({k: rng.normal(scale=0.5, size=5) for k in ANTENNA_PARAMS}, rng.normal(size=5))
        p = derive_antenna_params(pat)
        _, tv, th, _, _, _ = _pattern_terms(p, theta, phi)
        qv, qh = 12 * tv ** 2, 12 * th ** 2
        if min(abs(qv - 30), abs(qh - 30), abs(min(qv, 30) + min(qh, 30) - 30)) < 0.1:
            continue  # too close to a min() kink
        grads = pattern_gain_gradients(pat, np.array([theta]), np.array([phi]))
        worst = 0.0
        for name in ANTENNA_PARAMS:
            w0 = pat.embeddings[name]
            num = np.zeros(5)
            for i in range(5):
                vals = []
                for s in (1, -1):
                    w = w0.copy()
                    w[i] += s * 1e-6
                    emb = dict(pat.embeddings)
                    emb[name] = w
                    vals.append(float(pattern_gain(derive_antenna_params(TrainablePattern(emb, pat.u)), theta, phi)))
                num[i] = (vals[0] - vals[1]) / 2e-6
            worst = max(worst, _rel(grads[name][0], num))
        errors.append(worst)
    return errors


def _material_errors(rng, n):
    errors = []
    for _ in range(n):
        m = MaterialProps(rng.uniform(2, 10), 10 ** rng.uniform(-2, 0.5))
        ang = rng.uniform(0.1, 1.4)
        de, ds = reflection_loss_grad(m, ang, 2.3e9)
        h, hs = 1e-6, 1e-6 * m.sigma
        fe = (reflection_loss(MaterialProps(m.eps_r + h, m.sigma), ang, 2.3e9)
              - reflection_loss(MaterialProps(m.eps_r - h, m.sigma), ang, 2.3e9)) / (2 * h)
        fs = (reflection_loss(MaterialProps(m.eps_r, m.sigma + hs), ang, 2.3e9)
              - reflection_loss(MaterialProps(m.eps_r, m.sigma - hs), ang, 2.3e9)) / (2 * hs)
        errors.append(max(_rel(de, fe), _rel(ds, fs)))
    return errors


def _calibration_errors(rng, n):
    ps = planted_scene(5, n_buildings=12, n_cells=300, solver_config=SolverConfig(n_rays=16384, resolution=2.0, seed=5))
    train, _ = split_cells(ps.truth)
    mask = np.zeros(ps.truth.values.size, bool)
    mask[train] = True
    mask = mask.reshape(ps.truth.values.shape)
    table = ps.table.restrict(train)
    errors = []
    modes = ["A", "AM", "AMv"]
    while len(errors) < n:
        base = TrainableSceneParams.initial(modes[len(errors) % 3], table.material_names, ps.antenna.frequency_hz,
                                            seed=len(errors))
        vec = base.free_vector() + rng.normal(0, 0.3, base.n_free)
        _, grad, pred = calibration_loss(table, ps.antenna, base.with_free_vector(vec), ps.truth, mask)
        if np.abs(pred.values - ps.truth.values)[mask & pred.valid].min() < 1e-3:
            continue  # |x| kink
        num = np.zeros_like(vec)
        for i in range(vec.size):
            e = np.zeros_like(vec)
            e[i] = 1e-6
            lp = calibration_loss(table, ps.antenna, base.with_free_vector(vec + e), ps.truth, mask)[0]
            lm = calibration_loss(table, ps.antenna, base.with_free_vector(vec - e), ps.truth, mask)[0]
            num[i] = (lp - lm) / 2e-6
        errors.append(_rel(grad, num))
    return errors


def test_criterion_3_differentiability(capsys):
    rng = np.random.default_rng(3)
    groups = {
        "pattern gain": _pattern_errors(rng, 10),
        "material loss": _material_errors(rng, 10),
        "calibration loss": _calibration_errors(rng, 12),
        "surrogate backprop": list(gradient_check(SurrogateModel.initial(seed=2), rng.normal(size=(128, 7)),
                                                  rng.normal(size=128), n_points=10)),
    }
    worst = {k: max(v) for k, v in groups.items()}
    ok = all(len(v) >= 10 for v in groups.values()) and max(worst.values()) < 1e-4
    verdict(capsys, 3, ok, "max rel err " + ", ".join(f"{k} {v:.1e} ({len(groups[k])} pts)" for k, v in worst.items())
            + " (<1e-4)")


def test_criterion_4_planted_calibration(capsys):
    rows = []
    for seed in range(20):
        start = time.perf_counter()
        ps = planted_scene(seed, noise=0.1, solver_config=SolverConfig(n_rays=65536, resolution=2.0, seed=seed))
        a = calibrate_map(ps.table, ps.antenna, ps.truth, "A", OptimizerConfig())
        v = calibrate_map(ps.table, ps.antenna, ps.truth, "AMv", OptimizerConfig())
        rows.append((a.best_validation_mae, v.best_validation_mae, time.perf_counter() - start))
    rows = np.array(rows)
    good = (rows[:, 1] <= 1.5) & (rows[:, 1] <= rows[:, 0])
    ok = good.mean() >= 0.8 and rows[:, 2].max() < 60
    verdict(capsys, 4, ok, f"AMv <=1.5 dB and <=A on {int(good.sum())}/20 scenes (>=16); "
                           f"median MAE A {np.median(rows[:, 0]):.2f} dB, AMv {np.median(rows[:, 1]):.2f} dB; "
                           f"slowest scene {rows[:, 2].max():.1f} s (<60 s)")


def test_criterion_5_metrics(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        p, t = rng.uniform(-140, -40, (2, 24, 24))
        full, sparse = full_map_metrics(p, t), sparse_map_metrics(p, t, np.ones(p.shape, bool))
        worst = max(worst, *(abs(getattr(full, k) - getattr(sparse, k)) for k in ("rmse", "mae", "smape", "pcc")))
    two = full_map_metrics(np.array([[0, 10], [20, 40.0]]), np.array([[0, 10], [20, 30.0]]))
    three = sparse_map_metrics(np.array([[-82.0, -55.0], [-90.0, -96.0]]), np.array([[-80.0, 0.0], [-90.0, -100.0]]))
    x = rng.uniform(-140, -40, (64, 64))
    s = ssim(x, x)
    ok = (worst <= 1e-9 and two.rmse == 5.0 and two.mae == 2.5 and three.mae == 2.0
          and three.rmse == math.sqrt(20 / 3) and abs(s - 1.0) < 1e-12)
    verdict(capsys, 5, ok, f"sparse vs full max diff {worst:.1e}; 2x2 rmse {two.rmse} mae {two.mae}; "
                           f"3-cell mae {three.mae} rmse {three.rmse:.6f}; SSIM(x,x) {s:.12f}")


def _power_instance(gains, demands, pieces=6):
    a, b = fit_capacity_pieces(pieces)
    return PowerInstance(np.asarray(gains, float), np.asarray(demands, float), 20e6, 10 ** (-12.4), 40.0, a, b)


def test_criterion_6_power_optimisation(capsys):
    single = _power_instance([[1e-10]], [5e6], pieces=1)
    s1 = solve_power(single)
    cf_err = abs(s1.objective - closed_form_single(single)) / closed_form_single(single)

    rng = np.random.default_rng(6)
    gaps = []
    for _ in range(5):
        inst = _power_instance(10 ** rng.uniform(-12, -8, (2, 2)), random_demands(rng, 2))
        best, _ = brute_force_power(inst)
        gaps.append(abs(solve_power(inst).objective - best) / best)

    base = _power_instance(10 ** rng.uniform(-12, -8, (10, 3)), random_demands(rng, 10))
    start = time.perf_counter()
    rows = sweep_users(base, range(2, 11))
    sweep_s = time.perf_counter() - start
    totals = [r.total_power for r in rows]
    monotone = all(r.status == "optimal" for r in rows) and all(b >= a for a, b in zip(totals, totals[1:]))

    g, noise, cap = 1e-10, 10 ** (-12.4), 40.0
    capacity = 20e6 * math.log2(1 + cap * g / noise)
    over = solve_power(_power_instance([[g]], [1.05 * capacity])).status
    under = solve_power(_power_instance([[g]], [0.9 * capacity])).status
    crowd = solve_power(_power_instance(np.full((40, 1), g), np.full(40, capacity / 30))).status

    ok = (cf_err < 1e-6 and max(gaps) <= 0.01 and monotone and over == "infeasible" and crowd == "infeasible"
          and under == "optimal" and sweep_s < 30)
    verdict(capsys, 6, ok, f"1x1 rel err {cf_err:.1e} (<1e-6); 2x2 max oracle gap {max(gaps):.2%} (<=1%); "
                           f"sum P monotone over 2..10 users: {monotone}; infeasible detected: "
                           f"{over == 'infeasible' and crowd == 'infeasible'} (just-feasible solved: {under}); "
                           f"sweep {sweep_s:.1f} s (<30 s)")


def _handover_maps(J=3, n=128, res=4.0, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n]
    x, y = (xx + 0.5) * res, (n - 1 - yy + 0.5) * res
    maps = []
    for _ in range(J):
        px, py = rng.uniform(0, n * res, 2)
        maps.append(-22.0 - 35.0 * np.log10(np.hypot(x - px, y - py) + 1.0) + rng.normal(0, 3, (n, n)))
    return np.array(maps), np.ones((J, n, n), bool), res


def test_criterion_7_handover(capsys):
    m, v, res = _handover_maps()

    def inst(**kw):
        return HandoverInstance(m, v, res, 20e6, **kw)

    start = time.perf_counter()
    big = simulate(inst(n_users=100, horizon=5000), seed=0)
    big_s = time.perf_counter() - start
    constraint = big.assignments_valid and big.loads_consistent

    ladder = [simulate(inst(n_users=100, horizon=1000, gamma=g), seed=1) for g in (0.0, 0.1, 1.0, 10.0)]
    constraint &= all(t.assignments_valid and t.loads_consistent for t in ladder)
    counts = [t.summary()["mean_handovers_last"] for t in ladder]
    ladder_ok = all(b <= a for a, b in zip(counts, counts[1:]))

    regret = {}
    for T in (500, 5000):
        per_slot = []
        for seed in range(10):
            s = simulate(inst(n_users=100, horizon=T, gamma=0.1), seed=seed).summary()
            per_slot.append(max(s["regret"], 0.0) / T)
        regret[T] = float(np.mean(per_slot))
    shrink_ok = regret[5000] <= 0.5 * regret[500] or regret[500] <= 1e-9

    # 16 walkers per profile, 10^5 steps each
    profiles = [PROFILES[k] for k in ("static", "pedestrian", "cyclist", "vehicle") for _ in range(16)]
    mean = np.array([p.mean_speed for p in profiles])
    sigma = np.array([p.speed_sigma for p in profiles])
    memory = np.array([p.memory for p in profiles])
    rng = np.random.default_rng(7)
    n = len(profiles)
    state = MobilityState(np.full(n, 5e8), np.full(n, 5e8), mean.copy(), rng.uniform(-3, 3, n), rng.uniform(-3, 3, n))
    total = np.zeros(n)
    for _ in range(100_000):
        state = gauss_markov_step(state, memory, mean, sigma, rng, (0.0, 1e12, 0.0, 1e12))
        total += state.speed
    per_profile = (total / 100_000).reshape(4, 16).mean(axis=1)
    speed_err = float(np.max(np.abs(per_profile - mean[::16]) / mean[::16]))

    ok = constraint and ladder_ok and shrink_ok and speed_err <= 0.02 and big_s < 60
    verdict(capsys, 7, ok, f"one antenna per user every slot: {constraint}; last-100 handovers over gamma "
                           f"0/0.1/1/10: {counts}; regret per slot T=500 {regret[500]:.4f} -> T=5000 "
                           f"{regret[5000]:.4f}; mean-speed max rel err {speed_err:.2%} (<=2%); "
                           f"100 users x 5000 slots in {big_s:.1f} s (<60 s)")


def test_criterion_8_determinism(capsys, tmp_path):
    demo = tmp_path / "demo"
    assert main(["init-demo", str(demo)]) == 0
    runs = {}
    for workers in (1, 4, 8):
        out = tmp_path / f"w{workers}"
        for cmd in SUBCOMMANDS:
            code = main([cmd, "--config", str(demo / "config.json"), "--output-dir", str(out),
                         "--workers", str(workers)])
            assert code == 0, f"{cmd} exited {code}"
        runs[workers] = out
    files = sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*") if p.is_file() and p.name != "manifest.json")
    mismatched = [str(f) for w in (4, 8) for f in files
                  if not (runs[w] / f).is_file() or not filecmp.cmp(runs[1] / f, runs[w] / f, shallow=False)]
    extra = [str(p) for w in (4, 8) for p in runs[w].rglob("*")
             if p.is_file() and p.name != "manifest.json" and p.relative_to(runs[w]) not in files]
    ok = not mismatched and not extra and len(files) > 0
    verdict(capsys, 8, ok, f"{len(SUBCOMMANDS)} subcommands, {len(files)} output files compared at 1/4/8 workers; "
                           f"mismatches: {len(mismatched)}")
