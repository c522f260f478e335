"""Acceptance suite. Each test prints one PASS/FAIL line stating the measured value and its tolerance.

The lines are also collected and repeated at the end of the pytest run.
"""
import csv
import math
import time
from dataclasses import replace

import mpmath
import numpy as np
from conftest import ACCEPTANCE_LINES
from thermomag.control import (ControllerState, FeedforwardGains, PidGains, ZN_TABLE,
                               find_ultimate, pid_step, sg_derivative, simulate_closed_loop,
                               zn_tune)
from thermomag.scenario import (feedforward_from, load, loop_timing, magnet_from, odmr_from,
                                pid_from, plant_from, room_from, run, sub_seed)
from thermomag.spectroscopy import LADDER, stability_run
from thermomag.spin_bath import BathState, ScatteringMatrix, evolve
from thermomag.thermal_plant import PlantParams


def report(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  [{number:>2}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def timed_run(name, tmp_path, **kw):
    t0 = time.perf_counter()
    summary, _ = run(name, out=tmp_path / name, **kw)
    return summary["metrics"], time.perf_counter() - t0


def test_01_settling(tmp_path):
    m, wall = timed_run("settle", tmp_path)
    big, small = m["settle_s_1"], m["settle_s_0.15"]
    ok = 120 <= big <= 480 and small < 60 and wall < 5
    report(1, "settling", ok,
           f"1 C step {big:.0f} s (want 120-480 s), 0.15 C step {small:.0f} s (want < 60 s), "
           f"runtime {wall:.2f} s (want < 5 s)")


def test_02_calibration_ramp(tmp_path):
    m, _ = timed_run("odmr_ramp", tmp_path)
    slope, span = abs(m["slope_MHz_per_C"]), m["span_MHz"]
    ok = 2.4 <= slope <= 3.0 and abs(span - 10.0) <= 1.0
    report(2, "ODMR ramp 22-26 C at 1020 G", ok,
           f"|slope| {slope:.3f} MHz/C (want 2.4-3.0), span {span:.2f} MHz (want 10 +/- 1)")


def test_03_resolution(tmp_path):
    m, _ = timed_run("cr_gslac", tmp_path)
    res = m["resolution_kHz_per_0.01C"]
    report(3, "0.01 C resolution at the GSLAC field", 26.0 <= res <= 28.0,
           f"{res:.2f} kHz (want 26-28 kHz)")


def test_04_electron_spectrum(tmp_path):
    m, _ = timed_run("fig2b_electron", tmp_path)
    n = m["n_dips"]
    dip = m["dips"][0] if n else {"omega_nv_MHz": math.nan, "T_C": math.nan}
    w, T = dip["omega_nv_MHz"], dip["T_C"]
    ok = n == 1 and abs(w - 1435.0) <= 1.0 and abs(T - 24.0) <= 0.5
    report(4, "electron CR spectrum", ok,
           f"{n} dip(s) (want 1), centre {w:.3f} MHz (want 1435 +/- 1), at {T:.3f} C (want 24 +/- 0.5)")


def test_05_gslac_spectrum(tmp_path):
    m, _ = timed_run("cr_gslac", tmp_path)
    c = sorted(d["omega_nv_MHz"] for d in m["dips"])
    ok = len(c) == 3 and all(abs(abs(x) - 1.10) <= 0.05 for x in (c[0], c[-1])) \
        and abs(c[1]) <= 0.05 and c[0] < 0 < c[-1]
    shown = ", ".join(f"{x:+.4f}" for x in c)
    report(5, "GSLAC CR spectrum", ok,
           f"{len(c)} dips (want 3) at [{shown}] MHz (outer |w| 1.10 +/- 0.05, central 0 +/- 0.05)")


LADDER_SEEDS = (5, 6, 7)
TARGETS = {"none": (2.0, 0.5), "pid": (0.8, 0.2), "pid+ff_p": (0.4, 0.1), "pid+ff_pd": (0.2, 0.05)}


def test_06_stability_ladder():
    sc = load("fig3_ladder")
    plant, magnet = plant_from(sc), magnet_from(sc)
    tick, sub = loop_timing(sc)
    pid = pid_from(sc, plant, tick, sub)
    ff, every = feedforward_from(sc, plant)
    odmr, cadence = odmr_from(sc)
    trace = room_from(sc)
    burn = float(sc.block("control").get("burn_in", 7200.0))
    per_seed, worst_wall, ok = [], 0.0, True
    for master in LADDER_SEEDS:
        pp = {}
        for k, stage in enumerate(LADDER):
            t0 = time.perf_counter()
            r = stability_run(trace, plant, magnet, stage, pid, ff, odmr, cadence, tick, sub, every,
                              burn_in=burn, seed=sub_seed(master, "spectroscopy", k))
            worst_wall = max(worst_wall, time.perf_counter() - t0)
            pp[stage.value] = r.peak_to_peak
        vals = list(pp.values())
        ok &= all(a > b for a, b in zip(vals, vals[1:]))
        ok &= all(abs(pp[s] - c) <= tol for s, (c, tol) in TARGETS.items())
        per_seed.append("/".join(f"{v:.3f}" for v in vals))
    ok &= worst_wall < 60
    report(6, "stability ladder", ok,
           f"peak-to-peak MHz per seed {LADDER_SEEDS}: {'; '.join(per_seed)} "
           f"(want 2.0+/-0.5 / 0.8+/-0.2 / 0.4+/-0.1 / 0.2+/-0.05, strictly decreasing), "
           f"slowest stage {worst_wall:.1f} s (want < 60 s)")


def test_07_flip_flop(tmp_path):
    m, _ = timed_run("flipflop", tmp_path)
    t = m["first_min_s"] * 1e6
    report(7, "flip-flop first minimum", abs(t - 1.9) <= 0.2 and m["n_spins"] >= 400,
           f"{t:.4f} us (want 1.9 +/- 0.2 us) with {m['n_spins']} bath spins")


def test_08_buildup(tmp_path):
    m, _ = timed_run("polarise", tmp_path)
    rows = list(csv.DictReader(l for l in (tmp_path / "polarise" / "polarise.csv").read_text().splitlines()
                               if not l.startswith("#")))
    plus = np.array([float(r["inner_core_pol"]) for r in rows])
    minus = np.array([float(r["inner_core_pol_minus1_start"]) for r in rows])
    n = len(plus) // 2
    mirrored = np.max(np.abs(plus[:n] + minus[:n])) <= 1e-9 and minus[n - 1] < 0 < plus[n - 1]
    ok = 10 <= m["n90"] <= 15 and mirrored
    report(8, "polarisation build-up", ok,
           f"90% of saturation after {m['n90']} steps (want 10-15), ket_minus1 start mirrors "
           f"the sign with max asymmetry {np.max(np.abs(plus[:n] + minus[:n])):.1e}")


def test_09_lifetimes(tmp_path):
    m, wall = timed_run("lifetime", tmp_path)
    t3, t4, ratio = m["lifetime_iii_s"] * 1e6, m["lifetime_iv_s"] * 1e3, m["ratio"]
    ok = abs(t3 - 250) <= 80 and 5 <= t4 <= 20 and ratio >= 20 and wall < 300 and m["n_spins"] >= 400
    report(9, "polarisation lifetimes", ok,
           f"(iii) {t3:.1f} us (want 250 +/- 80), (iv) {t4:.2f} ms (want 5-20), ratio {ratio:.1f} "
           f"(want >= 20), runtime {wall:.1f} s at N = {m['n_spins']} (want < 300 s)")


def _mp_expm(S, p, dt):
    mpmath.mp.dps = 40
    v = mpmath.expm(mpmath.matrix(S.S.tolist()) * dt) * mpmath.matrix(p.tolist())
    return np.array([float(x) for x in v])


def test_10_oracle_equivalence(bath_model):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    worst_err, worst_drift = 0.0, 0.0
    for k in range(150):
        n = 2 + k % 2
        W = np.triu(rng.uniform(0, 1e6, (n, n)) * (rng.random((n, n)) < 0.9), 1)
        S = ScatteringMatrix(W + W.T, rng.choice([math.inf, rng.uniform(1e-5, 1)]), rng.uniform(0, 1e5))
        p = rng.uniform(-1, 1, n)
        dt = 10 ** rng.uniform(-8, -3)
        worst_err = max(worst_err, float(np.max(np.abs(evolve(BathState(p), S, dt).p - _mp_expm(S, p, dt)))))
        free = ScatteringMatrix(S.W)
        q = evolve(BathState(p), free, dt).p
        worst_drift = max(worst_drift, abs(q.sum() - p.sum()) / max(1.0, np.abs(p).sum()))
    S = replace(bath_model.pump, t1_e=math.inf)
    s = BathState.fresh(bath_model.n)
    for _ in range(10):
        s = evolve(s, S, 1.9e-6)
    worst_drift = max(worst_drift, abs(s.p.sum() - 1.0))
    wall = time.perf_counter() - t0
    ok = worst_err < 1e-8 and worst_drift < 1e-9 and wall < 10
    report(10, "rate-equation oracle", ok,
           f"max |evolve - dense expm| {worst_err:.1e} (want < 1e-8), sum(p) drift {worst_drift:.1e} "
           f"(want < 1e-9) incl. N = {bath_model.n} bath, runtime {wall:.1f} s (want < 10 s)")


def test_11_controller_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    zn_ok = True
    for ku, pu in rng.uniform(0.01, 1e3, (200, 2)):
        g = zn_tune(ku, pu)
        zn_ok &= math.isclose(g.kp, 0.6 * ku, rel_tol=1e-14)
        zn_ok &= math.isclose(g.ki, 0.6 * ku / (pu / 2), rel_tol=1e-14)
        zn_ok &= math.isclose(g.kd, 0.6 * ku * pu / 8, rel_tol=1e-14)
    zn_ok &= ZN_TABLE["pid"] == (0.6, 2.0, 0.125)
    worst_integral = 0.0
    for _ in range(200):
        g = PidGains(rng.uniform(0, 10), rng.uniform(0, 50), rng.uniform(0, 10), rng.uniform(0.01, 3))
        s = ControllerState()
        for e in rng.normal(0, 10, 100):
            _, s = pid_step(s, g, 22.0 - e, 22.0, 1.0)
            worst_integral = max(worst_integral, abs(s.integral) / g.integral_limit)
    plant = PlantParams()
    gains = zn_tune(*find_ultimate(plant))
    room = np.full(1500, 21.7)
    sp = np.r_[np.full(200, 22.0), np.full(1300, 22.3)]
    a = simulate_closed_loop(plant, gains, sp, room)
    b = simulate_closed_loop(plant, gains, sp, room,
                             feedforward=FeedforwardGains(-0.7, -1500.0), ff_every=60)
    same = np.array_equal(a.T_magnet, b.T_magnet) and np.array_equal(a.reading, b.reading)
    sg_err = 0.0
    for order in (1, 2, 3, 4):
        for window in (order + 2 - order % 2, 21):
            x = (np.arange(window) - (window - 1)) * 60.0
            c = rng.normal(0, 1, order + 1) / (window * 60.0) ** np.arange(order + 1)
            buf = np.polyval(c[::-1], x)
            sg_err = max(sg_err, abs(sg_derivative(buf, 60.0, order) - c[1]) / max(abs(c[1]), 1e-12))
    wall = time.perf_counter() - t0
    ok = zn_ok and worst_integral <= 1.0 and same and sg_err < 1e-8 and wall < 10
    report(11, "controller algebra", ok,
           f"Z-N table exact: {zn_ok}; max |integral|/limit {worst_integral:.3f} (want <= 1); "
           f"feedforward on constant room identical: {same}; SG polynomial rel. error {sg_err:.1e} "
           f"(want < 1e-8); runtime {wall:.1f} s (want < 10 s)")
