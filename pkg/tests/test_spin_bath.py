import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import thermomag.spin_bath as sb
from thermomag.spin_bath import (BathConfig, BathError, BathState, NvMode, PulseSequence,
                                 ScatteringMatrix, build_scattering, evolve, first_minimum,
                                 fit_lifetime, flip_flop_population, hyperfine_from_positions,
                                 polarisation_metric, run_sequence, sample_bath)

mpmath.mp.dps = 40


# --- sampling ----------------------------------------------------------------------

def test_sampling_is_deterministic():
    a = sample_bath(BathConfig(n_spins=60, seed=5))
    b = sample_bath(BathConfig(n_spins=60, seed=5))
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.hf.A_sq, b.hf.A_sq)
    np.testing.assert_array_equal(a.hf.B_xy, b.hf.B_xy)


def test_inverse_cube_scaling():
    pos = np.array([[0.5, 0.2, -0.3], [1.1, -0.4, 0.7], [-0.9, 0.6, 0.1]])
    near, far = hyperfine_from_positions(pos), hyperfine_from_positions(2 * pos)
    for name in ("A_xx", "A_yy", "A_xy", "A_zz", "B_xx", "B_yy", "B_xy"):
        np.testing.assert_allclose(getattr(far, name), getattr(near, name) / 8, rtol=1e-12)


def diamond_distances(radius_nm, a=0.3567):
    """Independent site enumeration in quarter-cell units.

    Carbon sites are integer triples that are all even with sum = 0 mod 4, or all odd
    with sum = 3 mod 4. The vacancy sits at the origin, the nitrogen at (1, 1, 1).
    """
    n = int(math.ceil(4 * radius_nm / a)) + 1
    g = np.arange(-n, n + 1)
    x, y, z = (v.ravel() for v in np.meshgrid(g, g, g, indexing="ij"))
    even = (x % 2 == 0) & (y % 2 == 0) & (z % 2 == 0) & ((x + y + z) % 4 == 0)
    odd = (x % 2 == 1) & (y % 2 == 1) & (z % 2 == 1) & ((x + y + z) % 4 == 3)
    keep = (even | odd) & ~((x == 0) & (y == 0) & (z == 0)) & ~((x == 1) & (y == 1) & (z == 1))
    d = np.sqrt(x[keep] ** 2 + y[keep] ** 2 + z[keep] ** 2) * a / 4
    return np.sort(d[d <= radius_nm])


def discrete_ks(sample, support, cdf_at_support):
    """Sup distance between right-continuous empirical and model CDFs on the support."""
    emp = np.searchsorted(np.sort(sample), support, side="right") / len(sample)
    return float(np.max(np.abs(emp - cdf_at_support)))


def test_nearest_neighbour_statistics():
    # Kolmogorov-Smirnov with a Monte-Carlo null, since the distance law is discrete
    # (scipy's continuous kstest misreads the jumps)
    density, nn = 0.011, []
    for seed in range(100):
        s = sample_bath(BathConfig(n_spins=80, density=density, seed=seed))
        nn.append(np.linalg.norm(s.positions, axis=1).min())
    shells = diamond_distances(3.0)
    support = np.unique(shells)
    F = 1.0 - (1.0 - density) ** np.searchsorted(shells, support, side="right")
    d_obs = discrete_ks(np.array(nn), support, F)
    rng = np.random.default_rng(2024)
    # nearest occupied site = first success in independent Bernoulli trials over sorted sites
    null = [discrete_ks(shells[np.minimum(rng.geometric(density, 100) - 1, len(shells) - 1)], support, F)
            for _ in range(2000)]
    assert np.mean(np.array(null) >= d_obs) > 0.01
    r = np.linspace(0.1, 2.5, 50)
    F_r = 1.0 - (1.0 - density) ** np.searchsorted(shells, r, side="right")
    np.testing.assert_allclose(sb.nearest_neighbour_cdf(r, density), F_r, atol=1e-12)


# --- generator ---------------------------------------------------------------------

def test_two_spin_generator():
    b = 3.0e4
    S = ScatteringMatrix(np.array([[0.0, b], [b, 0.0]]))
    np.testing.assert_array_equal(S.S, [[-b, b], [b, -b]])


def test_single_bath_spin_gets_whole_nv_rate():
    hf = hyperfine_from_positions(np.array([[0.4, 0.3, 0.9]]))
    S = build_scattering(hf, gamma=2.0e5)
    np.testing.assert_allclose(S.S, [[-2e5 / math.pi, 2e5 / math.pi], [2e5 / math.pi, -2e5 / math.pi]])


def test_exchange_columns_sum_to_zero():
    s = sample_bath(BathConfig(n_spins=50, seed=2))
    E = build_scattering(s.hf).exchange
    assert np.abs(E.sum(axis=0)).max() <= 1e-9 * np.abs(E).max()


def test_total_nv_rate_is_inverse_tau_opt(bath_model):
    S = bath_model.pump
    assert S.gamma == pytest.approx(1 / sb.TAU_OPT)
    assert math.pi * S.W[0, 1:].sum() == pytest.approx(1 / 1.9e-6, rel=1e-12)
    assert bath_model.n >= 400


# --- evolution ---------------------------------------------------------------------

def test_zero_generator_leaves_state():
    s = BathState(np.array([1.0, 0.3, -0.2]))
    out = evolve(s, ScatteringMatrix(np.zeros((3, 3))), 1e-3)
    np.testing.assert_array_equal(out.p, s.p)
    assert out.t == 1e-3


@pytest.mark.parametrize("t", [1e-7, 1e-6, 1e-5, 1e-4])
def test_two_spin_exchange_closed_form(t):
    b = 4.0e4
    out = evolve(BathState(np.array([1.0, 0.0])), ScatteringMatrix(np.array([[0, b], [b, 0.0]])), t)
    assert out.p[0] == pytest.approx((1 + math.exp(-2 * b * t)) / 2, abs=1e-8)
    assert out.p[1] == pytest.approx((1 - math.exp(-2 * b * t)) / 2, abs=1e-8)


def test_decoupled_decay():
    p = np.array([0.9, -0.5, 0.25, 1.0])
    out = evolve(BathState(p), ScatteringMatrix(np.zeros((4, 4)), t1_e=2e-3), 1e-3)
    np.testing.assert_allclose(out.p, p * math.exp(-0.5), rtol=1e-13)


def random_generator(draw_w, n, t1_e, leak):
    W = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i + 1, n):
            W[i, j] = W[j, i] = draw_w[k]
            k += 1
    return ScatteringMatrix(W, t1_e, leak)


def mp_expm_apply(S, p, dt):
    """Dense exponential in 40-digit arithmetic, independent of numpy's eigensolver."""
    E = mpmath.expm(mpmath.matrix(S.S.tolist()) * dt)
    v = E * mpmath.matrix(p.tolist())
    return np.array([float(x) for x in v])


rates = st.floats(0.0, 1e6)


@settings(max_examples=120, deadline=None)
@given(st.integers(2, 4), st.lists(rates, min_size=6, max_size=6),
       st.one_of(st.just(math.inf), st.floats(1e-5, 1.0)), st.floats(0.0, 1e5),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.floats(1e-8, 1e-3))
def test_matches_dense_exponential(n, w, t1_e, leak, p, dt):
    # generator sizes 2..4 cover two and three spins with or without the NV entry
    S = random_generator(w, n, t1_e, leak)
    p = np.array(p[:n])
    got = evolve(BathState(p), S, dt).p
    assert np.max(np.abs(got - mp_expm_apply(S, p, dt))) < 1e-8


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 6), st.lists(rates, min_size=15, max_size=15),
       st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.floats(1e-8, 1e-2))
def test_conservation_without_leakage(n, w, p, dt):
    S = random_generator(w, n, math.inf, 0.0)
    p = np.array(p[:n])
    q = evolve(BathState(p), S, dt).p
    assert abs(q.sum() - p.sum()) <= 1e-9 * max(1.0, np.abs(p).sum())


def test_conservation_on_the_bundled_bath(bath_model):
    S = replace(bath_model.pump, t1_e=math.inf)
    s = BathState.fresh(bath_model.n)
    total = s.p.sum()
    for _ in range(20):
        s = evolve(s, S, 1.9e-6)
    assert abs(s.p.sum() - total) < 1e-9 * abs(total)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 6), st.lists(rates, min_size=15, max_size=15),
       st.one_of(st.just(math.inf), st.floats(1e-6, 1.0)), st.floats(0.0, 1e6),
       st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.floats(1e-9, 1.0),
       st.sampled_from(list(NvMode)))
def test_polarisation_stays_bounded(n, w, t1_e, leak, p, dt, mode):
    S = random_generator(w, n, t1_e, leak)
    q = evolve(BathState(np.array(p[:n]), mode), S, dt).p
    assert np.all(np.abs(q) <= 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 6), st.lists(rates, min_size=15, max_size=15),
       st.one_of(st.just(math.inf), st.floats(1e-6, 1.0)),
       st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.floats(1e-9, 1e-2))
def test_parked_nv_is_decoupled(n, w, t1_e, p, dt):
    S = random_generator(w, n, t1_e, 1e4)
    p = np.array(p[:n])
    full = evolve(BathState(p, NvMode.ket_plus1), S, dt).p
    bath_only = evolve(BathState(p[1:], NvMode.ket0), ScatteringMatrix(S.W[1:, 1:], t1_e), dt).p
    np.testing.assert_allclose(full[1:], bath_only, atol=1e-12)


def test_krylov_branch_agrees_with_eigendecomposition(monkeypatch):
    s = sample_bath(BathConfig(n_spins=40, seed=1))
    S = build_scattering(s.hf, t1_e=1e-2)
    p = BathState.fresh(s.hf.n).p
    dense = S.apply(p, 5e-6)
    monkeypatch.setattr(sb, "EIGH_MAX_N", 0)
    np.testing.assert_allclose(S.apply(p, 5e-6), dense, atol=1e-12)


def test_malformed_generator_rejected():
    with pytest.raises(BathError):
        ScatteringMatrix(np.array([[0.0, -1.0], [-1.0, 0.0]]))
    with pytest.raises(BathError):
        ScatteringMatrix(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(BathError):
        BathState(np.array([1.5, 0.0]))


# --- flip-flop ---------------------------------------------------------------------

def test_single_spin_period():
    b = 2.0e6
    tau = np.linspace(0, 4 * math.pi / b, 2001)
    pop = flip_flop_population(np.array([b]), tau, q=np.array([1.0]))
    np.testing.assert_allclose(pop, np.cos(b * tau) ** 2, atol=1e-14)
    assert first_minimum(tau, pop) == pytest.approx(math.pi / (2 * b), rel=1e-6)
    # consecutive minima are pi/b apart
    minima = tau[1:-1][(pop[1:-1] < pop[:-2]) & (pop[1:-1] <= pop[2:])]
    assert np.diff(minima[:2])[0] == pytest.approx(math.pi / b, rel=1e-3)


def test_zero_coupling_is_flat():
    tau = np.linspace(0, 1e-5, 50)
    assert np.all(flip_flop_population(np.zeros(20), tau) == 1.0)


# --- sequences and metrics ---------------------------------------------------------

def test_fully_polarised_metric():
    s = BathState(np.ones(6))
    assert polarisation_metric(s, np.array([5.0, 4.0, 1.0, 0.5, 0.1]), 1.0) == (1.0, 1.0)


def test_buildup_is_monotone(bath_model):
    tr = run_sequence(bath_model, PulseSequence("polarise_ii", n_steps=50))
    inner = tr.inner[:50]
    assert np.all(np.diff(inner) >= -1e-9)


def test_buildup_sign_symmetry(bath_model):
    seq = PulseSequence("polarise_ii", n_steps=30)
    plus = run_sequence(bath_model, seq)
    minus = run_sequence(bath_model, seq, start=NvMode.ket_minus1)
    np.testing.assert_allclose(minus.inner, -plus.inner, atol=1e-12)
    np.testing.assert_allclose(minus.outer, -plus.outer, atol=1e-12)


def test_polarisation_sits_on_about_ten_spins(bath_model):
    n = 50
    s = BathState.fresh(bath_model.n)
    for _ in range(n):
        s = s.reset_nv(NvMode.ket0)
        s = BathState(bath_model.pump.apply(s.p, 1.9e-6), NvMode.ket0)
    bath = s.p[1:]
    # each shot moves at most one unit of polarisation into the bath
    assert 0 < bath.sum() <= n
    carriers = int((bath > 0.1).sum())
    assert 3 <= carriers <= 30


def test_alternating_initialisation_gives_no_net_polarisation(bath_model):
    tr = run_sequence(bath_model, PulseSequence("alternating_i", n_steps=200))
    assert abs(tr.outer[-1]) < 1e-3
    # the core swings with each shot but does not accumulate
    assert tr.inner[-1] == pytest.approx(tr.inner[-50], abs=1e-3)
    polarise = run_sequence(bath_model, PulseSequence("polarise_ii", n_steps=50))
    assert tr.inner[-1] < 0.2 * polarise.inner[49]


def test_lifetime_fit_recovers_exponential():
    t = np.linspace(0, 2e-3, 30)
    a, k = fit_lifetime(t, 0.7 * np.exp(-t / 3e-4))
    assert (a, k) == pytest.approx((0.7, 3e-4), rel=1e-6)


def test_lifetime_sequences_need_wait_times():
    with pytest.raises(BathError):
        PulseSequence("lifetime_iii", wait_times=(0.0, 1e-4))
