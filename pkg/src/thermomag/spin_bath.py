"""13C spin bath around an NV centre: sampling, couplings, and rate-equation polarisation dynamics.

The bath polarisation vector ``p`` (entry 0 is the NV) evolves as
``p(t + dt) = expm(S dt) p`` with a symmetric rate generator ``S`` built from

* NV <-> 13C exchange rates ``(Gamma/pi) * A_sq_j / sum(A_sq)``,
* 13C <-> 13C exchange rates ``sqrt(B_sq_ij)``,
* a diagonal that makes every exchange column sum to zero,
* uniform leakage ``-1/T1_E`` (plus an optional extra NV-only leak).

Two generators are used. During a polarisation step of length ``tau_opt`` the
NV exchange runs at ``Gamma = 1/tau_opt``. During a free wait with the NV on
resonance the total NV-bath exchange is set by the measured on-resonance NV T1,
``sum_j r_j = 1/T1_res``.

The coherent NV population oscillation (flip-flop trace) uses a star model:
NV coupled to each spin with ``b_j = lam * sqrt(A_sq_j)``; each spin is
available for exchange with a probability set by its polarisation, and the NV
population is the configuration average of ``cos^2(Omega tau)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import curve_fit
from scipy.sparse.linalg import expm_multiply

A_DIAMOND_NM = 0.3567
MU0_4PI = 1e-7
HBAR = 1.054571817e-34
GAMMA_E_RAD = 1.76085963e11     # rad s^-1 T^-1
GAMMA_C13_RAD = 6.728284e7      # rad s^-1 T^-1
# dipolar prefactors in rad/s * m^3
C_NV_C13 = MU0_4PI * HBAR * GAMMA_E_RAD * GAMMA_C13_RAD
C_C13_C13 = MU0_4PI * HBAR * GAMMA_C13_RAD ** 2

TAU_OPT = 1.9e-6
T1_NV_RESONANT = 50e-6
T1_NV_PHONON = 5e-3
T1_E_DEFAULT = 10e-3
BOUND_TOL = 1e-6
EIGH_MAX_N = 2000


class BathError(ValueError):
    pass


class NvMode(str, Enum):
    ket0 = "ket0"
    ket_minus1 = "ket_minus1"
    ket_plus1 = "ket_plus1"

    @property
    def sign(self) -> int:
        return {"ket0": 1, "ket_minus1": -1, "ket_plus1": 0}[self.value]


# --- configuration and sampling --------------------------------------------------------

@dataclass(frozen=True)
class BathConfig:
    n_spins: int = 500
    density: float = 0.011
    seed: int = 0
    nv_axis: tuple[float, float, float] = (1 / math.sqrt(3),) * 3
    nv_depth_context: str = "bulk"
    lattice_constant: float = A_DIAMOND_NM

    def __post_init__(self):
        if self.n_spins < 2:
            raise BathError("n_spins must be >= 2")
        if not 0 < self.density < 1:
            raise BathError("density must be in (0, 1)")
        if not math.isclose(float(np.linalg.norm(self.nv_axis)), 1.0, rel_tol=1e-9):
            raise BathError("nv_axis must be a unit vector")

    @property
    def region_radius(self) -> float:
        """Radius in nm whose carbon sites hold ``n_spins`` 13C on average (8 sites per cell)."""
        a = self.lattice_constant
        return (3 * self.n_spins * a**3 / (32 * math.pi * self.density)) ** (1 / 3)


def lattice_sites(radius: float, a: float = A_DIAMOND_NM) -> np.ndarray:
    """Carbon sites (nm) within ``radius`` of a vacancy at the origin.

    The nitrogen neighbour at ``(a/4)(1,1,1)`` is excluded. Sorted by distance so
    the site order does not depend on grid construction details.
    """
    n = int(math.ceil(radius / a)) + 1
    g = np.arange(-n, n + 1)
    cells = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3).astype(float)
    fcc = np.array([[0, 0, 0], [0, .5, .5], [.5, 0, .5], [.5, .5, 0]])
    basis = np.concatenate([fcc, fcc + 0.25])
    pts = (cells[:, None, :] + basis[None]).reshape(-1, 3) * a
    d = np.linalg.norm(pts, axis=1)
    dn = np.linalg.norm(pts - 0.25 * a, axis=1)
    keep = (d <= radius) & (d > 1e-9) & (dn > 1e-9)
    pts, d = pts[keep], d[keep]
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], np.round(d, 9)))
    return pts[order]


@dataclass(frozen=True)
class HyperfineSet:
    """Secular coupling components in the NV frame, rad/s."""

    A_xx: np.ndarray
    A_yy: np.ndarray
    A_xy: np.ndarray
    B_xx: np.ndarray
    B_yy: np.ndarray
    B_xy: np.ndarray
    A_zz: np.ndarray | None = None  # secular S_z I_z part, used for flip-flop detuning

    @property
    def n(self) -> int:
        return len(self.A_xx)

    @property
    def A_sq(self) -> np.ndarray:
        return (self.A_xx - self.A_yy) ** 2 + 4 * self.A_xy**2

    @property
    def B_sq(self) -> np.ndarray:
        return (self.B_xx - self.B_yy) ** 2 + 4 * self.B_xy**2


@dataclass(frozen=True)
class BathSample:
    config: BathConfig
    positions: np.ndarray  # nm, shape (N, 3)
    hf: HyperfineSet


def nv_frame(axis) -> np.ndarray:
    """Rows are (x, y, z) unit vectors with z along ``axis``."""
    z = np.asarray(axis, dtype=float)
    z = z / np.linalg.norm(z)
    trial = np.array([1.0, 0, 0]) if abs(z[0]) < 0.9 else np.array([0, 1.0, 0])
    x = trial - (trial @ z) * z
    x /= np.linalg.norm(x)
    return np.stack([x, np.cross(z, x), z])


def dipolar_components(vectors_nm: np.ndarray, prefactor: float, frame: np.ndarray):
    """Point-dipole secular components (xx, yy, xy) for displacement vectors in nm."""
    v = vectors_nm @ frame.T
    r = np.linalg.norm(v, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        n = v / r[..., None]
        C = prefactor / (r * 1e-9) ** 3
        xx = C * (1 - 3 * n[..., 0] ** 2)
        yy = C * (1 - 3 * n[..., 1] ** 2)
        xy = -3 * C * n[..., 0] * n[..., 1]
        zz = C * (1 - 3 * n[..., 2] ** 2)
    bad = ~np.isfinite(C)
    for comp in (xx, yy, xy, zz):
        comp[bad] = 0.0
    return xx, yy, xy, zz


def hyperfine_from_positions(positions: np.ndarray, nv_axis=(1, 1, 1)) -> HyperfineSet:
    frame = nv_frame(nv_axis)
    axx, ayy, axy, azz = dipolar_components(positions, C_NV_C13, frame)
    d = positions[:, None, :] - positions[None, :, :]
    b = dipolar_components(d, C_C13_C13, frame)[:3]
    for comp in b:
        np.fill_diagonal(comp, 0.0)
    return HyperfineSet(axx, ayy, axy, *b, A_zz=azz)


def sample_bath(config: BathConfig) -> BathSample:
    """Occupy carbon sites at ``density`` inside ``config.region_radius``."""
    sites = lattice_sites(config.region_radius, config.lattice_constant)
    rng = np.random.default_rng(config.seed)
    occ = rng.random(len(sites)) < config.density
    pos = sites[occ]
    if len(pos) < 2:
        raise BathError("sampled fewer than 2 spins; increase n_spins")
    return BathSample(config, pos, hyperfine_from_positions(pos, config.nv_axis))


def nearest_neighbour_cdf(r, density: float, a: float = A_DIAMOND_NM, sites: np.ndarray | None = None):
    """P(nearest 13C to the NV lies within r) for independent site occupancy."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if sites is None:
        sites = lattice_sites(float(r.max()) + 1e-9, a)
    d = np.sort(np.linalg.norm(sites, axis=1))
    counts = np.searchsorted(d, r, side="right")
    return 1.0 - (1.0 - density) ** counts


# --- generator -------------------------------------------------------------------------

@dataclass(frozen=True)
class ScatteringMatrix:
    """Symmetric rate generator. ``W`` holds the non-negative exchange rates (zero diagonal)."""

    W: np.ndarray
    t1_e: float = math.inf
    nv_leak: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        W = self.W
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise BathError("W must be square")
        if np.any(W < 0) or not np.all(np.isfinite(W)):
            raise BathError("exchange rates must be finite and non-negative")
        if not np.allclose(W, W.T, rtol=0, atol=1e-12 * max(1.0, float(np.abs(W).max()))):
            raise BathError("exchange rates must be symmetric")
        if not self.t1_e > 0:
            raise BathError("t1_e must be positive or inf")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def exchange(self) -> np.ndarray:
        E = self.W.copy()
        np.fill_diagonal(E, 0.0)
        E -= np.diag(E.sum(axis=0))
        return E

    @cached_property
    def S(self) -> np.ndarray:
        S = self.exchange
        S -= np.eye(self.n) / self.t1_e
        S[0, 0] -= self.nv_leak
        return S

    def gated(self, detuning: np.ndarray | None = None) -> "ScatteringMatrix":
        """NV exchange switched off (NV far from resonance).

        ``detuning`` (rad/s per bath spin) optionally suppresses bath flip-flops by
        ``1 / (1 + (delta_ij / w_ij)^2)`` where ``delta_ij`` is the difference of the
        two spins' detunings.
        """
        W = self.W.copy()
        W[0, :] = 0.0
        W[:, 0] = 0.0
        if detuning is not None:
            Wb = W[1:, 1:]
            dd = np.subtract.outer(detuning, detuning)
            with np.errstate(divide="ignore", invalid="ignore"):
                f = np.where(Wb > 0, 1.0 / (1.0 + (dd / Wb) ** 2), 0.0)
            W[1:, 1:] = Wb * f
        return replace(self, W=W)

    @cached_property
    def _eig(self):
        return eigh(self.S)

    def propagator(self, dt: float) -> np.ndarray:
        lam, V = self._eig
        return (V * np.exp(lam * dt)) @ V.T

    def apply(self, p: np.ndarray, dt: float) -> np.ndarray:
        if self.n <= EIGH_MAX_N:
            lam, V = self._eig
            return V @ (np.exp(lam * dt) * (V.T @ p))
        return expm_multiply(self.S * dt, p)

    def apply_times(self, p: np.ndarray, times) -> np.ndarray:
        """``p`` evolved to each of ``times``; shape (len(times), n)."""
        times = np.asarray(times, dtype=float)
        if self.n <= EIGH_MAX_N:
            lam, V = self._eig
            c = V.T @ p
            return (V @ (np.exp(np.outer(lam, times)) * c[:, None])).T
        return np.array([expm_multiply(self.S * t, p) for t in times])


def nv_weights(hf: HyperfineSet) -> np.ndarray:
    A = hf.A_sq
    tot = A.sum()
    if tot <= 0:
        raise BathError("all NV couplings vanish")
    return A / tot


def build_scattering(hf: HyperfineSet, t1_e: float = math.inf, gamma: float = 1.0 / TAU_OPT,
                     nv_leak: float = 0.0, b_scale: float = 1.0) -> ScatteringMatrix:
    """Assemble the generator for NV + bath.

    ``gamma`` is the total NV-bath rate Gamma; spin j exchanges with the NV at
    ``(gamma/pi) * A_sq_j / sum(A_sq)``. Bath pairs exchange at ``sqrt(B_sq)``.
    """
    N = hf.n
    W = np.zeros((N + 1, N + 1))
    W[1:, 1:] = b_scale * np.sqrt(hf.B_sq)
    np.fill_diagonal(W, 0.0)
    r = gamma / math.pi * nv_weights(hf)
    W[0, 1:] = r
    W[1:, 0] = r
    return ScatteringMatrix(W, t1_e, nv_leak, gamma)


# --- state and evolution -------------------------------------------------------------

@dataclass(frozen=True)
class BathState:
    p: np.ndarray
    nv_mode: NvMode = NvMode.ket0
    t: float = 0.0

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        if np.any(np.abs(p) > 1 + BOUND_TOL) or not np.all(np.isfinite(p)):
            raise BathError("polarisation entries must lie in [-1, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "nv_mode", NvMode(self.nv_mode))

    @classmethod
    def fresh(cls, n_spins: int, nv_mode: NvMode = NvMode.ket0) -> "BathState":
        p = np.zeros(n_spins + 1)
        p[0] = NvMode(nv_mode).sign
        return cls(p, nv_mode)

    def reset_nv(self, mode: NvMode) -> "BathState":
        """Instantaneous optical re-initialisation of the NV entry."""
        mode = NvMode(mode)
        p = self.p.copy()
        p[0] = mode.sign if mode is not NvMode.ket_plus1 else self.p[0]
        return BathState(p, mode, self.t)


def _checked(p: np.ndarray) -> np.ndarray:
    if np.any(np.abs(p) > 1 + BOUND_TOL):
        raise BathError(f"polarisation left [-1, 1] by {np.abs(p).max() - 1:.3g}; generator malformed")
    return np.clip(p, -1.0, 1.0)


def evolve(state: BathState, S: ScatteringMatrix, dt: float) -> BathState:
    """``p <- expm(S dt) p`` with NV gating applied for ``ket_plus1``."""
    if not dt > 0:
        raise BathError("dt must be positive")
    gen = S.gated() if state.nv_mode is NvMode.ket_plus1 else S
    p = _checked(gen.apply(np.asarray(state.p), dt))
    return BathState(p, state.nv_mode, state.t + dt)


# --- couplings for the coherent oscillation --------------------------------------------

def flip_flop_population(b: np.ndarray, tau, q: np.ndarray | None = None, exact_top: int = 10) -> np.ndarray:
    """Configuration-averaged NV population ``E[cos^2(Omega tau)]`` of a central-spin star.

    Spin j takes part with probability ``q_j`` (default 1/2). The ``exact_top``
    strongest spins are enumerated; the rest enter through their mean ``q b^2``.
    """
    b = np.asarray(b, dtype=float)
    tau = np.asarray(tau, dtype=float)
    q = np.full(b.shape, 0.5) if q is None else np.clip(np.asarray(q, dtype=float), 0.0, 1.0)
    order = np.argsort(b)[::-1]
    top, rest = order[:exact_top], order[exact_top:]
    base = float(np.sum(q[rest] * b[rest] ** 2))
    out = np.zeros_like(tau)
    bt2 = b[top] ** 2
    qt = q[top]
    for bits in itertools.product((0, 1), repeat=len(top)):
        m = np.array(bits, dtype=bool)
        prob = float(np.prod(np.where(m, qt, 1 - qt)))
        if prob == 0.0:
            continue
        omega = math.sqrt(base + float(bt2[m].sum()))
        out += prob * np.cos(omega * tau) ** 2
    return out


def first_minimum(tau: np.ndarray, y: np.ndarray) -> float:
    """Location of the first local minimum, refined by a parabola through three points."""
    i = np.flatnonzero((y[1:-1] < y[:-2]) & (y[1:-1] <= y[2:])) + 1
    if i.size == 0:
        return math.nan
    k = int(i[0])
    y0, y1, y2 = y[k - 1], y[k], y[k + 1]
    den = y0 - 2 * y1 + y2
    shift = 0.5 * (y0 - y2) / den if den > 0 else 0.0
    return float(tau[k] + shift * (tau[k + 1] - tau[k]))


def raw_couplings(hf: HyperfineSet) -> np.ndarray:
    return np.sqrt(hf.A_sq)


def calibrate_coupling_scale(hf: HyperfineSet, tau_opt: float = TAU_OPT, exact_top: int = 10) -> float:
    """Scale ``lam`` so the first population minimum of a fresh bath falls at ``tau_opt``.

    The trace depends on ``lam * tau`` only, so one unscaled trace fixes ``lam``.
    """
    b = raw_couplings(hf)
    omega_rms = math.sqrt(0.5 * float(np.sum(b**2)))
    t = np.linspace(0, 4 * (math.pi / 2) / omega_rms, 4001)[1:]
    tmin = first_minimum(t, flip_flop_population(b, t, exact_top=exact_top))
    if not math.isfinite(tmin):
        raise BathError("no population minimum found for calibration")
    return tmin / tau_opt


# --- protocols -------------------------------------------------------------------------

class SequenceKind(str, Enum):
    alternating_i = "alternating_i"
    polarise_ii = "polarise_ii"
    lifetime_iii = "lifetime_iii"
    lifetime_iv = "lifetime_iv"


@dataclass(frozen=True)
class PulseSequence:
    kind: SequenceKind
    n_steps: int = 50
    tau: float = TAU_OPT
    wait_times: tuple[float, ...] = ()
    rf_flip: str = "RF1 1.1 MHz / RF2 5.74 GHz"

    def __post_init__(self):
        object.__setattr__(self, "kind", SequenceKind(self.kind))
        if not self.tau > 0:
            raise BathError("tau must be positive")
        if self.n_steps < 1:
            raise BathError("n_steps must be >= 1")
        if self.kind in (SequenceKind.lifetime_iii, SequenceKind.lifetime_iv):
            if len(self.wait_times) < 3 or any(t < 0 for t in self.wait_times):
                raise BathError("lifetime sequences need >= 3 non-negative wait times")


@dataclass(frozen=True)
class BathParameters:
    tau_opt: float = TAU_OPT
    t1_res: float = T1_NV_RESONANT
    t1_phonon: float = T1_NV_PHONON
    t1_e: float = T1_E_DEFAULT
    exact_top: int = 10
    b_scale: float = 1.0


@dataclass
class BathModel:
    """A sampled bath with its step and wait generators and calibrated couplings."""

    sample: BathSample
    params: BathParameters
    pump: ScatteringMatrix
    wait: ScatteringMatrix
    wait_off: ScatteringMatrix  # NV parked in |+1>: no NV exchange, hyperfine-detuned bath
    coupling: np.ndarray  # calibrated NV-spin coupling b_j, rad/s

    @property
    def n(self) -> int:
        return self.sample.hf.n

    @property
    def core(self) -> np.ndarray:
        return self.coupling >= 1.0 / self.params.tau_opt


def build_bath_model(sample: BathSample, params: BathParameters = BathParameters()) -> BathModel:
    hf = sample.hf
    pump = build_scattering(hf, params.t1_e, gamma=1.0 / params.tau_opt, b_scale=params.b_scale)
    # on resonance the NV T1 is the summed NV-bath exchange: (gamma/pi) * 1 = 1/T1_res
    wait = build_scattering(hf, params.t1_e, gamma=math.pi / params.t1_res,
                            nv_leak=1.0 / params.t1_phonon, b_scale=params.b_scale)
    lam = calibrate_coupling_scale(hf, params.tau_opt, params.exact_top)
    det = hf.A_zz if hf.A_zz is not None else np.zeros(hf.n)
    wait_off = wait.gated(detuning=det)
    return BathModel(sample, params, pump, wait, wait_off, lam * raw_couplings(hf))


def polarisation_metric(state: BathState, coupling: np.ndarray, coupling_cutoff: float) -> tuple[float, float]:
    """Mean bath polarisation over the inner core (coupling >= cutoff) and the outer shell."""
    p = np.asarray(state.p)[1:]
    core = np.asarray(coupling) >= coupling_cutoff
    inner = float(p[core].mean()) if core.any() else math.nan
    outer = float(p[~core].mean()) if (~core).any() else math.nan
    return inner, outer


@dataclass
class ExperimentTrace:
    kind: SequenceKind
    x: np.ndarray          # step index or wait time (s)
    inner: np.ndarray
    outer: np.ndarray
    nv_pop: np.ndarray
    x_label: str = "step"
    fit: dict = field(default_factory=dict)


def _pump_steps(model: BathModel, state: BathState, modes, record):
    rows = []
    for mode in modes:
        state = state.reset_nv(mode)
        state = BathState(_checked(model.pump.apply(np.asarray(state.p), model.params.tau_opt)),
                          mode, state.t + model.params.tau_opt)
        if record:
            inner, outer = polarisation_metric(state, model.coupling, 1.0 / model.params.tau_opt)
            rows.append((inner, outer, state.p[0]))
    return state, rows


def exp_decay(t, a, k):
    return a * np.exp(-t / k)


def fit_lifetime(t, y) -> tuple[float, float]:
    """Single-exponential fit ``a exp(-t/k)``; returns ``(a, k)``."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    k0 = float(t[np.argmax(y <= y[0] / math.e)]) if np.any(y <= y[0] / math.e) else float(t[-1])
    (a, k), _ = curve_fit(exp_decay, t, y, p0=(y[0], max(k0, t[1])), maxfev=10000)
    return float(a), float(k)


def run_sequence(model: BathModel, seq: PulseSequence, state: BathState | None = None,
                 start: NvMode = NvMode.ket0) -> ExperimentTrace:
    """Run one protocol and return the per-step or per-wait trace.

    alternating_i  NV re-initialised alternately ket0 / ket_minus1; rows after ket0 shots
    polarise_ii    ``n_steps`` shots in ``start`` then ``n_steps`` in the opposite state
    lifetime_iii   ``n_steps`` ket0 shots, then free waits with the NV on resonance
    lifetime_iv    as iii but the NV is parked off resonance during the wait
    """
    state = state or BathState.fresh(model.n, start)
    kind = seq.kind
    if kind is SequenceKind.alternating_i:
        modes = [NvMode.ket0, NvMode.ket_minus1] * seq.n_steps
        state, rows = _pump_steps(model, state, modes, True)
        rows = rows[0::2]
        x = np.arange(1, len(rows) + 1)
        a = np.array(rows)
        return ExperimentTrace(kind, x, a[:, 0], a[:, 1], a[:, 2])
    if kind is SequenceKind.polarise_ii:
        other = NvMode.ket_minus1 if NvMode(start) is NvMode.ket0 else NvMode.ket0
        modes = [NvMode(start)] * seq.n_steps + [other] * seq.n_steps
        state, rows = _pump_steps(model, state, modes, True)
        a = np.array(rows)
        x = np.arange(1, len(rows) + 1)
        tr = ExperimentTrace(kind, x, a[:, 0], a[:, 1], a[:, 2])
        tr.fit = {"n90": buildup_steps(a[: seq.n_steps, 0])}
        return tr
    # lifetime sequences
    state, _ = _pump_steps(model, state, [NvMode.ket0] * seq.n_steps, False)
    p0 = np.asarray(state.reset_nv(NvMode.ket0).p)
    gen = model.wait_off if kind is SequenceKind.lifetime_iv else model.wait
    t = np.asarray(seq.wait_times, dtype=float)
    ps = np.array([_checked(q) for q in gen.apply_times(p0, t)])
    core = model.core
    inner = ps[:, 1:][:, core].mean(axis=1) if core.any() else np.full(len(t), math.nan)
    outer = ps[:, 1:][:, ~core].mean(axis=1)
    tr = ExperimentTrace(kind, t, inner, outer, ps[:, 0], x_label="wait_s")
    a, k = fit_lifetime(t, inner)
    tr.fit = {"amplitude": a, "lifetime_s": k}
    return tr


def buildup_steps(inner: np.ndarray, fraction: float = 0.9) -> int:
    """First step (1-based) at which the inner-core polarisation reaches ``fraction`` of its final value."""
    inner = np.asarray(inner)
    final = inner[-1]
    if not np.isfinite(final) or final == 0:
        return -1
    hit = np.flatnonzero(np.sign(final) * inner >= fraction * abs(final))
    return int(hit[0]) + 1


def flip_flop_trace(model: BathModel, tau_grid, state: BathState | None = None) -> tuple[np.ndarray, float]:
    """NV population versus free evolution time and the first-minimum time.

    The bath polarisation in ``state`` biases which spins can take part (default: fresh bath).
    """
    tau = np.asarray(tau_grid, dtype=float)
    if np.any(tau < 0) or np.any(np.diff(tau) <= 0):
        raise BathError("tau grid must be non-negative and ascending")
    p = np.zeros(model.n) if state is None else np.asarray(state.p)[1:]
    sign = 1 if state is None else (state.nv_mode.sign or 1)
    q = 0.5 * (1 - sign * p)
    pop = flip_flop_population(model.coupling, tau, q, model.params.exact_top)
    return pop, first_minimum(tau, pop)
