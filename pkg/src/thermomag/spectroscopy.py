"""Simulated measurements: ODMR sweeps, PL relaxometry, cross-relaxation spectra, stability runs.

ODMR is a Lorentzian dip in photon counts. Relaxometry reads out
``PL = 1 - c (1 - exp(-tau/T1))`` where T1 is shortened by Lorentzian resonance
terms whenever ``|omega_NV|`` meets an environmental Larmor frequency.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit
from scipy.signal import find_peaks

from .control import FeedforwardGains, PidGains, simulate_closed_loop
from .env_trace import TemperatureTrace, resample
from .magnet_field import MagnetModel, field_at, nv_frequency
from .thermal_plant import PlantParams

GAUSSIAN_ABOVE = 1000.0


class SpectroscopyError(ValueError):
    pass


@dataclass(frozen=True)
class OdmrLine:
    center: float = 0.0            # MHz; overridden by the magnet model in odmr_sweep
    linewidth_fwhm: float = 500.0  # kHz
    contrast: float = 0.15
    baseline_counts: float = 1.0

    def __post_init__(self):
        if not self.linewidth_fwhm > 0:
            raise SpectroscopyError("linewidth must be positive")
        if not 0 < self.contrast < 1:
            raise SpectroscopyError("contrast must be in (0, 1)")


@dataclass(frozen=True)
class Resonance:
    species: str
    rate: float    # s^-1 added to 1/T1 on resonance
    width: float   # MHz FWHM in omega_NV
    center: float | None = None  # MHz; None means gamma*B of the species

    def __post_init__(self):
        if self.rate < 0 or not self.width > 0:
            raise SpectroscopyError("resonance rate must be >= 0 and width > 0")


@dataclass(frozen=True)
class RelaxationModel:
    t1_baseline: float = 5e-3
    resonances: tuple[Resonance, ...] = ()
    gslac_feature: Resonance | None = None
    contrast: float = 0.15

    def __post_init__(self):
        if not self.t1_baseline > 0:
            raise SpectroscopyError("t1_baseline must be positive")

    def t1_effective(self, omega_nv, B, species_gamma: dict[str, float]):
        """Effective T1 in seconds at signed NV frequency ``omega_nv`` (MHz) and field ``B`` (G)."""
        w = np.abs(np.asarray(omega_nv, dtype=float))
        rate = np.full(w.shape, 1.0 / self.t1_baseline)
        feats = list(self.resonances) + ([self.gslac_feature] if self.gslac_feature else [])
        for r in feats:
            c = r.center if r.center is not None else species_gamma[r.species] * np.asarray(B)
            hw = 0.5 * r.width
            rate = rate + r.rate * hw**2 / ((w - c) ** 2 + hw**2)
        return 1.0 / rate


@dataclass
class LorentzFit:
    center: float
    fwhm: float
    depth: float
    baseline: float
    center_err: float
    reliable: bool


@dataclass
class SpectrumResult:
    """One spectrum. ``omega_nv`` holds the swept MW frequency for ODMR sweeps."""

    T_set: np.ndarray
    omega_nv: np.ndarray
    pl: np.ndarray
    sigma: np.ndarray
    tau: float | None = None
    meta: dict = field(default_factory=dict)
    fit: LorentzFit | None = None

    def __post_init__(self):
        n = len(self.omega_nv)
        if not (len(self.T_set) == len(self.pl) == len(self.sigma) == n):
            raise SpectroscopyError("axis and values must have equal length")

    def rows(self):
        return zip(self.T_set.tolist(), self.omega_nv.tolist(), self.pl.tolist(), self.sigma.tolist())


# --- noise -----------------------------------------------------------------------------

def shot_noise(mean_fraction, photons, rng: np.random.Generator):
    """Normalised counts and their sigma for a photon budget. ``photons=None`` is noiseless."""
    m = np.asarray(mean_fraction, dtype=float)
    if photons is None or math.isinf(photons):
        return m.copy(), np.zeros_like(m)
    lam = photons * m
    if photons * m.min(initial=np.inf) >= GAUSSIAN_ABOVE:
        counts = rng.normal(lam, np.sqrt(lam))
    else:
        counts = rng.poisson(lam).astype(float)
    return counts / photons, np.sqrt(np.maximum(lam, 1.0)) / photons


# --- ODMR ------------------------------------------------------------------------------

def lorentz_dip(f, center, fwhm, depth, baseline):
    hw2 = (0.5 * fwhm) ** 2
    return baseline * (1.0 - depth * hw2 / ((f - center) ** 2 + hw2))


def fit_lorentzian(x, y, sigma=None, p0=None) -> LorentzFit:
    """Least-squares Lorentzian dip fit. ``reliable`` is False when the centre leaves the data range."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if p0 is None:
        i = int(np.argmin(y))
        base = float(np.median(np.r_[y[: max(2, len(y) // 10)], y[-max(2, len(y) // 10):]]))
        depth = max(1e-6, 1.0 - y[i] / base) if base else 0.1
        p0 = (x[i], (x[-1] - x[0]) / 10, depth, base)
    s = None if sigma is None or not np.all(np.asarray(sigma) > 0) else sigma
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OptimizeWarning)
            popt, pcov = curve_fit(lorentz_dip, x, y, p0=p0, sigma=s, absolute_sigma=s is not None,
                                   maxfev=4000)
    except (RuntimeError, ValueError):
        return LorentzFit(float(p0[0]), float(p0[1]), float(p0[2]), float(p0[3]), math.inf, False)
    c, w, d, b = popt
    err = float(np.sqrt(pcov[0, 0])) if np.all(np.isfinite(pcov)) else math.inf
    reliable = bool(x.min() <= c <= x.max() and w > 0 and d > 0 and np.isfinite(err))
    return LorentzFit(float(c), float(abs(w)), float(d), float(b), err, reliable)


def odmr_sweep(model: MagnetModel, line: OdmrLine, T_magnet: float, freq_range: tuple[float, float],
               points: int, photons_per_point: float | None, seed: int | None = 0,
               fit: bool = True, rng: np.random.Generator | None = None) -> SpectrumResult:
    """Lorentzian ODMR dip at ``nv_frequency(T_magnet)``, optionally fitted.

    ``freq_range`` is (low, high) in MHz. A centre outside the range still returns a
    result; its fit is flagged unreliable.
    """
    if points < 3:
        raise SpectroscopyError("need at least 3 points")
    f0 = float(nv_frequency(model, T_magnet))
    f = np.linspace(freq_range[0], freq_range[1], points)
    mean = lorentz_dip(f, f0, line.linewidth_fwhm * 1e-3, line.contrast, 1.0)
    rng = rng if rng is not None else np.random.default_rng(seed)
    y, s = shot_noise(mean, photons_per_point, rng)
    res = SpectrumResult(np.full(points, float(T_magnet)), f, y, s, None,
                         {"kind": "odmr", "true_center_MHz": f0, "seed": seed})
    if fit:
        p0 = (f[int(np.argmin(y))], line.linewidth_fwhm * 1e-3, line.contrast, 1.0)
        res.fit = fit_lorentzian(f, y, s if photons_per_point else None, p0)
        if not (freq_range[0] <= f0 <= freq_range[1]):
            res.fit.reliable = False
    return res


# --- relaxometry -----------------------------------------------------------------------

def pl_mean(t1_effective, tau, contrast: float = 0.15):
    return 1.0 - contrast * (1.0 - np.exp(-np.asarray(tau) / np.asarray(t1_effective)))


def pl_readout(t1_effective: float, tau: float, photons: float | None = None, seed: int | None = 0,
               contrast: float = 0.15, rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Normalised PL after a dark wait ``tau`` and its shot-noise sigma."""
    if tau < 0:
        raise SpectroscopyError("tau must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(seed)
    y, s = shot_noise(np.atleast_1d(pl_mean(t1_effective, tau, contrast)), photons, rng)
    return float(y[0]), float(s[0])


def point_rng(seed: int | None, index: int) -> np.random.Generator:
    """Independent generator per spectrum point so evaluation order never matters."""
    return np.random.default_rng(None if seed is None else [int(seed), int(index)])


def cr_spectrum(model: MagnetModel, relax: RelaxationModel, temp_scan: Sequence[float], tau: float,
                photons: float | None, seed: int | None = 0) -> SpectrumResult:
    """PL after ``tau`` as the magnet temperature is scanned."""
    if not tau > 0:
        raise SpectroscopyError("tau must be positive")
    T = np.asarray(temp_scan, dtype=float)
    w = nv_frequency(model, T)
    B = field_at(model, T)
    gam = dict(model.constants.species())
    gam.update(dict(model.extra_species))
    t1 = relax.t1_effective(w, B, gam)
    pl = np.empty(len(T))
    sig = np.empty(len(T))
    for i in range(len(T)):
        pl[i], sig[i] = pl_readout(t1[i], tau, photons, contrast=relax.contrast, rng=point_rng(seed, i))
    return SpectrumResult(T, np.asarray(w, dtype=float), pl, sig, tau,
                          {"kind": "cr", "seed": seed, "B_ref": model.B_ref, "t1_eff": t1.tolist()})


@dataclass
class Dip:
    index: int
    omega_nv: float
    T_set: float
    center: float        # fitted, MHz in omega_NV
    T_center: float      # fitted centre mapped back to temperature
    depth: float


def find_dips(spec: SpectrumResult, min_sigma: float = 5.0, fit_halfwidth: int | None = None,
              min_depth: float | None = None) -> list[Dip]:
    """Locate dips in PL versus omega_NV and refine each with a local Lorentzian fit.

    A dip counts when its prominence exceeds ``min_sigma`` times the median point
    sigma (or ``min_depth`` in the noiseless case).
    """
    x = spec.omega_nv
    order = np.argsort(x)
    xs, ys, Ts = x[order], spec.pl[order], spec.T_set[order]
    noise = float(np.median(spec.sigma))
    prom = min_sigma * noise if noise > 0 else (min_depth or 1e-6)
    if min_depth is not None:
        prom = max(prom, min_depth)
    idx, props = find_peaks(-ys, prominence=prom)
    dips = []
    for k, i in enumerate(idx):
        lb, rb = props["left_bases"][k], props["right_bases"][k]
        hw = fit_halfwidth or max(3, (rb - lb) // 2)
        lo, hi = max(0, i - hw), min(len(xs), i + hw + 1)
        lo, hi = max(lo, lb), min(hi, rb + 1)
        if hi - lo >= 5:
            base = float(max(ys[lo], ys[hi - 1]))
            f = fit_lorentzian(xs[lo:hi], ys[lo:hi], None,
                               (xs[i], (xs[hi - 1] - xs[lo]) / 3, max(1e-6, 1 - ys[i] / base), base))
            c = f.center if f.reliable else float(xs[i])
        else:
            c = float(xs[i])
        T_c = float(np.interp(c, xs, Ts)) if xs[0] <= c <= xs[-1] else float(Ts[i])
        dips.append(Dip(int(order[i]), float(xs[i]), float(Ts[i]), float(c), T_c, float(props["prominences"][k])))
    return dips


# --- stability runs --------------------------------------------------------------------

class LadderStage(str, Enum):
    none = "none"
    pid = "pid"
    pid_ff_p = "pid+ff_p"
    pid_ff_pd = "pid+ff_pd"


LADDER = (LadderStage.none, LadderStage.pid, LadderStage.pid_ff_p, LadderStage.pid_ff_pd)


@dataclass(frozen=True)
class OdmrSettings:
    line: OdmrLine = OdmrLine()
    half_span: float = 4.0        # MHz either side of the nominal frequency
    points: int = 81
    photons_per_point: float | None = 2e6


@dataclass
class StabilityResult:
    stage: LadderStage
    t: np.ndarray
    omega_fit: np.ndarray
    omega_true: np.ndarray
    T_magnet: np.ndarray
    T_room: np.ndarray
    burn_in: float
    seed: int | None

    def _window(self, a):
        return a[self.t >= self.t[0] + self.burn_in]

    @property
    def peak_to_peak(self) -> float:
        return float(np.ptp(self._window(self.omega_fit)))

    @property
    def rms(self) -> float:
        w = self._window(self.omega_fit)
        return float(np.std(w))

    @property
    def true_peak_to_peak(self) -> float:
        return float(np.ptp(self._window(self.omega_true)))


def stability_run(trace: TemperatureTrace, plant: PlantParams, magnet: MagnetModel,
                  stage: LadderStage | str, pid: PidGains, feedforward: FeedforwardGains,
                  odmr: OdmrSettings | None = OdmrSettings(), odmr_cadence: float = 10.0,
                  tick: float = 1.0, substeps: int = 2, ff_every: int = 60,
                  set_point: float | None = None, burn_in: float = 7200.0,
                  seed: int | None = 0) -> StabilityResult:
    """Closed-loop co-simulation of one ladder stage with an ODMR fit every ``odmr_cadence`` s.

    ``none`` leaves the TEC off, ``pid`` regulates the thermistor reading,
    ``pid+ff_p`` adds the proportional room feedforward and ``pid+ff_pd`` the
    smoothed room derivative as well. Statistics skip the first ``burn_in`` seconds.
    ``odmr=None`` skips the sweeps and reports the true frequency.
    """
    stage = LadderStage(stage)
    if trace.duration < 2 * 3600:
        raise SpectroscopyError("stability runs need at least 2 hours of room trace")
    n = int(trace.duration // tick) + 1
    t = trace.t[0] + np.arange(n) * tick
    room = resample(trace, t)
    sp = room[0] if set_point is None else set_point
    ff = None
    if stage in (LadderStage.pid_ff_p, LadderStage.pid_ff_pd):
        ff = feedforward if stage is LadderStage.pid_ff_pd else replace(feedforward, alpha_partial=0.0)
    log = simulate_closed_loop(plant, None if stage is LadderStage.none else pid, sp, room, tick,
                               substeps, feedforward=ff, ff_every=ff_every)
    every = max(1, int(round(odmr_cadence / tick)))
    idx = np.arange(0, n, every)
    Tm = log.T_magnet[idx]
    w_true = np.asarray(nv_frequency(magnet, Tm), dtype=float)
    w0 = float(nv_frequency(magnet, sp))
    rng = np.random.default_rng(seed)
    fits = w_true.copy()
    for j, T in enumerate(Tm if odmr is not None else ()):
        r = odmr_sweep(magnet, odmr.line, float(T), (w0 - odmr.half_span, w0 + odmr.half_span),
                       odmr.points, odmr.photons_per_point, rng=rng)
        fits[j] = r.fit.center
    return StabilityResult(stage, log.t[idx], fits, w_true, Tm, room[idx], burn_in, seed)


def run_ladder(trace, plant, magnet, pid, feedforward, stages=LADDER, **kw) -> dict[str, StabilityResult]:
    return {LadderStage(s).value: stability_run(trace, plant, magnet, s, pid, feedforward, **kw)
            for s in stages}


def taylor_feedforward(plant: PlantParams, alpha_M: float, **kw) -> FeedforwardGains:
    """Feedforward gains that cancel the thermistor contamination to first and second order.

    Holding the reading fixed drags the magnet by ``-k_room_sensor/(1-k_room_sensor)``
    times the enclosure temperature. Matching the set-point shift to the first two
    terms of the enclosure lag expansion gives ``alpha_R = -k alpha_M`` and
    ``alpha_partial = -k tau_enclosure alpha_M`` with ``k = k_room_sensor``.
    """
    k = plant.k_room_sensor
    return FeedforwardGains(alpha_R=-k * alpha_M, alpha_partial=-k * plant.tau_enclosure * alpha_M,
                            alpha_M=alpha_M, **kw)


def tune_feedforward(trace, plant, magnet, pid, base: FeedforwardGains, alpha_R_grid,
                     alpha_partial_grid, **kw) -> tuple[FeedforwardGains, float]:
    """Grid search of the feedforward gains minimising the true-frequency peak-to-peak."""
    from .control import grid_search

    def objective(a, b):
        ff = replace(base, alpha_R=a, alpha_partial=b)
        stage = LadderStage.pid_ff_pd if b != 0 else LadderStage.pid_ff_p
        r = stability_run(trace, plant, magnet, stage, pid, ff, odmr=None, odmr_cadence=60.0, **kw)
        return r.true_peak_to_peak

    a, b, v = grid_search(objective, alpha_R_grid, alpha_partial_grid)
    return replace(base, alpha_R=a, alpha_partial=b), v
