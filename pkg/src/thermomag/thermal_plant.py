"""Two-node lumped thermal model of a TEC-driven magnet with a lagging thermistor.

Nodes
-----
magnet  relaxes toward its surroundings with ``tau_magnet`` and is pushed by the TEC
sensor  follows the magnet with ``tau_sensor``

The surroundings can optionally sit behind an enclosure, a first-order lag of the
lab room with ``tau_enclosure``. ``k_room_magnet`` is the share of the magnet's
passive exchange that bypasses the enclosure and sees the lab room directly.
The thermistor reading is contaminated by the enclosure air with weight
``k_room_sensor``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import least_squares

from .env_trace import TemperatureTrace


class PlantError(ValueError):
    pass


class CalibrationError(PlantError):
    def __init__(self, message: str, best_residual: float | None = None):
        self.best_residual = best_residual
        if best_residual is not None:
            message = f"{message} (best RMS residual {best_residual:.3g} C)"
        super().__init__(message)


@dataclass(frozen=True)
class PlantParams:
    tau_magnet: float = 120.0
    tau_sensor: float = 15.0
    k_room_magnet: float = 0.15
    k_room_sensor: float = 0.08
    drive_gain: float = 0.01
    drive_limit: float = 1.0
    tau_enclosure: float = 0.0

    def __post_init__(self):
        if not (self.tau_magnet > 0 and self.tau_sensor > 0):
            raise PlantError("time constants must be positive")
        if self.tau_enclosure < 0:
            raise PlantError("tau_enclosure must be >= 0 (0 disables the enclosure)")
        for name in ("k_room_magnet", "k_room_sensor"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PlantError(f"{name} must lie in [0, 1], got {v}")
        if not self.drive_limit > 0:
            raise PlantError("drive_limit must be positive")

    @property
    def max_dt(self) -> float:
        return self.tau_sensor / 5.0


@dataclass(frozen=True)
class PlantState:
    T_magnet: float
    T_sensor_raw: float
    u: float = 0.0
    t: float = 0.0
    T_enclosure: float | None = None

    @classmethod
    def at_equilibrium(cls, T: float, t: float = 0.0) -> "PlantState":
        return cls(T, T, 0.0, t, T)


def _enclosure(state: PlantState, T_room: float) -> float:
    return T_room if state.T_enclosure is None else state.T_enclosure


def plant_step(state: PlantState, params: PlantParams, u: float, T_room: float,
               dt: float) -> PlantState:
    """Advance the plant by one forward-Euler step.

    ``u`` is clipped to ``±drive_limit``. Raises :class:`PlantError` when
    ``dt`` exceeds ``tau_sensor / 5``.
    """
    if not dt > 0:
        raise PlantError("dt must be positive")
    if dt > params.max_dt * (1 + 1e-12):
        raise PlantError(f"dt={dt} s exceeds the integration limit tau_sensor/5 = {params.max_dt} s")
    u = float(np.clip(u, -params.drive_limit, params.drive_limit))
    T_enc = _enclosure(state, T_room)
    if params.tau_enclosure > 0:
        T_enc_next = T_enc + dt * (T_room - T_enc) / params.tau_enclosure
    else:
        T_enc, T_enc_next = T_room, T_room
    k = params.k_room_magnet
    T_env = k * T_room + (1.0 - k) * T_enc
    Tm, Ts = state.T_magnet, state.T_sensor_raw
    Tm_next = Tm + dt * ((T_env - Tm) / params.tau_magnet + params.drive_gain * u)
    Ts_next = Ts + dt * (Tm - Ts) / params.tau_sensor
    return PlantState(Tm_next, Ts_next, u, state.t + dt, T_enc_next)


def thermistor_reading(state: PlantState, params: PlantParams, T_room: float) -> float:
    """What the controller sees: sensor node blended with the (enclosure) room air."""
    ks = params.k_room_sensor
    return (1.0 - ks) * state.T_sensor_raw + ks * _enclosure(state, T_room)


def simulate_open_loop(params: PlantParams, u, T_room, dt: float,
                       state: PlantState | None = None) -> np.ndarray:
    """Run the plant on drive and room sequences; returns rows (t, T_magnet, T_sensor, reading)."""
    u = np.broadcast_to(np.asarray(u, dtype=float), np.shape(T_room) if np.ndim(T_room) else np.shape(u))
    T_room = np.broadcast_to(np.asarray(T_room, dtype=float), u.shape)
    if state is None:
        state = PlantState.at_equilibrium(float(T_room[0]))
    out = np.empty((len(u) + 1, 4))
    out[0] = state.t, state.T_magnet, state.T_sensor_raw, thermistor_reading(state, params, T_room[0])
    for i in range(len(u)):
        state = plant_step(state, params, u[i], T_room[i], dt)
        out[i + 1] = state.t, state.T_magnet, state.T_sensor_raw, thermistor_reading(state, params, T_room[i])
    return out


def settling_time(t, y, target: float, band: float = 0.05) -> float:
    """Time after ``t[0]`` at which ``y`` enters ``target ± band`` for good; ``inf`` if never."""
    t = np.asarray(t)
    outside = np.flatnonzero(np.abs(np.asarray(y) - target) > band)
    if outside.size == 0:
        return 0.0
    last = outside[-1]
    if last == len(t) - 1:
        return float("inf")
    return float(t[last + 1] - t[0])


def _detect_step(trace: TemperatureTrace, target_band: float) -> tuple[int, float, float]:
    """Index where a single step starts, plus the initial and final levels."""
    T = trace.T
    n = len(T)
    head = T[: max(3, n // 20)]
    tail = T[-max(3, n // 10):]
    y0, y1 = float(np.median(head)), float(np.median(tail))
    amp = y1 - y0
    if abs(amp) <= target_band:
        raise CalibrationError("no step detected")
    frac = (T - y0) / amp
    # count upward crossings of the half-way level; a single step crosses once
    # after smoothing out noise at the band scale
    hyst = min(0.25, target_band / abs(amp))
    state, crossings, start = 0, 0, None
    for i, f in enumerate(frac):
        if state == 0 and f > 0.5 + hyst:
            state, crossings = 1, crossings + 1
            start = i if start is None else start
        elif state == 1 and f < 0.5 - hyst:
            state = 0
    if crossings > 1:
        raise CalibrationError("multiple steps")
    onset = int(np.flatnonzero(np.abs(frac) > hyst)[0])
    return max(onset - 1, 0), y0, y1


def step_response(params: PlantParams, t, t_step: float, amplitude: float, T0: float = 22.0) -> np.ndarray:
    """Open-loop thermistor reading for a drive step of ``amplitude`` (drive units) at ``t_step``.

    The room sits at ``T0``. ``t`` must be uniformly spaced with spacing below the dt guard.
    """
    t = np.asarray(t, dtype=float)
    dt = float(t[1] - t[0])
    sub = max(1, int(np.ceil(dt / params.max_dt)))
    h = dt / sub
    state = PlantState.at_equilibrium(T0, t[0])
    y = np.empty(len(t))
    y[0] = thermistor_reading(state, params, T0)
    for i in range(1, len(t)):
        u = amplitude if t[i - 1] >= t_step else 0.0
        for _ in range(sub):
            state = plant_step(state, params, u, T0, h)
        y[i] = thermistor_reading(state, params, T0)
    return y


def calibrate_time_constants(step_response_trace: TemperatureTrace, target_band: float = 0.05,
                             base: PlantParams | None = None, drive_amplitude: float = 1.0,
                             rms_tol: float | None = None) -> PlantParams:
    """Fit ``tau_magnet`` and ``tau_sensor`` to an open-loop drive-step response.

    The trace is the thermistor reading with room fixed at its initial level and a
    drive step of ``drive_amplitude`` applied once. ``base`` supplies the other
    parameters. Raises :class:`CalibrationError` for flat or multi-step traces, or
    when the fit RMS exceeds ``rms_tol`` (default: ``target_band``).
    """
    base = base or PlantParams()
    rms_tol = target_band if rms_tol is None else rms_tol
    idx, y0, y1 = _detect_step(step_response_trace, target_band)
    t = step_response_trace.t
    T = step_response_trace.T

    def model(x, t_step):
        tm, ts = np.exp(x)
        return step_response(replace(base, tau_magnet=tm, tau_sensor=ts), t, t_step,
                             drive_amplitude, y0)

    # time constants below a quarter of the sample spacing are unresolvable and
    # would force thousands of Euler substeps per sample
    dt = float(np.min(np.diff(t)))
    lo, hi = np.log(dt / 4), np.log(100 * (t[-1] - t[0]))
    # the sensor lag hides the true onset, so a few earlier samples are tried as the step time
    best = None
    for k in range(max(0, idx - 8), idx + 1):
        t_step = float(t[k])
        t63 = t[np.argmax((T - y0) / (y1 - y0) >= 0.63)] - t_step
        x0 = np.clip(np.log([max(t63, 1.0), max(t63 / 8, 0.5)]), lo + 1e-9, hi - 1e-9)
        try:
            sol = least_squares(lambda x: model(x, t_step) - T, x0, bounds=(lo, hi), max_nfev=200)
        except PlantError as exc:
            raise CalibrationError(f"fit failed: {exc}") from exc
        rms = float(np.sqrt(np.mean(sol.fun ** 2)))
        if best is None or rms < best[0]:
            best = (rms, sol)
    rms, sol = best
    if not sol.success or rms > rms_tol:
        raise CalibrationError("calibration did not converge", best_residual=rms)
    tm, ts = np.exp(sol.x)
    return replace(base, tau_magnet=float(tm), tau_sensor=float(ts))
