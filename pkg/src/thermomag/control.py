"""Inner PID loop on the thermistor reading and outer set-point feedforward from the room.

The PID uses derivative-on-measurement and keeps its integral term already
multiplied by ``ki`` so that the anti-windup clamp is expressed in drive units.
The feedforward shifts the set point by a proportional term in the room
temperature change since loop activation and a smoothed room derivative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.signal import savgol_coeffs

from .thermal_plant import PlantParams, PlantState, plant_step, thermistor_reading


class ControlError(ValueError):
    pass


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float = 0.0
    kd: float = 0.0
    integral_limit: float = 1.0

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ControlError("PID gains must be non-negative")
        if not self.integral_limit > 0:
            raise ControlError("integral_limit must be positive")


@dataclass(frozen=True)
class FeedforwardGains:
    alpha_R: float = 0.0        # MHz/C
    alpha_partial: float = 0.0  # MHz*s/C
    alpha_M: float = 2.7        # MHz/C
    sg_window: int = 21
    sg_order: int = 2

    def __post_init__(self):
        if not self.alpha_M > 0:
            raise ControlError("alpha_M must be positive")
        if self.sg_window % 2 == 0 or not self.sg_window > self.sg_order >= 1:
            raise ControlError("sg_window must be odd and exceed sg_order >= 1")


@dataclass(frozen=True)
class ControllerState:
    integral: float = 0.0          # ki * integral of error, drive units
    last_error: float = 0.0
    last_measured: float | None = None
    T_R_baseline: float | None = None
    derivative_buffer: tuple[float, ...] = ()
    set_point_base: float = 22.0


# --- PID -----------------------------------------------------------------------------

def pid_step(state: ControllerState, gains: PidGains, measured: float, set_point: float,
             dt: float, drive_limit: float = math.inf) -> tuple[float, ControllerState]:
    """One PID update. Returns the saturated drive and the new state."""
    if not dt > 0:
        raise ControlError("dt must be positive")
    e = set_point - measured
    lim = gains.integral_limit
    integral = min(max(state.integral + gains.ki * e * dt, -lim), lim)
    d = 0.0 if state.last_measured is None else -(measured - state.last_measured) / dt
    u = gains.kp * e + integral + gains.kd * d
    u = min(max(u, -drive_limit), drive_limit)
    return u, replace(state, integral=integral, last_error=e, last_measured=measured)


ZN_TABLE = {"p": (0.5, None, None), "pi": (0.45, 1.2, None), "pid": (0.6, 2.0, 0.125)}


def zn_tune(ultimate_gain: float, ultimate_period: float, kind: str = "pid",
            integral_limit: float = 1.0) -> PidGains:
    """Closed-loop Ziegler-Nichols table (kp = 0.6 Ku, ki = 2 kp/Pu, kd = kp Pu/8 for PID)."""
    if not (ultimate_gain > 0 and ultimate_period > 0):
        raise ControlError("ultimate gain and period must be positive")
    kp_f, ki_f, kd_f = ZN_TABLE[kind]
    kp = kp_f * ultimate_gain
    ki = ki_f * kp / ultimate_period if ki_f else 0.0
    kd = kd_f * kp * ultimate_period if kd_f else 0.0
    return PidGains(kp, ki, kd, integral_limit)


# --- closed loop ---------------------------------------------------------------------

@dataclass
class LoopLog:
    t: np.ndarray
    set_point: np.ndarray
    reading: np.ndarray
    T_magnet: np.ndarray
    u: np.ndarray


def simulate_closed_loop(plant: PlantParams, gains: PidGains | None, set_point, T_room,
                         tick: float = 1.0, substeps: int = 2,
                         state: PlantState | None = None,
                         feedforward: FeedforwardGains | None = None,
                         room_probe=None, ff_every: int = 1,
                         saturate: bool = True) -> LoopLog:
    """Run PID (+ optional feedforward) against the plant for ``len(T_room)`` ticks.

    ``set_point`` is a scalar or per-tick array and acts as the feedforward base.
    ``T_room`` is the room temperature per tick. ``room_probe`` is what the
    feedforward sees (defaults to ``T_room``); it is averaged over blocks of
    ``ff_every`` ticks and the set-point correction updates once per block, so the derivative
    filter runs at ``tick * ff_every`` spacing. ``gains=None``
    leaves the TEC off.
    """
    T_room = np.asarray(T_room, dtype=float)
    n = len(T_room)
    sp = np.broadcast_to(np.asarray(set_point, dtype=float), (n,))
    probe = T_room if room_probe is None else np.asarray(room_probe, dtype=float)
    h = tick / substeps
    if state is None:
        state = PlantState.at_equilibrium(float(T_room[0]))
    limit = plant.drive_limit if saturate else math.inf
    p = plant if saturate else replace(plant, drive_limit=math.inf)
    cs = ControllerState(set_point_base=float(sp[0]))
    log = LoopLog(*(np.empty(n) for _ in range(5)))
    shift = 0.0
    for i in range(n):
        reading = thermistor_reading(state, plant, T_room[i])
        target = float(sp[i])
        if feedforward is not None:
            if i % ff_every == 0:
                cs = replace(cs, set_point_base=target)
                seen = float(probe[max(0, i - ff_every + 1): i + 1].mean())
                ff_sp, cs = feedforward_setpoint(cs, feedforward, seen, tick * ff_every)
                shift = ff_sp - target
            # the correction is held between updates; base set-point changes pass straight through
            target = target + shift
        if gains is None:
            u = 0.0
        else:
            u, cs = pid_step(cs, gains, reading, target, tick, limit)
        log.t[i], log.set_point[i], log.reading[i] = state.t, target, reading
        log.T_magnet[i], log.u[i] = state.T_magnet, u
        for _ in range(substeps):
            state = plant_step(state, p, u, T_room[i], h)
    return log


def _oscillation(y: np.ndarray, t: np.ndarray) -> tuple[float, float] | None:
    """Amplitude ratio and period from the last few extrema of ``y``; None when decayed."""
    y = y - y[-len(y) // 4:].mean()
    peaks = np.flatnonzero((y[1:-1] > y[:-2]) & (y[1:-1] >= y[2:]) & (y[1:-1] > 0)) + 1
    if len(peaks) < 4:
        return None
    amps = y[peaks]
    if amps[-1] < 1e-12 * max(1.0, abs(amps[0])):
        return None
    ratio = float((amps[-1] / amps[-3]) ** 0.5)
    period = float(np.mean(np.diff(t[peaks[-4:]])))
    return ratio, period


def find_ultimate(plant: PlantParams, tick: float = 1.0, substeps: int = 2,
                  gain_cap: float = 1e4, duration: float | None = None,
                  max_iter: int = 80) -> tuple[float, float]:
    """Ultimate gain and period of the proportional-only loop, by bisection on the gain.

    The loop is run without drive saturation. An oscillation whose period is two
    controller ticks or less is a sampling artefact and does not count.
    """
    duration = duration or 40 * plant.tau_magnet
    n = int(duration / tick)
    T0 = 22.0
    room = np.full(n, T0)
    sp = np.full(n, T0 + 0.1)

    def probe(k: float):
        log = simulate_closed_loop(plant, PidGains(k, 0, 0), sp, room, tick, substeps,
                                   saturate=False)
        if not np.all(np.isfinite(log.reading)) or np.abs(log.reading).max() > 1e6:
            return 2.0, None
        osc = _oscillation(log.reading[n // 4:], log.t[n // 4:])
        if osc is None:
            return 0.0, None
        return osc

    lo, hi = 0.0, None
    k = 1.0
    while hi is None:
        ratio, period = probe(k)
        if ratio > 1.0:
            hi = k
        else:
            lo = k
            k *= 2
            if k > gain_cap:
                raise ControlError("no sustained oscillation below the gain cap")
    for _ in range(max_iter):
        k = 0.5 * (lo + hi)
        ratio, period = probe(k)
        if period is not None and 0.95 <= ratio <= 1.05:
            if period <= 2.0 * tick * 1.05:
                raise ControlError("no sustained oscillation (only a sampling-rate limit cycle)")
            return k, period
        if ratio > 1.0:
            hi = k
        else:
            lo = k
    raise ControlError("no sustained oscillation found within iteration budget")


# --- feedforward ---------------------------------------------------------------------

@lru_cache(maxsize=64)
def _sg_end_coeffs(window: int, order: int, dt: float) -> np.ndarray:
    return savgol_coeffs(window, order, deriv=1, delta=dt, pos=window - 1, use="dot")


def sg_derivative(buffer: Sequence[float], dt: float, order: int = 2) -> float:
    """Savitzky-Golay first derivative evaluated at the newest sample (causal).

    Oldest sample first. Raises :class:`ControlError` if ``order`` is not below
    the window length.
    """
    buf = np.asarray(buffer, dtype=float)
    w = len(buf)
    if order < 1 or order >= w:
        raise ControlError(f"need 1 <= order < window, got order={order}, window={w}")
    if not dt > 0:
        raise ControlError("dt must be positive")
    # the weights sum to zero, so referencing the newest sample changes nothing
    # analytically but makes a constant buffer give exactly 0.0
    return float(_sg_end_coeffs(w, order, float(dt)) @ (buf - buf[-1]))


def feedforward_setpoint(state: ControllerState, gains: FeedforwardGains, T_R_now: float,
                         dt: float) -> tuple[float, ControllerState]:
    """Shift the base set point from the room change and its smoothed rate."""
    if not dt > 0:
        raise ControlError("dt must be positive")
    baseline = T_R_now if state.T_R_baseline is None else state.T_R_baseline
    buf = (state.derivative_buffer + (float(T_R_now),))[-gains.sg_window:]
    dTR = T_R_now - baseline
    rate = sg_derivative(buf, dt, gains.sg_order) if len(buf) == gains.sg_window else 0.0
    sp = (state.set_point_base
          - (gains.alpha_R / gains.alpha_M) * dTR
          + (gains.alpha_partial / gains.alpha_M) * rate)
    return sp, replace(state, T_R_baseline=baseline, derivative_buffer=buf)


def grid_search(objective: Callable[[float, float], float], alpha_R_grid: Sequence[float],
                alpha_partial_grid: Sequence[float]) -> tuple[float, float, float]:
    """Exhaustive search returning ``(alpha_R, alpha_partial, best objective)``."""
    best = (math.nan, math.nan, math.inf)
    for a in alpha_R_grid:
        for b in alpha_partial_grid:
            v = objective(a, b)
            if v < best[2]:
                best = (float(a), float(b), float(v))
    return best
