"""Room-temperature time series: CSV ingestion, synthetic ambient drift, interpolation."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

T_MIN_C = -50.0
T_MAX_C = 150.0

_TIME_UNITS = {"seconds": 1.0, "s": 1.0, "minutes": 60.0, "min": 60.0, "hours": 3600.0, "h": 3600.0}
_SPLIT = re.compile(r"[,\s]+")


class TraceError(ValueError):
    """Raised for malformed or out-of-contract temperature traces."""

    def __init__(self, message: str, line: int | None = None, index: int | None = None):
        self.line = line
        self.index = index
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TemperatureTrace:
    """Time-stamped temperatures in seconds and degrees Celsius."""

    t: np.ndarray
    T: np.ndarray
    dt_nominal: float
    label: str = ""

    def __post_init__(self):
        t, T = _frozen(self.t), _frozen(self.T)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "T", T)
        if t.ndim != 1 or t.shape != T.shape:
            raise TraceError("time and temperature columns must be 1-D and equal length")
        if len(t) == 0:
            raise TraceError("no samples")
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            raise TraceError(f"timestamps not strictly increasing at index {int(bad[0]) + 1}",
                             index=int(bad[0]) + 1)
        if not np.all(np.isfinite(T)) or T.min() < T_MIN_C or T.max() > T_MAX_C:
            raise TraceError(f"temperatures must be finite and within [{T_MIN_C}, {T_MAX_C}] C")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.t.tolist(), self.T.tolist()))

    def peak_to_peak(self) -> float:
        return float(np.ptp(self.T))


@dataclass(frozen=True)
class SyntheticTraceSpec:
    duration: float = 20 * 3600.0
    dt: float = 10.0
    mean: float = 22.0
    drift_amplitude: float = 0.35
    drift_period: float = 8 * 3600.0
    noise_sigma: float = 0.0
    seed: int = 0
    label: str = "synthetic"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.duration < self.dt:
            raise ValueError("duration must be at least dt")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not self.drift_period > 0:
            raise ValueError("drift_period must be positive")


def load_trace(path, time_col: int = 0, temp_col: int = 1, time_unit: str = "seconds",
               label: str | None = None) -> TemperatureTrace:
    """Read a two-column temperature log.

    Comma- or whitespace-delimited; a single non-numeric header line is skipped.
    ``time_unit`` is one of seconds, minutes, hours. Lines starting with ``#`` are
    ignored.
    """
    try:
        scale = _TIME_UNITS[time_unit]
    except KeyError:
        raise TraceError(f"unknown time unit {time_unit!r}; use seconds, minutes or hours") from None
    path = Path(path)
    ts: list[float] = []
    Ts: list[float] = []
    seen_data = False
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cols = [c for c in _SPLIT.split(line) if c]
            try:
                tv = float(cols[time_col])
                Tv = float(cols[temp_col])
            except (ValueError, IndexError):
                if not seen_data and not ts:
                    # header row
                    seen_data = True
                    continue
                raise TraceError(f"cannot parse columns {time_col},{temp_col} from {line!r}",
                                 line=lineno) from None
            seen_data = True
            ts.append(tv * scale)
            Ts.append(Tv)
    if not ts:
        raise TraceError("no samples")
    t = np.asarray(ts)
    bad = np.flatnonzero(np.diff(t) <= 0)
    if bad.size:
        idx = (bad + 1).tolist()
        raise TraceError(f"non-monotone timestamps at sample index {idx}", index=idx[0])
    dt_nom = float(np.median(np.diff(t))) if len(t) > 1 else 0.0
    return TemperatureTrace(t, np.asarray(Ts), dt_nom, label if label is not None else path.stem)


def write_trace(trace: TemperatureTrace, path, header: bool = True) -> None:
    with Path(path).open("w") as fh:
        if header:
            fh.write("t_s,T_C\n")
        for tv, Tv in zip(trace.t, trace.T):
            fh.write(f"{tv:.6g},{Tv:.6f}\n")


def synthesize_trace(spec: SyntheticTraceSpec) -> TemperatureTrace:
    """Slow sinusoidal drift plus white Gaussian noise, reproducible from ``spec.seed``."""
    n = int(round(spec.duration / spec.dt)) + 1
    t = np.arange(n) * spec.dt
    drift = spec.drift_amplitude * np.sin(2 * np.pi * t / spec.drift_period)
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, spec.noise_sigma, n) if spec.noise_sigma > 0 else np.zeros(n)
    return TemperatureTrace(t, spec.mean + drift + noise, spec.dt, spec.label)


def drift_component(spec: SyntheticTraceSpec) -> np.ndarray:
    """The noiseless drift of :func:`synthesize_trace`, without the mean."""
    n = int(round(spec.duration / spec.dt)) + 1
    t = np.arange(n) * spec.dt
    return spec.drift_amplitude * np.sin(2 * np.pi * t / spec.drift_period)


def sample_at(trace: TemperatureTrace, t: float) -> float:
    if len(trace) < 2:
        raise TraceError("interpolation needs at least 2 samples")
    if t < trace.t[0] or t > trace.t[-1]:
        raise TraceError(f"t={t} outside [{trace.t[0]}, {trace.t[-1]}]")
    return float(np.interp(t, trace.t, trace.T))


def resample(trace: TemperatureTrace, times) -> np.ndarray:
    """Vectorised :func:`sample_at`; every time must lie inside the trace."""
    times = np.asarray(times, dtype=float)
    if len(trace) < 2:
        raise TraceError("interpolation needs at least 2 samples")
    if times.size and (times.min() < trace.t[0] or times.max() > trace.t[-1]):
        raise TraceError("requested times outside trace span")
    return np.interp(times, trace.t, trace.T)
