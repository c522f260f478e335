"""Scenario files: parsing, validation, execution and provenance.

A scenario is a YAML mapping with ``name``, ``experiment``, ``seed`` and per-module
blocks. Each run writes a data file (CSV or JSON), a JSON summary and a manifest
holding checksums. Data and summary both carry the scenario hash and seed, and
contain nothing time-dependent, so identical scenarios give identical checksums.
"""
from __future__ import annotations

import copy
import csv
import difflib
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import __version__
from .control import FeedforwardGains, PidGains, find_ultimate, simulate_closed_loop, zn_tune
from .env_trace import SyntheticTraceSpec, TemperatureTrace, load_trace, synthesize_trace
from .magnet_field import (MagnetModel, FieldModelError, nv_frequency, temperature_for_frequency,
                           temperature_step_resolution)
from .spectroscopy import (LADDER, LadderStage, OdmrLine, OdmrSettings, RelaxationModel, Resonance,
                           cr_spectrum, find_dips, odmr_sweep, stability_run, taylor_feedforward)
from .spin_bath import (BathConfig, BathParameters, NvMode, PulseSequence, build_bath_model,
                        flip_flop_trace, run_sequence, sample_bath)
from .thermal_plant import PlantParams, PlantError, settling_time

EXPERIMENTS = ("settle", "odmr_ramp", "cr_electron", "cr_gslac", "stability_ladder",
               "flipflop", "polarise", "lifetime")

REQUIRED_BLOCKS = {
    "settle": ("plant",),
    "odmr_ramp": ("magnet",),
    "cr_electron": ("magnet", "relaxation"),
    "cr_gslac": ("magnet", "relaxation"),
    "stability_ladder": ("plant", "magnet", "room"),
    "flipflop": ("bath",),
    "polarise": ("bath",),
    "lifetime": ("bath",),
}


class ScenarioError(ValueError):
    pass


# --- loading ---------------------------------------------------------------------------

def bundled_dir() -> Path:
    return Path(str(resources.files("thermomag") / "scenarios"))


def data_dir() -> Path:
    return Path(str(resources.files("thermomag") / "data"))


def list_scenarios() -> list[str]:
    return sorted(p.stem for p in bundled_dir().glob("*.yaml"))


def resolve(path_or_name: str | Path) -> Path:
    p = Path(path_or_name)
    if p.exists():
        return p
    cand = bundled_dir() / f"{path_or_name}.yaml"
    if cand.exists():
        return cand
    raise ScenarioError(f"no scenario file or bundled scenario named {str(path_or_name)!r}")


@dataclass
class Scenario:
    name: str
    experiment: str
    seed: int
    blocks: dict[str, Any]
    output: str | None = None
    source: Path | None = None

    @property
    def hash(self) -> str:
        doc = {"name": self.name, "experiment": self.experiment, "seed": self.seed, **self.blocks}
        blob = json.dumps(doc, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def block(self, key: str) -> dict:
        return dict(self.blocks.get(key) or {})


def parse(text: str, source: Path | None = None) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"YAML parse error: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a mapping")
    doc = copy.deepcopy(doc)
    for key in ("name", "experiment"):
        if key not in doc:
            raise ScenarioError(f"missing field '{key}'")
    seed = doc.pop("seed", 0)
    if not isinstance(seed, int):
        raise ScenarioError("field 'seed' must be an integer")
    return Scenario(str(doc.pop("name")), str(doc.pop("experiment")), seed, doc,
                    doc.pop("output", None), source)


def load(path_or_name) -> Scenario:
    p = resolve(path_or_name)
    return parse(p.read_text(), p)


def sub_seed(master: int, module: str, index: int = 0) -> int:
    """Stable 63-bit seed from (master, module, index)."""
    h = hashlib.sha256(f"{master}:{module}:{index}".encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


# --- block -> objects ----------------------------------------------------------------

def _build(cls, block: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(block) - names
    if unknown:
        raise ScenarioError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def plant_from(sc: Scenario) -> PlantParams:
    b = sc.block("plant")
    b.pop("tick", None)
    b.pop("substeps", None)
    return _build(PlantParams, b, "plant")


def magnet_from(sc: Scenario) -> MagnetModel:
    return _build(MagnetModel, sc.block("magnet"), "magnet")


def loop_timing(sc: Scenario) -> tuple[float, int]:
    b = sc.block("plant")
    return float(b.get("tick", 1.0)), int(b.get("substeps", 2))


def relaxation_from(sc: Scenario) -> RelaxationModel:
    b = sc.block("relaxation")
    res = tuple(_build(Resonance, r, "relaxation.resonances") for r in b.pop("resonances", []) or [])
    g = b.pop("gslac_feature", None)
    gf = _build(Resonance, {"species": "gslac", "center": 0.0, **g}, "relaxation.gslac_feature") if g else None
    return _build(RelaxationModel, {**b, "resonances": res, "gslac_feature": gf}, "relaxation")


def odmr_from(sc: Scenario) -> tuple[OdmrSettings, float]:
    b = sc.block("odmr")
    cadence = float(b.pop("cadence", 10.0))
    line = _build(OdmrLine, {k: b.pop(k) for k in ("linewidth_fwhm", "contrast") if k in b}, "odmr")
    return _build(OdmrSettings, {**b, "line": line}, "odmr"), cadence


def room_from(sc: Scenario) -> TemperatureTrace:
    b = sc.block("room")
    if "file" in b:
        p = Path(b["file"])
        if not p.is_absolute():
            base = sc.source.parent if sc.source else Path.cwd()
            p = base / p if (base / p).exists() else data_dir() / p
        return load_trace(p, b.get("time_col", 0), b.get("temp_col", 1), b.get("time_unit", "seconds"))
    if "synthetic" in b:
        spec = dict(b["synthetic"])
        spec.setdefault("seed", sub_seed(sc.seed, "env_trace"))
        return synthesize_trace(_build(SyntheticTraceSpec, spec, "room.synthetic"))
    raise ScenarioError("room: need 'file' or 'synthetic'")


def pid_from(sc: Scenario, plant: PlantParams, tick: float, substeps: int) -> PidGains:
    b = sc.block("control").get("pid", "auto")
    if b == "auto" or b is None:
        ku, pu = find_ultimate(plant, tick, substeps)
        return zn_tune(ku, pu, integral_limit=plant.drive_limit)
    return _build(PidGains, dict(b), "control.pid")


def feedforward_from(sc: Scenario, plant: PlantParams) -> tuple[FeedforwardGains, int]:
    b = dict(sc.block("control").get("feedforward") or {})
    every = int(b.pop("every_ticks", 60))
    alpha_M = float(b.get("alpha_M", 2.7))
    taylor = taylor_feedforward(plant, alpha_M)
    for key in ("alpha_R", "alpha_partial"):
        if b.get(key, "auto") == "auto":
            b[key] = getattr(taylor, key)
    return _build(FeedforwardGains, b, "control.feedforward"), every


def bath_from(sc: Scenario):
    b = sc.block("bath")
    cfg = {k: b.pop(k) for k in ("n_spins", "density", "nv_depth_context") if k in b}
    if "nv_axis" in b:
        ax = np.asarray(b.pop("nv_axis"), dtype=float)
        cfg["nv_axis"] = tuple(ax / np.linalg.norm(ax))
    cfg["seed"] = int(b.pop("seed", sub_seed(sc.seed, "spin_bath")))
    config = _build(BathConfig, cfg, "bath")
    params = _build(BathParameters, {k: b.pop(k) for k in list(b) if k in
                                     {f.name for f in fields(BathParameters)}}, "bath")
    return config, params, b


# --- validation ------------------------------------------------------------------------

def validate(path_or_name) -> list[str]:
    """Schema and physics checks without running. Empty list means valid."""
    findings: list[str] = []
    try:
        sc = load(path_or_name)
    except ScenarioError as exc:
        return [str(exc)]
    if sc.experiment not in EXPERIMENTS:
        hint = difflib.get_close_matches(sc.experiment, EXPERIMENTS, n=1)
        findings.append(f"experiment: unknown '{sc.experiment}'"
                        + (f"; did you mean '{hint[0]}'?" if hint else f"; choose from {list(EXPERIMENTS)}"))
        return findings
    for blk in REQUIRED_BLOCKS[sc.experiment]:
        if blk not in sc.blocks:
            findings.append(f"{blk}: block required for experiment '{sc.experiment}'")
    checks: list[Callable[[], None]] = []
    if "plant" in sc.blocks:
        def _plant():
            p = plant_from(sc)
            tick, sub = loop_timing(sc)
            if tick / sub > p.max_dt:
                findings.append(f"plant: integration step tick/substeps = {tick / sub} s exceeds the "
                                f"thermal_plant guard tau_sensor/5 = {p.max_dt} s")
        checks.append(_plant)
    if "magnet" in sc.blocks:
        def _magnet():
            m = magnet_from(sc)
            temps = []
            for key in ("temperatures", "temp_scan"):
                spec = sc.block("scan").get(key)
                if spec:
                    temps += list(_temps(spec))
            if temps and (min(temps) < m.window[0] or max(temps) > m.window[1]):
                findings.append(f"scan: temperatures {min(temps)}..{max(temps)} C leave the linear "
                                f"window {m.window}")
        checks.append(_magnet)
    for name, fn in (("relaxation", relaxation_from), ("odmr", odmr_from), ("bath", bath_from)):
        if name in sc.blocks:
            checks.append(lambda fn=fn: fn(sc))
    if "room" in sc.blocks:
        checks.append(lambda: room_from(sc))
    for chk in checks:
        try:
            chk()
        except (ScenarioError, PlantError, FieldModelError, ValueError, OSError) as exc:
            findings.append(str(exc))
    return findings


def _temps(spec) -> np.ndarray:
    if isinstance(spec, dict):
        return np.round(np.arange(spec["start"], spec["stop"] + 0.5 * spec["step"], spec["step"]), 10)
    return np.asarray(spec, dtype=float)


# --- experiments -----------------------------------------------------------------------

@dataclass
class Result:
    columns: list[str]
    rows: list[tuple]
    metrics: dict[str, Any]


def _exp_settle(sc: Scenario, stage=None) -> Result:
    plant = plant_from(sc)
    tick, sub = loop_timing(sc)
    pid = pid_from(sc, plant, tick, sub)
    s = sc.block("scan")
    steps = s.get("steps", [1.0, 0.15])
    band = float(s.get("band", 0.05))
    duration = float(s.get("duration", 1200.0))
    T0 = float(s.get("T0", 22.0))
    lead = 60
    n = int(duration / tick)
    rows, metrics = [], {"band_C": band, "pid": asdict(pid)}
    for A in steps:
        sp = np.r_[np.full(lead, T0), np.full(n - lead, T0 + A)]
        log = simulate_closed_loop(plant, pid, sp, np.full(n, T0), tick, sub)
        ts = settling_time(log.t[lead:], log.reading[lead:], T0 + A, band)
        over = float((np.max(np.sign(A) * (log.reading - T0)) - abs(A)) / abs(A))
        metrics[f"settle_s_{A:g}"] = ts
        metrics[f"overshoot_{A:g}"] = over
        rows += [(A, float(t), float(r), float(m)) for t, r, m in
                 zip(log.t, log.reading, log.T_magnet)]
    return Result(["step_C", "t_s", "reading_C", "T_magnet_C"], rows, metrics)


def _exp_odmr_ramp(sc: Scenario, stage=None) -> Result:
    m = magnet_from(sc)
    od, _ = odmr_from(sc)
    s = sc.block("scan")
    temps = _temps(s.get("temperatures", {"start": 22.0, "stop": 26.0, "step": 0.25}))
    rows, centers = [], []
    for i, T in enumerate(temps):
        f0 = float(nv_frequency(m, T))
        r = odmr_sweep(m, od.line, float(T), (f0 - od.half_span, f0 + od.half_span), od.points,
                       od.photons_per_point, seed=sub_seed(sc.seed, "spectroscopy", i))
        centers.append(r.fit.center)
        rows.append((float(T), f0, r.fit.center, r.fit.center_err, r.fit.reliable))
    slope, icpt = np.polyfit(temps, centers, 1)
    metrics = {"slope_MHz_per_C": float(slope), "span_MHz": float(centers[-1] - centers[0]),
               "resolution_kHz_per_0.01C": temperature_step_resolution(m, 0.01)}
    return Result(["T_set_C", "omega_true_MHz", "omega_fit_MHz", "fit_err_MHz", "reliable"], rows, metrics)


def _spectrum_result(spec, dips, extra) -> Result:
    rows = [(float(T), float(w), float(p), float(s)) for T, w, p, s in spec.rows()]
    metrics = {"n_dips": len(dips),
               "dips": [{"omega_nv_MHz": d.center, "T_C": d.T_center, "depth": d.depth} for d in dips],
               "tau_s": spec.tau, **extra}
    return Result(["T_set_C", "omega_nv_MHz", "pl", "sigma"], rows, metrics)


def _exp_cr_electron(sc: Scenario, stage=None) -> Result:
    m = magnet_from(sc)
    relax = relaxation_from(sc)
    s = sc.block("scan")
    temps = _temps(s.get("temp_scan", {"start": 18.0, "stop": 32.0, "step": 0.1}))
    spec = cr_spectrum(m, relax, temps, float(s.get("tau", 100e-6)), s.get("photons", 1e5),
                       sub_seed(sc.seed, "spectroscopy"))
    dips = find_dips(spec, float(s.get("min_sigma", 5.0)))
    return _spectrum_result(spec, dips, {})


def _exp_cr_gslac(sc: Scenario, stage=None) -> Result:
    m = magnet_from(sc)
    relax = relaxation_from(sc)
    s = sc.block("scan")
    span = float(s.get("omega_span", 2.0))
    pts = int(s.get("points", 161))
    omegas = np.linspace(-span, span, pts)
    temps = np.array([temperature_for_frequency(m, w, tol=1e-9) for w in omegas])
    spec = cr_spectrum(m, relax, temps, float(s.get("tau", 2e-6)), s.get("photons", 1e7),
                       sub_seed(sc.seed, "spectroscopy"))
    dips = find_dips(spec, float(s.get("min_sigma", 5.0)))
    return _spectrum_result(spec, dips, {"resolution_kHz_per_0.01C": temperature_step_resolution(m, 0.01)})


def _exp_ladder(sc: Scenario, stage=None) -> Result:
    plant = plant_from(sc)
    m = magnet_from(sc)
    tick, sub = loop_timing(sc)
    pid = pid_from(sc, plant, tick, sub)
    ff, every = feedforward_from(sc, plant)
    od, cadence = odmr_from(sc)
    trace = room_from(sc)
    c = sc.block("control")
    stages = [LadderStage(stage)] if stage else [LadderStage(x) for x in c.get("stages", [s.value for s in LADDER])]
    burn = float(c.get("burn_in", 7200.0))
    results = {}
    for k, st in enumerate(stages):
        results[st.value] = stability_run(trace, plant, m, st, pid, ff, od, cadence, tick, sub, every,
                                          burn_in=burn, seed=sub_seed(sc.seed, "spectroscopy", k))
    first = next(iter(results.values()))
    cols = ["t_s", "T_room_C"] + [f"omega_{s}_MHz" for s in results]
    rows = [tuple([float(t), float(T)] + [float(r.omega_fit[i]) for r in results.values()])
            for i, (t, T) in enumerate(zip(first.t, first.T_room))]
    pp = {s: r.peak_to_peak for s, r in results.items()}
    vals = list(pp.values())
    metrics = {"peak_to_peak_MHz": pp, "rms_MHz": {s: r.rms for s, r in results.items()},
               "true_peak_to_peak_MHz": {s: r.true_peak_to_peak for s, r in results.items()},
               "strictly_decreasing": all(a > b for a, b in zip(vals, vals[1:])),
               "pid": asdict(pid), "feedforward": asdict(ff), "burn_in_s": burn}
    return Result(cols, rows, metrics)


def _bath_model(sc: Scenario):
    config, params, rest = bath_from(sc)
    return build_bath_model(sample_bath(config), params), rest


def _exp_flipflop(sc: Scenario, stage=None) -> Result:
    model, rest = _bath_model(sc)
    tmax = float(rest.get("tau_max", 8e-6))
    grid = np.linspace(0, tmax, int(rest.get("tau_points", 801)))
    pop, tmin = flip_flop_trace(model, grid)
    rows = [(float(t), float(p)) for t, p in zip(grid, pop)]
    return Result(["tau_s", "nv_pop"], rows,
                  {"first_min_s": tmin, "n_spins": model.n, "bath_seed": model.sample.config.seed})


def _exp_polarise(sc: Scenario, stage=None) -> Result:
    model, rest = _bath_model(sc)
    n = int(rest.get("n_steps", 50))
    plus = run_sequence(model, PulseSequence("polarise_ii", n_steps=n))
    minus = run_sequence(model, PulseSequence("polarise_ii", n_steps=n), start=NvMode.ket_minus1)
    rows = [(int(k), float(a), float(b), float(c), float(d)) for k, a, b, c, d in
            zip(plus.x, plus.inner, plus.outer, plus.nv_pop, minus.inner)]
    sym = float(np.max(np.abs(plus.inner + minus.inner)))
    return Result(["step", "inner_core_pol", "outer_shell_pol", "nv_pop", "inner_core_pol_minus1_start"],
                  rows, {"n90": plus.fit["n90"], "core_size": int(model.core.sum()),
                         "saturation": float(plus.inner[n - 1]), "sign_asymmetry": sym,
                         "bath_seed": model.sample.config.seed, "n_spins": model.n})


def _exp_lifetime(sc: Scenario, stage=None) -> Result:
    model, rest = _bath_model(sc)
    n = int(rest.get("n_steps", 50))
    w3 = tuple(np.linspace(0, float(rest.get("wait_max_iii", 1.5e-3)), 41))
    w4 = tuple(np.linspace(0, float(rest.get("wait_max_iv", 60e-3)), 41))
    iii = run_sequence(model, PulseSequence("lifetime_iii", n_steps=n, wait_times=w3))
    iv = run_sequence(model, PulseSequence("lifetime_iv", n_steps=n, wait_times=w4))
    rows = [("iii", float(t), float(a), float(b), float(c)) for t, a, b, c in zip(iii.x, iii.inner, iii.outer, iii.nv_pop)]
    rows += [("iv", float(t), float(a), float(b), float(c)) for t, a, b, c in zip(iv.x, iv.inner, iv.outer, iv.nv_pop)]
    t3, t4 = iii.fit["lifetime_s"], iv.fit["lifetime_s"]
    return Result(["sequence", "wait_s", "inner_core_pol", "outer_shell_pol", "nv_pop"], rows,
                  {"lifetime_iii_s": t3, "lifetime_iv_s": t4, "ratio": t4 / t3,
                   "bath_seed": model.sample.config.seed, "n_spins": model.n})


RUNNERS = {"settle": _exp_settle, "odmr_ramp": _exp_odmr_ramp, "cr_electron": _exp_cr_electron,
           "cr_gslac": _exp_cr_gslac, "stability_ladder": _exp_ladder, "flipflop": _exp_flipflop,
           "polarise": _exp_polarise, "lifetime": _exp_lifetime}


# --- outputs ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    scenario: str
    scenario_hash: str
    seed: int
    tool_version: str
    wall_clock_s: float
    outputs: dict[str, str] = field(default_factory=dict)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(path_or_name, out: str | Path | None = None, seed: int | None = None, stage: str | None = None,
        fmt: str = "csv") -> tuple[dict, RunManifest]:
    """Execute a scenario; returns the summary dict and the manifest."""
    sc = load(path_or_name)
    if seed is not None:
        sc.seed = seed
    problems = validate(sc.source)
    if problems:
        raise ScenarioError("; ".join(problems))
    if sc.experiment not in RUNNERS:
        raise ScenarioError(f"experiment: unknown '{sc.experiment}'")
    if stage and sc.experiment != "stability_ladder":
        raise ScenarioError("--stage only applies to stability_ladder scenarios")
    t0 = time.perf_counter()
    res = RUNNERS[sc.experiment](sc, stage)
    wall = time.perf_counter() - t0
    out_dir = Path(out or sc.output or Path("runs") / sc.name)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = sc.hash
    header = {"scenario": sc.name, "experiment": sc.experiment, "scenario_hash": h, "seed": sc.seed,
              "tool_version": __version__}
    if stage:
        header["stage"] = stage
    if fmt == "csv":
        data_path = out_dir / f"{sc.name}.csv"
        buf = io.StringIO()
        for k, v in header.items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(res.columns)
        for r in res.rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
        data_path.write_text(buf.getvalue())
    elif fmt == "json":
        data_path = out_dir / f"{sc.name}.data.json"
        data_path.write_text(json.dumps(_jsonable({**header, "columns": res.columns, "rows": res.rows}),
                                        indent=1, sort_keys=True))
    else:
        raise ScenarioError(f"unknown format {fmt!r}; use csv or json")
    summary = _jsonable({**header, "metrics": res.metrics})
    sum_path = out_dir / f"{sc.name}.summary.json"
    sum_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    man = RunManifest(sc.name, h, sc.seed, __version__, round(wall, 3),
                      {p.name: _sha(p) for p in (data_path, sum_path)})
    (out_dir / "manifest.json").write_text(json.dumps(asdict(man), indent=2, sort_keys=True))
    return summary, man


# --- comparison ------------------------------------------------------------------------

def _summary_of(run_path) -> dict:
    p = Path(run_path)
    if p.is_dir():
        found = sorted(p.glob("*.summary.json"))
        if not found:
            raise ScenarioError(f"no summary in {p}")
        p = found[0]
    return json.loads(p.read_text())


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, bool):
            continue
        elif isinstance(v, (int, float)):
            out[key] = float(v)
    return out


def compare(run_a, run_b, metrics: list[str] | None = None) -> list[dict]:
    """Per-metric values, difference and ratio between two runs of the same experiment kind."""
    a, b = _summary_of(run_a), _summary_of(run_b)
    if a["experiment"] != b["experiment"]:
        raise ScenarioError(f"incompatible experiment kinds: {a['experiment']} vs {b['experiment']}")
    fa, fb = _flatten(a["metrics"]), _flatten(b["metrics"])
    keys = [k for k in fa if k in fb]
    if metrics:
        keys = [k for k in keys if any(k == m or k.startswith(m + ".") for m in metrics)]
    table = []
    for k in keys:
        va, vb = fa[k], fb[k]
        table.append({"metric": k, "a": va, "b": vb, "delta": vb - va,
                      "ratio": (vb / va) if va else (1.0 if vb == va else math.inf)})
    return table


def stage_compare(summary: dict, stage_a: str, stage_b: str) -> float:
    """Peak-to-peak ratio between two ladder stages of one run."""
    pp = summary["metrics"]["peak_to_peak_MHz"]
    return pp[stage_a] / pp[stage_b]
