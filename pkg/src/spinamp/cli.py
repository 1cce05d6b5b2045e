"""Command-line scenario runner.

Every subcommand builds the same kind of configuration document that a
scenario file holds, so each flag has a config-file equivalent.  Precedence,
lowest first: built-in defaults, ``--config`` file, explicit flags.

Scenario documents (YAML, ``schema_version: 1``) name a ``pipeline`` and
carry the sections that pipeline reads:

``sample``
    ``nuclide`` or ``gamma_mhz_per_t``; ``n`` and ``P0``, or ``nVP0``
    (optionally with ``P0``); ``V``, ``T1``, ``T2``, ``xi``.  Quantities are
    numbers in SI or strings such as ``"0.5 mL"``, ``"0.02 cm^-3"``.
``drive``
    ``amplitude``, ``phase`` (rad), ``nu0`` (Larmor frequency used by the
    simulations), ``detuning_hz``.
``protocol``
    ``sensing_time``, ``window`` (rect or hann), ``integer_periods``,
    ``model`` (transient, steady or bloch), ``noise_rms``, ``dt``,
    ``kappa`` (number or ``calibrate``), ``relaxation``.
``scan`` / ``evolve`` / ``cluster`` / ``spectrum`` / ``manifolds`` /
``measurements`` / ``fit``
    pipeline specific, see ``DEFAULTS``.

``seed`` is required whenever noise is requested.  Outputs land in
``--out``, else ``$SPINAMP_OUTDIR/<name>``, else ``output_dir`` from the
config, else ``./spinamp-out/<name>``.  Each bundle holds CSV/JSON
artifacts and ``manifest.json``; ``spinamp run manifest.json`` regenerates
the same bundle.

Exit status: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import shutil
import sys
import tempfile
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional

import numpy as np
import yaml

from . import __version__
from .bloch import BlochParams, calibrate_kappa, dipolar_field, evolve, saturation_scale, saturation_scan
from .constants import DEFAULT_CONSTANTS, PhysicalConstants, load_constants
from .core import DriveField, SampleSpec, amplification_steady, amplification_transient, magnetization
from .errors import ConfigError, NumericalError
from .fitting import MODELS, ModelSpec, fit, read_data_csv
from .series import TimeSeries, format_float, write_csv
from .signal import (SensingProtocol, dispersive_extrema, dispersive_scan, extract, noise_rng,
                     phasor, ratio, synthesize, write_scan_csv, interference_ratio,
                     interference_ratio_first_order)
from .units import gamma_to_mhz_per_t, parse_quantity
from . import zerofield as zf

SCHEMA_VERSION = 1
ENV_OUTDIR = "SPINAMP_OUTDIR"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# -- schema -------------------------------------------------------------------

class _Spec:
    def check(self, value, path):  # pragma: no cover - interface
        raise NotImplementedError


class Num(_Spec):
    def __init__(self, positive=False, nonneg=False):
        self.positive, self.nonneg = positive, nonneg

    def check(self, value, path):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        v = float(value)
        if not math.isfinite(v):
            raise ConfigError("must be finite", path)
        if self.positive and not v > 0:
            raise ConfigError("must be positive", path)
        if self.nonneg and v < 0:
            raise ConfigError("must be non-negative", path)
        return v


class Int(_Spec):
    def __init__(self, minimum=None):
        self.minimum = minimum

    def check(self, value, path):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        if self.minimum is not None and value < self.minimum:
            raise ConfigError(f"must be >= {self.minimum}", path)
        return int(value)


class Str(_Spec):
    def __init__(self, choices=None):
        self.choices = choices

    def check(self, value, path):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        if self.choices and value not in self.choices:
            raise ConfigError(f"must be one of {list(self.choices)}, got {value!r}", path)
        return value


class Bool(_Spec):
    def check(self, value, path):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value


class Qty(_Spec):
    def __init__(self, unit, positive=False, nonneg=False):
        self.unit, self.positive, self.nonneg = unit, positive, nonneg

    def check(self, value, path):
        try:
            v = parse_quantity(value, self.unit)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), path) from None
        return Num(self.positive, self.nonneg).check(v, path)


class ListOf(_Spec):
    def __init__(self, item, min_len=1):
        self.item, self.min_len = item, min_len

    def check(self, value, path):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", path)
        if len(value) < self.min_len:
            raise ConfigError(f"needs at least {self.min_len} entries", path)
        return [self.item.check(v, f"{path}[{i}]") for i, v in enumerate(value)]


class MapOf(_Spec):
    def __init__(self, item):
        self.item = item

    def check(self, value, path):
        if not isinstance(value, Mapping):
            raise ConfigError(f"expected a mapping, got {value!r}", path)
        return {str(k): self.item.check(v, f"{path}.{k}") for k, v in value.items()}


class Any_(_Spec):
    def check(self, value, path):
        return value


class Either(_Spec):
    def __init__(self, *specs):
        self.specs = specs

    def check(self, value, path):
        errors = []
        for s in self.specs:
            try:
                return s.check(value, path)
            except ConfigError as exc:
                errors.append(str(exc).split(": ", 1)[-1])
        raise ConfigError(" or ".join(errors), path)


class Section(_Spec):
    """Mapping with known keys.  ``None`` values mean "not given"."""

    def __init__(self, fields: Dict[str, _Spec], required=()):
        self.fields, self.required = fields, set(required)

    def check(self, value, path):
        if not isinstance(value, Mapping):
            raise ConfigError(f"expected a mapping, got {value!r}", path)
        out = {}
        for key, v in value.items():
            sub = f"{path}.{key}" if path else str(key)
            if key not in self.fields:
                raise ConfigError(f"unknown field (allowed: {sorted(self.fields)})", sub)
            out[key] = None if v is None else self.fields[key].check(v, sub)
        for key in self.required:
            if out.get(key) is None:
                raise ConfigError("required field missing", f"{path}.{key}" if path else key)
        return out


SAMPLE = Section({
    "nuclide": Str(), "gamma_mhz_per_t": Num(),
    "n": Qty("m^-3", positive=True), "V": Qty("m^3", positive=True),
    "P0": Num(nonneg=True), "nVP0": Num(nonneg=True),
    "T1": Either(Qty("s", positive=True), Str(("inf",))),
    "T2": Either(Qty("s", positive=True), Str(("inf",))),
    "xi": Qty("m^-3", positive=True),
}, required=("V", "T1", "T2", "xi"))

DRIVE = Section({
    "amplitude": Qty("T", nonneg=True), "phase": Num(), "nu0": Qty("Hz", positive=True),
    "detuning_hz": Num(),
})

PROTOCOL = Section({
    "sensing_time": Qty("s", positive=True), "window": Str(("rect", "hann")),
    "integer_periods": Bool(), "model": Str(("transient", "steady", "bloch")),
    "noise_rms": Qty("T", nonneg=True), "dt": Qty("s", positive=True),
    "kappa": Either(Num(positive=True), Str(("calibrate",))),
    "relaxation": Str(("decay", "equilibrium")),
})

CLUSTER = Section({
    "spins": ListOf(Either(Str(), MapOf(Any_()))),
    "j_hz": ListOf(ListOf(Num())),
    "couplings": ListOf(ListOf(Num(), min_len=3)),
    "xa": Section({"x": Str(), "a": Str(), "n": Int(1), "j_hz": Num(), "j_aa": Num()},
                  required=("x", "a", "n", "j_hz")),
})

TOP = {
    "schema_version": Int(1), "name": Str(), "pipeline": Str(), "seed": Int(0),
    "workers": Int(1), "output_dir": Str(), "description": Str(),
}

PIPE_SECTIONS = {
    "amp-scan": {
        "sample": SAMPLE,
        "scan": Section({"t_max": Qty("s", positive=True), "points": Int(2),
                         "detuning_hz": ListOf(Num())}, required=("t_max", "points", "detuning_hz")),
    },
    "bloch-evolve": {
        "sample": SAMPLE, "drive": DRIVE, "protocol": PROTOCOL,
        "evolve": Section({"duration": Qty("s", positive=True), "stride": Int(1)},
                          required=("duration", "stride")),
    },
    "dispersive-scan": {
        "sample": SAMPLE, "drive": DRIVE, "protocol": PROTOCOL,
        "scan": Section({"delta_hz_min": Num(), "delta_hz_max": Num(), "points": Int(2)},
                        required=("delta_hz_min", "delta_hz_max", "points")),
    },
    "saturation-scan": {
        "sample": SAMPLE, "drive": DRIVE, "protocol": PROTOCOL,
        "scan": Section({"amplitudes": ListOf(Qty("T", positive=True))}, required=("amplitudes",)),
    },
    "interference": {
        "drive": DRIVE, "protocol": PROTOCOL,
        "measurements": ListOf(Section({
            "name": Str(), "g": Num(nonneg=True), "cos_phi": Num(),
            "frequency": Qty("Hz", positive=True), "record": Qty("s", positive=True),
            "rate": Qty("Hz", positive=True), "span": Qty("Hz", positive=True), "points": Int(3),
        }, required=("name", "g", "cos_phi", "frequency", "record", "rate", "span", "points"))),
    },
    "zf-spectrum": {
        "cluster": CLUSTER,
        "spectrum": Section({
            "polarized_spin": Int(0), "polarization": Num(), "detect_axis": Str(("x", "y", "z")),
            "t2": MapOf(Qty("s", positive=True)), "f_min": Qty("Hz", nonneg=True),
            "f_max": Qty("Hz", positive=True), "points": Int(2),
        }, required=("polarized_spin", "polarization", "detect_axis", "t2", "f_min", "f_max", "points")),
    },
    "manifold-amp": {
        "cluster": CLUSTER, "sample": SAMPLE, "protocol": PROTOCOL,
        "manifolds": MapOf(Section({"t2": Qty("s", positive=True), "delta_hz_span": Num(positive=True),
                                    "points": Int(2)}, required=("t2", "delta_hz_span", "points"))),
    },
    "fit": {
        "fit": Section({
            "model": Str(tuple(MODELS)), "fixed": MapOf(Num()), "init": MapOf(Num()),
            "bounds": MapOf(ListOf(Num(), min_len=2)), "data": Any_(),
            "curve_points": Int(2),
        }, required=("model", "data")),
    },
}

_SAMPLE_DEFAULT = {
    "nuclide": "1H", "gamma_mhz_per_t": None, "n": None, "V": "0.5 mL", "P0": None,
    "nVP0": 1.0e18, "T1": "0.8 s", "T2": "0.8 s", "xi": "0.02 cm^-3",
}
_DRIVE_DEFAULT = {"amplitude": "0.6 nT", "phase": 0.0, "nu0": "250 Hz", "detuning_hz": 0.0}
_PROTOCOL_DEFAULT = {
    "sensing_time": "0.8 s", "window": "rect", "integer_periods": True, "model": "transient",
    "noise_rms": 0.0, "dt": None, "kappa": "calibrate", "relaxation": "decay",
}
_XA_DEFAULT = {"spins": None, "j_hz": None, "couplings": None,
               "xa": {"x": "15N", "a": "1H", "n": 3, "j_hz": -1.688, "j_aa": 0.0}}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "amp-scan": {"sample": _SAMPLE_DEFAULT,
                 "scan": {"t_max": "2.4 s", "points": 241, "detuning_hz": [0.0]}},
    "bloch-evolve": {"sample": _SAMPLE_DEFAULT, "drive": _DRIVE_DEFAULT, "protocol": _PROTOCOL_DEFAULT,
                     "evolve": {"duration": "2.4 s", "stride": 50}},
    "dispersive-scan": {"sample": _SAMPLE_DEFAULT, "drive": _DRIVE_DEFAULT, "protocol": _PROTOCOL_DEFAULT,
                        "scan": {"delta_hz_min": -2.0, "delta_hz_max": 2.0, "points": 161}},
    "saturation-scan": {"sample": _SAMPLE_DEFAULT, "drive": _DRIVE_DEFAULT,
                        "protocol": {**_PROTOCOL_DEFAULT, "model": "bloch"},
                        "scan": {"amplitudes": ["0.1 nT", "0.3 nT", "0.6 nT", "0.9 nT", "3 nT", "10 nT", "30 nT"]}},
    "interference": {"drive": _DRIVE_DEFAULT, "protocol": _PROTOCOL_DEFAULT, "measurements": []},
    "zf-spectrum": {"cluster": _XA_DEFAULT,
                    "spectrum": {"polarized_spin": 0, "polarization": 1.0e-3, "detect_axis": "z",
                                 "t2": {"J": "10.5 s", "2J": "5.3 s", "default": "1 s"},
                                 "f_min": "0 Hz", "f_max": "5 Hz", "points": 2001}},
    "manifold-amp": {"cluster": _XA_DEFAULT,
                     "sample": {**_SAMPLE_DEFAULT, "nuclide": None, "gamma_mhz_per_t": 1.0},
                     "protocol": _PROTOCOL_DEFAULT,
                     "manifolds": {"J": {"t2": "10.5 s", "delta_hz_span": 0.5, "points": 101},
                                   "2J": {"t2": "5.3 s", "delta_hz_span": 0.5, "points": 101}}},
    "fit": {"fit": {"model": "buildup", "fixed": {}, "init": {}, "bounds": {}, "data": None,
                    "curve_points": 201}},
}

# Setting one key of a pair in an override clears the other unless it is also set.
_EXCLUSIVE = (("sample", "n", "nVP0"), ("sample", "nuclide", "gamma_mhz_per_t"),
              ("cluster", "xa", "spins"))


def _deep_merge(base, over):
    if not isinstance(base, Mapping) or not isinstance(over, Mapping):
        return copy.deepcopy(over)
    out = {k: copy.deepcopy(v) for k, v in base.items()}
    for k, v in over.items():
        out[k] = _deep_merge(out[k], v) if k in out and isinstance(out[k], Mapping) and isinstance(v, Mapping) \
            else copy.deepcopy(v)
    return out


def _merge(base: Mapping, over: Mapping) -> dict:
    merged = _deep_merge(base, over)
    for section, a, b in _EXCLUSIVE:
        o = over.get(section)
        if not isinstance(o, Mapping) or section not in merged:
            continue
        for x, y in ((a, b), (b, a)):
            if o.get(x) is not None and y not in o:
                merged[section][y] = None
        if section == "cluster" and o.get("spins") is not None and "xa" not in o:
            merged[section]["xa"] = None
        if section == "cluster" and o.get("xa") is not None:
            for k in ("spins", "j_hz", "couplings"):
                if k not in o:
                    merged[section][k] = None
    return merged


def resolve(doc: Mapping, overrides: Optional[Mapping] = None, *, pipeline: Optional[str] = None) -> dict:
    """Merge defaults, ``doc`` and ``overrides``; validate; return the resolved document."""
    if not isinstance(doc, Mapping):
        raise ConfigError("scenario must be a mapping at top level")
    if "manifest_version" in doc:
        doc = doc.get("resolved") or {}
    pipe = pipeline or (overrides or {}).get("pipeline") or doc.get("pipeline")
    if pipe is None:
        raise ConfigError("required field missing", "pipeline")
    if pipe not in PIPE_SECTIONS:
        raise ConfigError(f"unknown pipeline {pipe!r} (known: {sorted(PIPE_SECTIONS)})", "pipeline")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (this build reads {SCHEMA_VERSION})",
                          "schema_version")
    base = {"schema_version": SCHEMA_VERSION, "name": pipe, "pipeline": pipe, "seed": None,
            "workers": 1, "output_dir": None, **copy.deepcopy(DEFAULTS[pipe])}
    merged = _merge(base, doc)
    if overrides:
        merged = _merge(merged, overrides)
    merged["pipeline"] = pipe
    validate(merged)
    return merged


def validate(doc: Mapping) -> dict:
    """Check ``doc`` against the schema of its pipeline; returns SI-converted values."""
    pipe = doc["pipeline"]
    fields = {**TOP, **PIPE_SECTIONS[pipe]}
    checked = Section(fields).check(doc, "")
    noisy = checked.get("protocol", {}) and (checked["protocol"].get("noise_rms") or 0) > 0
    if pipe == "fit":
        syn = (doc["fit"].get("data") or {}).get("synthetic") if isinstance(doc["fit"].get("data"), Mapping) else None
        noisy = noisy or bool(syn and syn.get("noise_frac"))
    if noisy and checked.get("seed") is None:
        raise ConfigError("seed is mandatory when noise is requested", "seed")
    return checked


# -- builders -----------------------------------------------------------------

def _time(v):
    return math.inf if v == "inf" else v


def build_sample(s: Mapping, constants: PhysicalConstants, path="sample") -> SampleSpec:
    if s.get("gamma_mhz_per_t") is not None:
        gamma = 2.0 * math.pi * s["gamma_mhz_per_t"] * 1e6
    elif s.get("nuclide") is not None:
        try:
            gamma = constants.gamma(s["nuclide"])
        except KeyError:
            raise ConfigError(f"unknown nuclide {s['nuclide']!r}", f"{path}.nuclide") from None
    else:
        raise ConfigError("give nuclide or gamma_mhz_per_t", f"{path}.nuclide")
    common = dict(gamma=gamma, V=s["V"], T1=_time(s["T1"]), T2=_time(s["T2"]), xi=s["xi"])
    try:
        if s.get("n") is not None:
            if s.get("nVP0") is not None:
                raise ConfigError("give either n (with P0) or nVP0, not both", f"{path}.nVP0")
            if s.get("P0") is None:
                raise ConfigError("P0 is required with n", f"{path}.P0")
            return SampleSpec(n=s["n"], P0=s["P0"], **common)
        if s.get("nVP0") is None:
            raise ConfigError("give n and P0, or nVP0", f"{path}.nVP0")
        p0 = 1.0 if s.get("P0") is None else s["P0"]
        return SampleSpec.from_polarized_count(nVP0=s["nVP0"], P0=p0, **common)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None


def build_protocol(p: Mapping, drive: Mapping, seed, sensing_time=None) -> SensingProtocol:
    try:
        return SensingProtocol(
            sensing_time=p["sensing_time"] if sensing_time is None else sensing_time,
            detuning=2.0 * math.pi * drive.get("detuning_hz", 0.0),
            window=p["window"], integer_periods=p["integer_periods"], model=p["model"],
            noise_rms=p["noise_rms"], seed=seed, nu0=drive.get("nu0", 250.0), dt=p.get("dt"))
    except ValueError as exc:
        raise ConfigError(str(exc), "protocol") from None


def build_cluster(c: Mapping, constants: PhysicalConstants) -> zf.SpinCluster:
    try:
        if c.get("xa") is not None:
            x = c["xa"]
            return zf.SpinCluster.xa_n(x["x"], x["a"], x["n"], x["j_hz"], j_aa=x.get("j_aa") or 0.0,
                                       constants=constants)
        if c.get("spins") is None:
            raise ConfigError("give xa or spins", "cluster")
        doc = {k: v for k, v in c.items() if v is not None and k != "xa"}
        return zf.cluster_from_mapping(doc, constants)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc), "cluster") from None


def _bloch_params(sample, drive, protocol, constants) -> BlochParams:
    dfield = DriveField(drive["amplitude"], drive["nu0"] + drive["detuning_hz"], drive["phase"])
    base = BlochParams.for_larmor(sample, drive["nu0"], dfield, relaxation=protocol["relaxation"])
    kappa = protocol["kappa"]
    if kappa == "calibrate":
        kappa = calibrate_kappa(sample, base.b0, relaxation=protocol["relaxation"], constants=constants)
    return BlochParams(sample, base.b0, dfield, kappa=kappa, relaxation=protocol["relaxation"])


# -- pipelines ----------------------------------------------------------------

def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="ascii")


def _run_amp_scan(cfg, raw, out: Path, constants):
    sample = build_sample(cfg["sample"], constants)
    sc = cfg["scan"]
    t = np.linspace(0.0, sc["t_max"], sc["points"])
    deltas, ts, gs = [], [], []
    for dhz in sc["detuning_hz"]:
        d = 2.0 * math.pi * dhz
        deltas.append(np.full_like(t, d))
        ts.append(t)
        gs.append(amplification_transient(sample, t, d, constants))
    write_csv(out / "amplification.csv", ("delta_rad_s", "t_s", "G"),
              (np.concatenate(deltas), np.concatenate(ts), np.concatenate(gs)))
    summary = {
        "G_steady": amplification_steady(sample, constants),
        "G_transient_at_T2": float(amplification_transient(sample, sample.T2, 0.0, constants))
        if math.isfinite(sample.T2) else None,
        "M0_A_per_m": magnetization(sample, constants),
    }
    _write_json(out / "summary.json", summary)
    return summary


def _run_bloch_evolve(cfg, raw, out: Path, constants):
    sample = build_sample(cfg["sample"], constants)
    params = _bloch_params(sample, cfg["drive"], cfg["protocol"], constants)
    ev = cfg["evolve"]
    traj = evolve(params, ev["duration"], cfg["protocol"].get("dt"), constants=constants)
    stride = ev["stride"]
    t = traj.t[::stride]
    m = traj.m[::stride]
    write_csv(out / "trajectory.csv", ("t_s", "mx_A_per_m", "my_A_per_m", "mz_A_per_m"),
              (t, m[:, 0], m[:, 1], m[:, 2]))
    dipolar_field(traj, params, stride=stride, constants=constants).to_csv(out / "dipolar.csv")
    from .bloch import envelope
    env = envelope(traj, params, constants=constants)[::stride]
    closed = cfg["drive"]["amplitude"] * np.abs(
        amplification_transient(sample, t, params.detuning.delta, constants))
    write_csv(out / "envelope.csv", ("t_s", "envelope_T", "closed_form_T"), (t, env, closed))
    k = int(np.argmax(env))
    summary = {"kappa": params.kappa, "b0_T": params.b0, "nu0_hz": params.nu0,
               "peak_time_s": float(t[k]), "peak_envelope_T": float(env[k]),
               "saturation_scale_T": saturation_scale(sample) if math.isfinite(sample.T2) else None,
               "step_s": traj.dt, "steps": len(traj) - 1}
    _write_json(out / "summary.json", summary)
    return summary


def _run_dispersive(cfg, raw, out: Path, constants):
    sample = build_sample(cfg["sample"], constants)
    sc, dr, pr = cfg["scan"], cfg["drive"], cfg["protocol"]
    protocol = build_protocol(pr, dr, cfg.get("seed"))
    deltas = 2.0 * math.pi * np.linspace(sc["delta_hz_min"], sc["delta_hz_max"], sc["points"])
    drive = DriveField(dr["amplitude"], dr["nu0"], dr["phase"])
    kappa = None if pr["kappa"] == "calibrate" else pr["kappa"]
    points = dispersive_scan(sample, drive, deltas, protocol, kappa=kappa, workers=cfg["workers"],
                             constants=constants)
    write_scan_csv(out / "scan.csv", points)
    write_csv(out / "scan_detail.csv", ("delta_rad_s", "R", "phi_rad", "g", "R_first_order"),
              ([p.delta for p in points], [p.R for p in points], [p.phi for p in points],
               [p.g for p in points], [p.R_first_order for p in points]))
    summary: Dict[str, Any] = {"model": protocol.model}
    if protocol.model != "bloch":
        (dmax, rmax), (dmin, rmin) = dispersive_extrema(sample, protocol, first_order=False,
                                                        constants=constants)
        summary.update(delta_max_rad_s=dmax, R_max=rmax, delta_min_rad_s=dmin, R_min=rmin)
    summary["G_transient_at_T2"] = float(amplification_transient(sample, sample.T2, 0.0, constants))
    _write_json(out / "summary.json", summary)
    return summary


def _run_saturation(cfg, raw, out: Path, constants):
    sample = build_sample(cfg["sample"], constants)
    dr, pr = cfg["drive"], cfg["protocol"]
    params = _bloch_params(sample, dr, pr, constants)
    protocol = build_protocol(pr, dr, cfg.get("seed"))
    rows = saturation_scan(params, cfg["scan"]["amplitudes"], protocol, workers=cfg["workers"],
                           constants=constants)
    write_csv(out / "saturation.csv", ("amplitude_T", "R"), ([a for a, _ in rows], [r for _, r in rows]))
    summary = {"kappa": params.kappa, "saturation_scale_T": saturation_scale(sample),
               "R": [r for _, r in rows]}
    _write_json(out / "summary.json", summary)
    return summary


def _run_interference(cfg, raw, out: Path, constants):
    dr, pr = cfg["drive"], cfg["protocol"]
    if not cfg["measurements"]:
        raise ConfigError("needs at least one entry", "measurements")
    seed = cfg.get("seed")
    results = {}
    for i, m in enumerate(cfg["measurements"]):
        path = f"measurements[{i}]"
        if not -1.0 <= m["cos_phi"] <= 1.0:
            raise ConfigError("must lie in [-1, 1]", f"{path}.cos_phi")
        phi = math.acos(m["cos_phi"])
        f = m["frequency"]
        n = int(round(m["record"] * m["rate"]))
        if pr["integer_periods"]:
            n = int(round(round(m["record"] * f) / f * m["rate"]))
        drive = DriveField(dr["amplitude"], f, dr["phase"])
        t = np.arange(n) / m["rate"]
        dip = TimeSeries(m["g"] * dr["amplitude"] * np.cos(2 * np.pi * f * t + dr["phase"] + phi), m["rate"])
        zeros = TimeSeries(np.zeros(n), m["rate"])
        try:
            with_s = synthesize(drive, dip, pr["noise_rms"], seed, stream=2 * i)
            without = synthesize(drive, zeros, pr["noise_rms"], seed, stream=2 * i + 1)
        except ValueError as exc:
            raise ConfigError(str(exc), path) from None
        R = ratio(with_s, without, f, pr["window"])
        grid = np.linspace(f - m["span"] / 2, f + m["span"] / 2, m["points"])
        a1 = [abs(phasor(with_s, x, pr["window"])) for x in grid]
        a2 = [abs(phasor(without, x, pr["window"])) for x in grid]
        write_csv(out / f"spectrum_{m['name']}.csv", ("freq_hz", "amp_with_T", "amp_without_T"), (grid, a1, a2))
        results[m["name"]] = {"R": R, "R_exact": float(interference_ratio(m["g"], phi)),
                              "R_first_order": float(interference_ratio_first_order(m["g"], phi)),
                              "g": m["g"], "cos_phi": m["cos_phi"]}
    _write_json(out / "ratios.json", results)
    return results


def _zf_rho(cluster, sp, path="spectrum"):
    if sp["polarized_spin"] >= cluster.n:
        raise ConfigError(f"cluster has only {cluster.n} spins", f"{path}.polarized_spin")
    try:
        return zf.polarized_density(cluster, sp["polarization"], sp["polarized_spin"])
    except ValueError as exc:
        raise ConfigError(str(exc), f"{path}.polarization") from None


def _run_zf(cfg, raw, out: Path, constants):
    cluster = build_cluster(cfg["cluster"], constants)
    sp = cfg["spectrum"]
    eig = zf.eigensystem(zf.build_hamiltonian(cluster), cluster)
    table = zf.transitions(eig, _zf_rho(cluster, sp), zf.detection_operator(cluster, sp["detect_axis"]))
    table.to_csv(out / "lines.csv")
    grid = np.linspace(sp["f_min"], sp["f_max"], sp["points"])
    try:
        spec = zf.spectrum(table, sp["t2"], grid)
    except KeyError as exc:
        raise ConfigError(str(exc), "spectrum.t2") from None
    write_csv(out / "spectrum.csv", ("freq_hz", "amplitude"), (grid, spec))
    write_csv(out / "levels.csv", ("energy_hz", "F", "MF", "K"),
              (eig.frequencies_hz, [lb.F for lb in eig.labels], [lb.MF for lb in eig.labels],
               [lb.K if lb.K is not None else float("nan") for lb in eig.labels]))
    lines = [{"freq_hz": ln.freq_hz, "amplitude": ln.amplitude.real, "manifold": ln.manifold,
              "upper": ln.initial.short(), "lower": ln.final.short(), "pairs": ln.n_pairs}
             for ln in table]
    summary = {"lines": lines, "spins": list(cluster.labels)}
    _write_json(out / "summary.json", summary)
    return summary


def _run_manifold(cfg, raw, out: Path, constants):
    cluster = build_cluster(cfg["cluster"], constants)
    env = build_sample(cfg["sample"], constants)
    pr = cfg["protocol"]
    if pr["model"] == "bloch":
        raise ConfigError("manifold scans use the closed-form models", "protocol.model")
    eig = zf.eigensystem(zf.build_hamiltonian(cluster), cluster)
    summary = {}
    for tag, m in cfg["manifolds"].items():
        path = f"manifolds.{tag}"
        try:
            eff = zf.effective_two_level(cluster, tag, env, t2=m["t2"])
        except ValueError as exc:
            raise ConfigError(str(exc), path) from None
        f0 = abs(cluster.j_ref) * (1 if tag == "J" else 2)
        protocol = build_protocol(pr, {"detuning_hz": 0.0, "nu0": f0}, cfg.get("seed"), sensing_time=m["t2"])
        deltas = 2.0 * math.pi * np.linspace(-m["delta_hz_span"], m["delta_hz_span"], m["points"])
        pts = dispersive_scan(eff, DriveField(1e-12, f0), deltas, protocol, constants=constants)
        write_csv(out / f"dispersive_{tag}.csv", ("freq_hz", "delta_rad_s", "R", "phi_rad"),
                  ([f0 + p.delta / (2 * math.pi) for p in pts], [p.delta for p in pts],
                   [p.R for p in pts], [p.phi for p in pts]))
        summary[tag] = {
            "line_hz": f0,
            "gamma_eff_mhz_per_t": gamma_to_mhz_per_t(eff.gamma),
            "T2_s": m["t2"],
            "G_at_T2": float(amplification_transient(eff, m["t2"], 0.0, constants)),
            "R_max": max(p.R for p in pts),
        }
    del eig
    _write_json(out / "manifolds.json", summary)
    return summary


def _fit_data(fcfg, cfg, base_dir: Path, out: Path):
    data = fcfg["data"]
    if isinstance(data, str):
        data = {"csv": data}
    if not isinstance(data, Mapping) or len(data) != 1 or next(iter(data)) not in ("csv", "synthetic"):
        raise ConfigError("data must be {csv: path} or {synthetic: {...}}", "fit.data")
    if "csv" in data:
        p = Path(data["csv"])
        if not p.is_absolute():
            p = base_dir / p
        try:
            arr = read_data_csv(p)
        except OSError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc), "fit.data.csv") from None
        return arr
    syn = Section({"params": MapOf(Num()), "x_min": Num(), "x_max": Num(), "points": Int(2),
                   "noise_frac": Num(nonneg=True), "sigma": Bool()},
                  required=("params", "x_min", "x_max", "points")).check(data["synthetic"], "fit.data.synthetic")
    model = MODELS[fcfg["model"]]
    missing = [p for p in model.params if p not in syn["params"] and p not in (fcfg.get("fixed") or {})
               and not (fcfg["model"] == "dispersive" and p == "ts")]
    if missing:
        raise ConfigError(f"missing generating values {missing}", "fit.data.synthetic.params")
    x = np.linspace(syn["x_min"], syn["x_max"], syn["points"])
    try:
        y = model.func(x, **{**(fcfg.get("fixed") or {}), **syn["params"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "fit.data.synthetic.params") from None
    frac = syn.get("noise_frac") or 0.0
    cols = [x, y]
    if frac > 0:
        scale = frac * float(np.max(np.abs(y)))
        y = y + noise_rng(cfg["seed"], 0).normal(0.0, scale, size=y.shape)
        cols = [x, y]
        if syn.get("sigma", True):
            cols.append(np.full_like(x, scale))
    return np.column_stack(cols)


def _run_fit(cfg, raw, out: Path, constants, base_dir: Path = Path(".")):
    fcfg = cfg["fit"]
    arr = _fit_data(fcfg, cfg, base_dir, out)
    header = ("x", "y", "sigma")[: arr.shape[1]]
    write_csv(out / "data.csv", header, arr.T)
    bounds = {}
    for k, v in (fcfg.get("bounds") or {}).items():
        if len(v) != 2:
            raise ConfigError("bounds need [low, high]", f"fit.bounds.{k}")
        bounds[k] = (v[0], v[1])
    try:
        spec = ModelSpec(fcfg["model"], fixed=fcfg.get("fixed") or {}, bounds=bounds)
        res = fit(spec, arr, init=fcfg.get("init") or None)
    except ValueError as exc:
        raise ConfigError(str(exc), "fit") from None
    if not all(math.isfinite(v) for v in res.params.values()):
        raise NumericalError("fit produced non-finite parameters")
    (out / "fit.json").write_text(res.to_json(), encoding="ascii")
    xs = np.linspace(float(np.min(arr[:, 0])), float(np.max(arr[:, 0])), fcfg.get("curve_points") or 201)
    write_csv(out / "curve.csv", ("x", "y_fit"), (xs, spec.evaluate(xs, res.params)))
    return json.loads(res.to_json())


PIPELINES: Dict[str, Callable] = {
    "amp-scan": _run_amp_scan,
    "bloch-evolve": _run_bloch_evolve,
    "dispersive-scan": _run_dispersive,
    "saturation-scan": _run_saturation,
    "interference": _run_interference,
    "zf-spectrum": _run_zf,
    "manifold-amp": _run_manifold,
    "fit": _run_fit,
}


# -- bundle execution -------------------------------------------------------------

def bundled_scenarios() -> List[str]:
    root = resources.files("spinamp").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_document(ref: str):
    """Load a scenario by path, or by bundled name.  Returns ``(doc, base_dir)``."""
    p = Path(ref)
    if not p.exists() and not ref.endswith((".yaml", ".yml", ".json")):
        res = resources.files("spinamp").joinpath("scenarios", f"{ref}.yaml")
        if res.is_file():
            return _parse(res.read_text(encoding="utf-8"), ref), Path(".")
        raise ConfigError(f"no such scenario file or bundled scenario {ref!r} "
                          f"(bundled: {', '.join(bundled_scenarios())})")
    text = p.read_text(encoding="utf-8")
    return _parse(text, ref), p.resolve().parent


def _parse(text: str, ref: str):
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{ref}: not valid YAML/JSON: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{ref}: top level must be a mapping")
    return doc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def output_dir(cfg: Mapping, flag: Optional[str]) -> Path:
    if flag:
        return Path(flag)
    env = os.environ.get(ENV_OUTDIR)
    if env:
        return Path(env) / cfg["name"]
    if cfg.get("output_dir"):
        return Path(cfg["output_dir"])
    return Path("spinamp-out") / cfg["name"]


def execute(cfg: Mapping, out_dir: Path, *, base_dir: Path = Path("."),
            constants: PhysicalConstants = DEFAULT_CONSTANTS) -> dict:
    """Run a resolved scenario into ``out_dir`` atomically; returns its summary.

    Artifacts are staged in a sibling temporary directory and moved into
    place only after everything succeeded, so failures leave nothing behind.
    """
    checked = validate(cfg)
    out_dir = Path(out_dir)
    parent = out_dir.resolve().parent
    parent.mkdir(parents=True, exist_ok=True)
    if out_dir.exists() and (not out_dir.is_dir() or
                             (any(out_dir.iterdir()) and not (out_dir / "manifest.json").exists())):
        raise OSError(f"{out_dir} exists and is not a spinamp bundle; refusing to overwrite")
    stage = Path(tempfile.mkdtemp(prefix=".spinamp-", dir=parent))
    try:
        runner = PIPELINES[cfg["pipeline"]]
        if cfg["pipeline"] == "fit":
            summary = runner(checked, cfg, stage, constants, base_dir=base_dir)
        else:
            summary = runner(checked, cfg, stage, constants)
        echo = copy.deepcopy(dict(cfg))
        echo.pop("output_dir", None)
        if cfg["pipeline"] == "fit" and isinstance(echo["fit"].get("data"), (str, Mapping)) \
                and "synthetic" not in (echo["fit"]["data"] if isinstance(echo["fit"]["data"], Mapping) else {}):
            echo["fit"]["data"] = {"csv": "data.csv"}  # the bundle carries its own copy
        artifacts = {p.name: _sha256(p) for p in sorted(stage.iterdir())}
        manifest = {"manifest_version": 1, "toolkit": "spinamp", "version": __version__,
                    "resolved": echo, "artifacts": artifacts}
        _write_json(stage / "manifest.json", manifest)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(stage, out_dir)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return summary


# -- argument parsing -------------------------------------------------------------

def _scalar(text: str):
    """Parse a flag value like a YAML scalar (numbers become numbers)."""
    try:
        v = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    return text if isinstance(v, (dict, list)) or v is None else v


def _list(text: str):
    return [_scalar(x.strip()) for x in text.split(",") if x.strip()]


def _set(doc: dict, path: str, value) -> None:
    keys = path.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value


_SAMPLE_FLAGS = [
    ("--nuclide", "sample.nuclide", str, "nuclide label from the constants table"),
    ("--gamma-mhz-per-t", "sample.gamma_mhz_per_t", _scalar, "gamma/2pi (MHz/T), overrides --nuclide"),
    ("--n", "sample.n", _scalar, "spin density (m^-3 or '<x> cm^-3')"),
    ("--volume", "sample.V", _scalar, "sample volume (m^3 or '<x> mL')"),
    ("--P0", "sample.P0", _scalar, "polarization fraction"),
    ("--nVP0", "sample.nVP0", _scalar, "polarized spin count"),
    ("--T1", "sample.T1", _scalar, "longitudinal relaxation time"),
    ("--T2", "sample.T2", _scalar, "transverse relaxation time"),
    ("--xi", "sample.xi", _scalar, "geometry factor (m^-3 or '<x> cm^-3')"),
]
_DRIVE_FLAGS = [
    ("--amplitude", "drive.amplitude", _scalar, "drive amplitude (T or '<x> nT')"),
    ("--phase", "drive.phase", _scalar, "drive phase (rad)"),
    ("--nu0", "drive.nu0", _scalar, "Larmor frequency used by simulations (Hz)"),
    ("--detuning-hz", "drive.detuning_hz", _scalar, "drive detuning (Hz)"),
]
_PROTOCOL_FLAGS = [
    ("--sensing-time", "protocol.sensing_time", _scalar, "record length from drive start"),
    ("--window", "protocol.window", str, "extraction window: rect or hann"),
    ("--model", "protocol.model", str, "G model: transient, steady or bloch"),
    ("--noise-rms", "protocol.noise_rms", _scalar, "white noise rms (T)"),
    ("--dt", "protocol.dt", _scalar, "integration step (s)"),
    ("--kappa", "protocol.kappa", _scalar, "readout factor or 'calibrate'"),
    ("--relaxation", "protocol.relaxation", str, "decay or equilibrium"),
]
_COMMON_FLAGS = [
    ("--seed", "seed", int, "random seed"),
    ("--workers", "workers", int, "threads for scans"),
    ("--name", "name", str, "scenario name (names the output directory)"),
]

SUBCOMMANDS = {
    "amp-scan": ("closed-form amplification factor versus sensing time",
                 _SAMPLE_FLAGS + [("--t-max", "scan.t_max", _scalar, "last sensing time"),
                                  ("--points", "scan.points", int, "number of time points"),
                                  ("--detunings-hz", "scan.detuning_hz", _list, "comma-separated detunings (Hz)")]),
    "bloch-evolve": ("driven Bloch simulation and its dipolar field",
                     _SAMPLE_FLAGS + _DRIVE_FLAGS + _PROTOCOL_FLAGS +
                     [("--duration", "evolve.duration", _scalar, "simulated time"),
                      ("--stride", "evolve.stride", int, "keep every stride-th sample in outputs")]),
    "dispersive-scan": ("ratio R and phase versus detuning",
                        _SAMPLE_FLAGS + _DRIVE_FLAGS + _PROTOCOL_FLAGS +
                        [("--delta-hz-min", "scan.delta_hz_min", _scalar, "lowest detuning (Hz)"),
                         ("--delta-hz-max", "scan.delta_hz_max", _scalar, "highest detuning (Hz)"),
                         ("--points", "scan.points", int, "number of detunings")]),
    "saturation-scan": ("ratio R versus drive amplitude (nonlinear simulation)",
                        _SAMPLE_FLAGS + _DRIVE_FLAGS + _PROTOCOL_FLAGS +
                        [("--amplitudes", "scan.amplitudes", _list, "comma-separated amplitudes")]),
    "zf-spectrum": ("zero-field spectrum of a scalar-coupled cluster",
                    [("--xa", "cluster.xa", None, "X,A,n,J_hz (e.g. 15N,1H,3,-1.688)"),
                     ("--polarization", "spectrum.polarization", _scalar, "initial polarization"),
                     ("--polarized-spin", "spectrum.polarized_spin", int, "index of the polarized spin"),
                     ("--detect-axis", "spectrum.detect_axis", str, "x, y or z"),
                     ("--f-min", "spectrum.f_min", _scalar, "grid start (Hz)"),
                     ("--f-max", "spectrum.f_max", _scalar, "grid end (Hz)"),
                     ("--points", "spectrum.points", int, "grid size")]),
    "fit": ("least-squares fit of buildup, flowrate, lorentzian or dispersive models",
            [("--model", "fit.model", str, "model kind"),
             ("--data", "fit.data", None, "CSV with header x,y[,sigma]"),
             ("--fix", "fit.fixed", None, "name=value, repeatable"),
             ("--init", "fit.init", None, "name=value, repeatable")]),
}


def _xa(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ConfigError("--xa expects X,A,n,J_hz")
    try:
        return {"x": parts[0], "a": parts[1], "n": int(parts[2]), "j_hz": float(parts[3]), "j_aa": 0.0}
    except ValueError:
        raise ConfigError(f"--xa: cannot parse {text!r}") from None


def _pairs(items, flag):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"{flag} expects name=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise ConfigError(f"{flag}: {v!r} is not a number") from None
    return out


def _dest(flag: str) -> str:
    return "opt_" + flag.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinamp", description="Spin amplification toolkit.")
    parser.add_argument("--version", action="version", version=f"spinamp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("constants", help="print physical constants and the nuclide table")
    p.add_argument("--constants", dest="constants_file", metavar="FILE", help="alternate constants YAML")

    for name, (help_text, flags) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="scenario/config file supplying any of these settings")
        p.add_argument("--out", help=f"output directory (default $SPINAMP_OUTDIR/<name> or ./spinamp-out/<name>)")
        p.add_argument("--constants", dest="constants_file", metavar="FILE", help="alternate constants YAML")
        for flag, path, conv, h in flags + _COMMON_FLAGS:
            kw = {"dest": _dest(flag), "help": f"{h} [config: {path}]", "default": None,
                  "metavar": flag.lstrip("-").upper().replace("-", "_")}
            if flag in ("--fix", "--init"):
                kw["action"] = "append"
            p.add_argument(flag, **kw)

    p = sub.add_parser("run", help="run a scenario file, bundled scenario name, or manifest")
    p.add_argument("scenario", nargs="?", help="path or bundled name")
    p.add_argument("--out", help="output directory")
    p.add_argument("--constants", dest="constants_file", metavar="FILE", help="alternate constants YAML")
    p.add_argument("--list", action="store_true", help="list bundled scenarios and exit")
    return parser


def _overrides(args, name) -> dict:
    flags = SUBCOMMANDS[name][1] + _COMMON_FLAGS
    over: dict = {}
    for flag, path, conv, _ in flags:
        raw = getattr(args, _dest(flag))
        if raw is None:
            continue
        if flag == "--xa":
            _set(over, "cluster.xa", _xa(raw))
        elif flag in ("--fix", "--init"):
            _set(over, path, _pairs(raw, flag))
        elif flag == "--data":
            _set(over, path, {"csv": str(Path(raw).resolve())})
        else:
            try:
                _set(over, path, conv(raw))
            except ValueError:
                raise ConfigError(f"{flag}: cannot parse {raw!r}") from None
    return over


def _print_constants(constants: PhysicalConstants) -> None:
    print(f"mu0   = {constants.mu0!r} T m/A")
    print(f"hbar  = {constants.hbar!r} J s")
    for label in sorted(constants.gamma_table):
        g = constants.gamma_table[label]
        print(f"gamma[{label}] / 2pi = {gamma_to_mhz_per_t(g):.6g} MHz/T  ({g:.6e} rad/s/T)")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for bad usage
        return int(exc.code or 0)
    try:
        constants = load_constants(args.constants_file) if getattr(args, "constants_file", None) \
            else DEFAULT_CONSTANTS
        if args.command == "constants":
            _print_constants(constants)
            return EXIT_OK
        if args.command == "run":
            if args.list:
                print("\n".join(bundled_scenarios()))
                return EXIT_OK
            if not args.scenario:
                raise ConfigError("run needs a scenario path or bundled name")
            doc, base = load_document(args.scenario)
            cfg = resolve(doc)
            if "manifest_version" in doc:
                base = Path(args.scenario).resolve().parent
        else:
            doc, base = ({}, Path("."))
            if args.config:
                doc, base = load_document(args.config)
                if "manifest_version" in doc:
                    doc = doc.get("resolved") or {}
                doc = {k: v for k, v in doc.items() if k != "pipeline"}
            cfg = resolve(doc, _overrides(args, args.command), pipeline=args.command)
        out = output_dir(cfg, args.out)
        summary = execute(cfg, out, base_dir=base, constants=constants)
        print(json.dumps({"output": str(out), "summary": summary}, indent=2, sort_keys=True))
        return EXIT_OK
    except ConfigError as exc:
        print(f"spinamp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"spinamp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"spinamp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"spinamp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
