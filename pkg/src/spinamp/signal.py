"""Detector signal synthesis, single-bin Fourier extraction and interference.

The detector sees the applied field and the spins' dipolar field along the
same axis.  Comparing the spectral amplitude at the drive frequency with and
without spins gives the ratio ``R``; with the dipolar phasor at relative
amplitude ``g`` and phase ``phi``,

    R = |1 + g exp(i phi)| = sqrt(1 + 2 g cos(phi) + g^2) ~= 1 + g cos(phi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .core import Detuning, DriveField, SampleSpec, amplification_steady, amplification_transient
from .series import TimeSeries, write_csv

__all__ = [
    "PhasorPair",
    "SensingProtocol",
    "SimulatedRatio",
    "DispersivePoint",
    "synthesize",
    "sample_drive",
    "phasor",
    "extract",
    "ratio",
    "interference_ratio",
    "interference_ratio_first_order",
    "phase_model",
    "phase_difference",
    "dispersive_scan",
    "dispersive_extrema",
    "simulate_ratio",
    "noise_rng",
    "write_scan_csv",
]

WINDOWS = ("rect", "hann")


def noise_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator for point ``stream`` of a scan seeded with ``seed``.

    Streams depend only on ``(seed, stream)``, so serial and parallel scans
    draw identical noise.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream),)))


def sample_drive(drive: DriveField, rate: float, n: int, t0: float = 0.0) -> TimeSeries:
    if not rate > 2.0 * drive.frequency:
        raise ValueError(f"rate {rate!r} Hz does not exceed twice the drive frequency {drive.frequency!r} Hz")
    t = t0 + np.arange(n) / rate
    return TimeSeries(drive.sample(t), rate, t0)


def synthesize(drive: DriveField, dipolar: TimeSeries, noise_rms: float = 0.0,
               seed: Optional[int] = None, *, stream: int = 0) -> TimeSeries:
    """Pointwise ``drive(t) + dipolar(t) + white Gaussian noise``.

    The drive is sampled on the dipolar series' own time grid.
    """
    if noise_rms < 0:
        raise ValueError("noise_rms must be non-negative")
    if noise_rms > 0 and seed is None:
        raise ValueError("a seed is required when noise_rms > 0")
    clean = sample_drive(drive, dipolar.rate, len(dipolar), dipolar.t0).samples + dipolar.samples
    if noise_rms > 0:
        clean = clean + noise_rng(seed, stream).normal(0.0, noise_rms, clean.size)
    return TimeSeries(clean, dipolar.rate, dipolar.t0, seed)


def _window(kind: str, n: int) -> np.ndarray:
    if kind == "rect":
        return np.ones(n)
    if kind == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    raise ValueError(f"unknown window {kind!r}; choose from {WINDOWS}")


def phasor(ts: TimeSeries, freq: float, window: str = "rect") -> complex:
    """Complex amplitude at exactly ``freq``, referenced to a cosine at ``ts.t0``.

    ``A cos(2 pi f (t - t0) + theta)`` gives ``A exp(i theta)`` up to leakage.
    The rectangular window is leakage-free at ``freq`` when the record spans
    an integer number of its periods.
    """
    n = len(ts)
    periods = n / ts.rate * freq
    if periods < 10:
        raise ValueError(f"record spans {periods:.3g} periods of {freq} Hz; at least 10 needed")
    w = _window(window, n)
    arg = -2.0 * np.pi * freq * (np.arange(n) / ts.rate)
    z = np.dot(w * ts.samples, np.cos(arg)) + 1j * np.dot(w * ts.samples, np.sin(arg))
    return complex(2.0 * z / w.sum())


def extract(ts: TimeSeries, freq: float, window: str = "rect"):
    """Return ``(amplitude, phase)`` of the single-bin projection at ``freq``."""
    z = phasor(ts, freq, window)
    return abs(z), math.atan2(z.imag, z.real)


def ratio(with_spins: TimeSeries, without_spins: TimeSeries, freq: float, window: str = "rect") -> float:
    """``R = Amp_with / Amp_without`` at ``freq``."""
    if with_spins.rate != without_spins.rate or len(with_spins) != len(without_spins):
        raise ValueError("records differ in rate or length")
    denom, _ = extract(without_spins, freq, window)
    if denom == 0:
        raise ZeroDivisionError("reference record has zero amplitude at the drive frequency")
    return extract(with_spins, freq, window)[0] / denom


def interference_ratio(g, phi):
    """Exact ratio ``sqrt(1 + 2 g cos(phi) + g^2)`` of the summed phasors."""
    g = np.asarray(g, dtype=float)
    if np.any(g < 0):
        raise ValueError("g must be non-negative")
    r = np.sqrt(1.0 + 2.0 * g * np.cos(phi) + g * g)
    return float(r) if r.ndim == 0 else r


def interference_ratio_first_order(g, phi):
    """Small-``g`` form ``1 + g cos(phi)``."""
    g = np.asarray(g, dtype=float)
    if np.any(g < 0):
        raise ValueError("g must be non-negative")
    r = 1.0 + g * np.cos(phi)
    return float(r) if r.ndim == 0 else r


def phase_model(detuning, t2: float):
    """Steady linear-response phase ``pi/2 - arctan(delta T2)`` in [0, pi].

    ``detuning`` is a :class:`Detuning` or rad/s (arrays allowed).
    """
    if not t2 > 0:
        raise ValueError("t2 must be positive")
    delta = detuning.delta if isinstance(detuning, Detuning) else np.asarray(detuning, dtype=float)
    phi = np.pi / 2.0 - np.arctan(np.asarray(delta) * t2)
    return float(phi) if np.ndim(phi) == 0 else phi


def phase_difference(z_dipolar: complex, z_drive: complex) -> float:
    """Dipolar phase minus drive phase, folded to [0, pi]."""
    d = math.atan2(z_dipolar.imag, z_dipolar.real) - math.atan2(z_drive.imag, z_drive.real)
    return abs(math.remainder(d, 2.0 * math.pi))


@dataclass(frozen=True)
class PhasorPair:
    amp_a: float
    amp_s: float
    phi: float

    def __post_init__(self):
        if self.amp_a < 0 or self.amp_s < 0:
            raise ValueError("amplitudes must be non-negative")
        if not 0.0 <= self.phi <= math.pi:
            raise ValueError("phi must lie in [0, pi]")

    @property
    def g(self) -> float:
        return self.amp_s / self.amp_a

    @classmethod
    def from_series(cls, drive_only: TimeSeries, dipolar: TimeSeries, freq: float,
                    window: str = "rect") -> "PhasorPair":
        za, zs = phasor(drive_only, freq, window), phasor(dipolar, freq, window)
        return cls(abs(za), abs(zs), phase_difference(zs, za))


@dataclass(frozen=True)
class SensingProtocol:
    """How a ratio measurement is taken.

    ``sensing_time`` is the record length from the moment the drive starts
    (s); with ``integer_periods`` it is rounded to a whole number of drive
    periods.  ``model`` selects how the dispersive scan obtains G(delta):
    ``"transient"`` (closed form at ``sensing_time``), ``"steady"``
    (Lorentzian steady-state response) or ``"bloch"`` (full simulation).
    """

    sensing_time: float
    detuning: float = 0.0
    window: str = "rect"
    integer_periods: bool = True
    model: str = "transient"
    noise_rms: float = 0.0
    seed: Optional[int] = None
    nu0: float = 250.0
    dt: Optional[float] = None

    def __post_init__(self):
        if not self.sensing_time > 0:
            raise ValueError("sensing_time must be positive")
        if self.window not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}")
        if self.model not in ("transient", "steady", "bloch"):
            raise ValueError("model must be 'transient', 'steady' or 'bloch'")
        if self.noise_rms > 0 and self.seed is None:
            raise ValueError("seed is mandatory when noise_rms > 0")

    def record_length(self, freq: float) -> float:
        if not self.integer_periods or freq == 0:
            return self.sensing_time
        return max(1, round(self.sensing_time * freq)) / freq


@dataclass(frozen=True)
class SimulatedRatio:
    R: float
    pair: PhasorPair
    with_spins: TimeSeries = field(repr=False)
    without_spins: TimeSeries = field(repr=False)
    dipolar: TimeSeries = field(repr=False)

    @property
    def g(self) -> float:
        return self.pair.g

    @property
    def phi(self) -> float:
        return self.pair.phi


def simulate_ratio(params, protocol: SensingProtocol, *, stream: int = 0,
                   constants: PhysicalConstants = DEFAULT_CONSTANTS) -> SimulatedRatio:
    """Time-domain ratio measurement for one drive (full Bloch dynamics)."""
    from .bloch import dipolar_field, evolve

    f = params.drive.frequency
    length = protocol.record_length(f)
    traj = evolve(params, length, protocol.dt, constants=constants)
    full = dipolar_field(traj, params, constants=constants)
    dip = TimeSeries(full.samples[:-1], full.rate, full.t0)  # drop the endpoint: N samples span `length`
    zeros = TimeSeries(np.zeros(len(dip)), dip.rate, dip.t0)
    seed = protocol.seed
    with_s = synthesize(params.drive, dip, protocol.noise_rms, seed, stream=2 * stream)
    without = synthesize(params.drive, zeros, protocol.noise_rms, seed, stream=2 * stream + 1)
    R = ratio(with_s, without, f, protocol.window)
    drive_only = sample_drive(params.drive, dip.rate, len(dip), dip.t0)
    pair = PhasorPair.from_series(drive_only, dip, f, protocol.window)
    return SimulatedRatio(R, pair, with_s, without, dip)


@dataclass(frozen=True)
class DispersivePoint:
    delta: float
    R: float
    phi: float
    g: float
    R_first_order: float


def _model_g(sample: SampleSpec, delta, protocol: SensingProtocol, constants) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    if protocol.model == "transient":
        return np.abs(amplification_transient(sample, protocol.sensing_time, delta, constants))
    if protocol.model == "steady":
        return amplification_steady(sample, constants) / np.sqrt(1.0 + (delta * sample.T2) ** 2)
    raise ValueError(f"no closed form for model {protocol.model!r}")


def dispersive_scan(sample: SampleSpec, drive: DriveField, deltas: Sequence[float],
                    protocol: SensingProtocol, *, kappa: Optional[float] = None,
                    workers: Optional[int] = None,
                    constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Ratio R and phase phi across detunings.

    Closed-form models combine G(delta) with :func:`phase_model` through the
    exact vector sum.  The ``"bloch"`` model simulates every point (Larmor
    frequency ``protocol.nu0``, readout factor ``kappa``, calibrated when not
    given) and measures R, g and phi from the synthesized records.
    """
    deltas = [float(d) for d in deltas]
    if not all(math.isfinite(d) for d in deltas):
        raise ValueError("detunings must be finite")
    if protocol.model != "bloch":
        g = _model_g(sample, deltas, protocol, constants)
        phi = phase_model(np.asarray(deltas), sample.T2)
        exact = interference_ratio(g, phi)
        first = interference_ratio_first_order(g, phi)
        return [DispersivePoint(d, float(r), float(p), float(gg), float(r1))
                for d, r, p, gg, r1 in zip(deltas, np.atleast_1d(exact), np.atleast_1d(phi),
                                           np.atleast_1d(g), np.atleast_1d(first))]

    from .bloch import BlochParams, _parallel_map, calibrate_kappa

    base = BlochParams.for_larmor(sample, protocol.nu0, drive)
    if kappa is None:
        kappa = calibrate_kappa(sample, base.b0, constants=constants)
    base = BlochParams(sample, base.b0, drive, kappa=kappa)

    def one(item):
        i, d = item
        res = simulate_ratio(base.with_detuning(d), protocol, stream=i, constants=constants)
        return DispersivePoint(d, res.R, res.phi, res.g,
                               interference_ratio_first_order(res.g, res.phi))

    return _parallel_map(one, list(enumerate(deltas)), workers)


def dispersive_extrema(sample: SampleSpec, protocol: SensingProtocol, *, first_order: bool = True,
                       span: float = 20.0, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Locate the maximum (delta > 0) and minimum (delta < 0) of a closed-form R(delta).

    Searches ``|delta| T2 <= span``.  Returns ``((delta_max, R_max), (delta_min, R_min))``.
    """
    fn = interference_ratio_first_order if first_order else interference_ratio
    t2 = sample.T2

    def r_of(d):
        return float(fn(_model_g(sample, d, protocol, constants), phase_model(d, t2)))

    hi = span / t2
    # coarse grid then bounded refinement around the best grid point
    grid = np.linspace(-hi, hi, 4001)
    vals = np.array([r_of(d) for d in grid])
    out = []
    for sign, idx in ((1.0, int(np.argmax(vals))), (-1.0, int(np.argmin(vals)))):
        lo_b = grid[max(idx - 1, 0)]
        hi_b = grid[min(idx + 1, grid.size - 1)]
        res = minimize_scalar(lambda d: -sign * r_of(d), bounds=(lo_b, hi_b), method="bounded",
                              options={"xatol": 1e-12 / t2})
        out.append((float(res.x), r_of(res.x)))
    return out[0], out[1]


def write_scan_csv(path, points: Sequence[DispersivePoint]) -> None:
    write_csv(path, ("delta_rad_s", "R", "phi_rad"),
              ([p.delta for p in points], [p.R for p in points], [p.phi for p in points]))
