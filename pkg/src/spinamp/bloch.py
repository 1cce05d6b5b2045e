"""Driven Bloch dynamics of a polarized ensemble and its dipolar field.

The lab-frame equations

    dM/dt = gamma M x B - relaxation,    B = drive(t) * axis + (0, 0, B0)

are integrated with fixed-step RK4 (compiled kernel when available, see
:mod:`spinamp._kernels`).  No rotating-wave approximation is made.

Two relaxation models are offered:

``"decay"`` (default)
    the hyperpolarized longitudinal magnetization relaxes toward zero at
    1/T1 (thermal polarization is negligible in comparison).  With T1 = T2
    the small-signal transverse response is exactly ``t exp(-t/T2)
    sinc(delta t/2)``, the transient amplification law.
``"equilibrium"``
    m_z relaxes back toward M0, i.e. the polarization is sustained.  The
    resonant small-signal response then saturates at the steady-state
    amplification factor.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .core import Detuning, DriveField, SampleSpec, amplification_transient, magnetization
from .errors import CalibrationError, NumericalError, StepSizeError
from .series import TimeSeries, write_csv

__all__ = [
    "BlochState",
    "BlochParams",
    "Trajectory",
    "evolve",
    "dipolar_field",
    "envelope",
    "calibrate_kappa",
    "saturation_scale",
    "rotating_frame_envelope",
    "saturation_scan",
    "default_dt",
    "MIN_STEPS_PER_PERIOD",
    "DEFAULT_STEPS_PER_PERIOD",
]

MIN_STEPS_PER_PERIOD = 50
DEFAULT_STEPS_PER_PERIOD = 500
KAPPA_RANGE = (0.25, 4.0)

_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


@dataclass(frozen=True)
class BlochState:
    mx: float
    my: float
    mz: float
    t: float

    @property
    def norm(self) -> float:
        return math.sqrt(self.mx**2 + self.my**2 + self.mz**2)


@dataclass(frozen=True)
class BlochParams:
    """Inputs of one driven simulation.

    ``kappa`` is the dipolar readout calibration (see :func:`calibrate_kappa`);
    it defaults to 1 until calibrated.  ``detector_sign`` is -1 for a sensor
    in the equatorial plane of the sample dipole, where the dipolar field
    opposes the magnetization; this placement makes R > 1 on the positive
    detuning side.
    """

    sample: SampleSpec
    b0: float
    drive: DriveField
    kappa: float = 1.0
    relaxation: str = "decay"
    detector_sign: int = -1

    def __post_init__(self):
        if not (math.isfinite(self.b0) and self.b0 >= 0):
            raise ValueError("b0 must be finite and non-negative")
        if not (math.isfinite(self.kappa) and self.kappa > 0):
            raise ValueError("kappa must be finite and positive")
        if self.relaxation not in ("decay", "equilibrium"):
            raise ValueError("relaxation must be 'decay' or 'equilibrium'")
        if self.detector_sign not in (1, -1):
            raise ValueError("detector_sign must be +1 or -1")

    @property
    def nu0(self) -> float:
        """Larmor frequency |gamma| B0 / 2 pi (Hz)."""
        return abs(self.sample.gamma) * self.b0 / (2.0 * math.pi)

    @property
    def detuning(self) -> Detuning:
        return Detuning.between(self.drive.frequency, self.nu0)

    def with_drive(self, **changes) -> "BlochParams":
        return replace(self, drive=replace(self.drive, **changes))

    def with_detuning(self, delta: float) -> "BlochParams":
        """Same parameters, drive retuned to ``nu0 + delta / 2 pi``."""
        return self.with_drive(frequency=self.nu0 + delta / (2.0 * math.pi))

    @classmethod
    def for_larmor(cls, sample: SampleSpec, nu0: float, drive: DriveField, **kw) -> "BlochParams":
        """Choose B0 so that the Larmor frequency equals ``nu0``."""
        return cls(sample=sample, b0=2.0 * math.pi * nu0 / abs(sample.gamma), drive=drive, **kw)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Magnetization ``m`` (shape ``(N, 3)``, A/m) at ``t = t0 + k dt``."""

    m: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.ndim != 2 or m.shape[1] != 3 or m.shape[0] < 2:
            raise ValueError("trajectory needs shape (N >= 2, 3)")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    def __len__(self):
        return self.m.shape[0]

    @property
    def t(self) -> np.ndarray:
        return self.t0 + np.arange(len(self)) * self.dt

    @property
    def states(self):
        return [BlochState(float(x), float(y), float(z), float(t)) for (x, y, z), t in zip(self.m, self.t)]

    def state(self, k: int) -> BlochState:
        x, y, z = self.m[k]
        return BlochState(float(x), float(y), float(z), self.t0 + k * self.dt)

    @property
    def transverse(self) -> np.ndarray:
        """|m_perp| = sqrt(mx^2 + my^2)."""
        return np.hypot(self.m[:, 0], self.m[:, 1])

    def to_csv(self, path) -> None:
        write_csv(path, ("t_s", "mx_A_per_m", "my_A_per_m", "mz_A_per_m"),
                  (self.t, self.m[:, 0], self.m[:, 1], self.m[:, 2]))


def _max_frequency(params: BlochParams) -> float:
    f = params.nu0
    if params.drive.amplitude > 0:
        f = max(f, params.drive.frequency)
    return f


def default_dt(params: BlochParams) -> float:
    """``1 / (DEFAULT_STEPS_PER_PERIOD * max(nu0, nu_a))``."""
    f = _max_frequency(params)
    if f == 0:
        raise StepSizeError("no field and no drive: pass dt explicitly")
    return 1.0 / (DEFAULT_STEPS_PER_PERIOD * f)


def evolve(params: BlochParams, duration: float, dt: Optional[float] = None, *,
           initial: Optional[Sequence[float]] = None, t0: float = 0.0,
           constants: PhysicalConstants = DEFAULT_CONSTANTS) -> Trajectory:
    """Integrate the driven Bloch equations from ``(0, 0, M0)``.

    The step actually used is ``duration / ceil(duration / dt)``, so the
    final sample lands on ``t0 + duration`` and never exceeds the requested
    ``dt``.  Steps coarser than ``1 / (50 max(nu0, nu_a))`` are rejected.
    """
    if not (math.isfinite(duration) and duration > 0):
        raise ValueError("duration must be finite and positive")
    if dt is None:
        dt = default_dt(params)
    f = _max_frequency(params)
    if not dt > 0 or (f > 0 and dt > 1.0 / (MIN_STEPS_PER_PERIOD * f) * (1 + 1e-12)):
        raise StepSizeError(
            f"dt={dt!r} s too coarse: need dt <= 1/({MIN_STEPS_PER_PERIOD} * {f!r} Hz)")
    nsteps = max(1, math.ceil(duration / dt * (1 - 1e-12)))
    h = duration / nsteps

    s = params.sample
    m0 = magnetization(s, constants)
    mx, my, mz = (0.0, 0.0, m0) if initial is None else (float(v) for v in initial)
    r1 = 0.0 if math.isinf(s.T1) else 1.0 / s.T1
    r2 = 0.0 if math.isinf(s.T2) else 1.0 / s.T2
    mz_eq = m0 if params.relaxation == "equilibrium" else 0.0
    ax, ay, az = _AXES[params.drive.axis]
    out = np.empty((nsteps + 1, 3))
    bad = _kernels.rk4_bloch(
        out, mx, my, mz, s.gamma, params.b0, params.drive.amplitude,
        2.0 * math.pi * params.drive.frequency, params.drive.phase,
        ax, ay, az, r1, r2, mz_eq, float(t0), h, nsteps)
    if bad >= 0:
        raise NumericalError(
            f"non-finite magnetization at step {bad} (t = {t0 + bad * h:.6g} s); "
            f"last finite state {out[bad - 1].tolist()}")
    return Trajectory(out, h, float(t0))


def _dipolar_scale(params: BlochParams, constants: PhysicalConstants) -> float:
    s = params.sample
    return params.kappa * 2.0 * s.xi * constants.mu0 * s.V


def dipolar_field(traj: Trajectory, params: BlochParams, *, stride: int = 1,
                  constants: PhysicalConstants = DEFAULT_CONSTANTS) -> TimeSeries:
    """Detector-axis dipolar field ``sign * kappa * 2 xi mu0 V * m_axis(t)`` (T).

    The detector axis is the drive axis.
    """
    k = "xyz".index(params.drive.axis)
    samples = (params.detector_sign * _dipolar_scale(params, constants)) * traj.m[::stride, k]
    return TimeSeries(samples, 1.0 / (traj.dt * stride), traj.t0)


def envelope(traj: Trajectory, params: BlochParams, *,
             constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Amplitude envelope of the dipolar field: the same scale times |m_perp|."""
    return _dipolar_scale(params, constants) * traj.transverse


def saturation_scale(sample: SampleSpec) -> float:
    """Drive amplitude (T) whose co-rotating half tips the spins by 1 rad in T2."""
    if math.isinf(sample.T2):
        raise ValueError("saturation scale undefined for infinite T2")
    return 2.0 / (abs(sample.gamma) * sample.T2)


def calibrate_kappa(sample: SampleSpec, b0: float, *, amplitude: Optional[float] = None,
                    dt: Optional[float] = None, relaxation: str = "decay",
                    constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Readout factor that makes the simulated B_s/B_a at (delta=0, t=T2) equal the closed form.

    A linearly polarized drive only has half of its amplitude co-rotating
    with the spins, so the expected value is 2 when T1 = T2 in the
    ``"decay"`` model.  Results outside [0.25, 4] indicate a broken
    convention and raise :class:`CalibrationError`.
    """
    if math.isinf(sample.T2):
        raise CalibrationError("calibration needs a finite T2")
    if sample.nVP0 == 0:
        raise CalibrationError("calibration needs a polarized sample")
    bsat = saturation_scale(sample)
    if amplitude is None:
        amplitude = 1e-4 * bsat
    if not 0 < amplitude <= 1e-3 * bsat:
        raise CalibrationError(
            f"amplitude {amplitude!r} T is outside the linear regime (<= {1e-3 * bsat!r} T)")
    nu0 = abs(sample.gamma) * b0 / (2.0 * math.pi)
    if nu0 <= 0:
        raise CalibrationError("calibration needs B0 > 0")
    params = BlochParams(sample, b0, DriveField(amplitude, nu0), kappa=1.0, relaxation=relaxation)
    traj = evolve(params, sample.T2, dt, constants=constants)
    measured = envelope(traj, params, constants=constants)[-1] / amplitude
    target = amplification_transient(sample, sample.T2, 0.0, constants)
    kappa = target / measured
    lo, hi = KAPPA_RANGE
    if not lo <= kappa <= hi:
        raise CalibrationError(f"kappa={kappa!r} outside [{lo}, {hi}]: drive/readout convention broken")
    return float(kappa)


def rotating_frame_envelope(params: BlochParams, t, *,
                            constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Closed-form rotating-wave envelope of the dipolar field (T).

    Valid when T1 = T2 in the ``"decay"`` model, or without relaxation:
    the magnetization then rotates rigidly about the effective field while
    shrinking by ``exp(-t/T2)``.  Exact in drive amplitude.
    """
    s = params.sample
    uniform = (params.relaxation == "decay" and s.T1 == s.T2) or (math.isinf(s.T1) and math.isinf(s.T2))
    if not uniform:
        raise ValueError("closed form requires T1 == T2 (decay model) or no relaxation")
    t = np.asarray(t, dtype=float)
    w1 = abs(s.gamma) * params.drive.amplitude / 2.0
    delta = params.detuning.delta
    big = math.hypot(w1, delta)
    if big == 0:
        return np.zeros_like(t)
    nx, nz = w1 / big, delta / big
    a = big * t
    perp = abs(nx) * np.sqrt(((1.0 - np.cos(a)) * nz) ** 2 + np.sin(a) ** 2)
    decay = np.ones_like(t) if math.isinf(s.T2) else np.exp(-t / s.T2)
    return _dipolar_scale(params, constants) * abs(magnetization(s, constants)) * perp * decay


def _parallel_map(fn, items, workers):
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def saturation_scan(params: BlochParams, amplitudes: Sequence[float], protocol, *,
                    workers: Optional[int] = None,
                    constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Ratio R versus drive amplitude from full nonlinear simulations.

    ``protocol`` is a :class:`spinamp.signal.SensingProtocol`; it fixes the
    detuning and record.  Returns ``[(B_a, R), ...]`` in input order.
    """
    from .signal import simulate_ratio

    amps = [float(a) for a in amplitudes]
    if any(a <= 0 for a in amps):
        raise ValueError("amplitudes must be positive")
    if any(b < a for a, b in zip(amps, amps[1:])):
        raise ValueError("amplitudes must be sorted ascending")

    def one(a):
        return a, simulate_ratio(params.with_drive(amplitude=a), protocol, constants=constants).R

    return _parallel_map(one, amps, workers)
