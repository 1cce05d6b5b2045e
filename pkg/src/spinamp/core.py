"""Sample description and the closed-form amplification factors.

The steady-state factor is

    G = xi * mu0 * T2 * gamma**2 * hbar * (n V P0) = 2 xi mu0 T2 gamma V M0

and the transient, detuning-dependent factor after sensing time ``t`` is

    G(t, delta) = xi * mu0 * gamma**2 * hbar * (n V P0) * t * exp(-t/T2) * sinc(delta t / 2)

with the unnormalized ``sinc(x) = sin(x)/x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .units import DIMENSIONLESS, dim_mul, dim_of, require_dim

__all__ = [
    "SampleSpec",
    "DriveField",
    "Detuning",
    "magnetization",
    "amplification_steady",
    "amplification_transient",
    "transient_prefactor",
    "sinc",
]


def _finite(name, value, *, positive=False, allow_inf=False):
    value = float(value)
    if math.isnan(value) or (math.isinf(value) and not allow_inf):
        raise ValueError(f"{name} must be finite, got {value!r}")
    if positive and not value > 0:
        raise ValueError(f"{name} must be strictly positive, got {value!r}")
    return value


@dataclass(frozen=True)
class SampleSpec:
    """A polarized sensing ensemble.

    Parameters
    ----------
    gamma : float
        Gyromagnetic ratio (rad s^-1 T^-1); sign is kept.
    n : float
        Spin number density (m^-3).
    V : float
        Sample volume (m^3).
    P0 : float
        Polarization as a fraction in [0, 1].
    T1, T2 : float
        Longitudinal / transverse relaxation times (s).  ``math.inf`` is
        accepted and means "no relaxation".
    xi : float
        Geometry/detection factor (m^-3).  Always an input.
    """

    gamma: float
    n: float
    V: float
    P0: float
    T1: float
    T2: float
    xi: float

    def __post_init__(self):
        object.__setattr__(self, "gamma", _finite("gamma", self.gamma))
        if self.gamma == 0:
            raise ValueError("gamma must be non-zero")
        for name in ("n", "V", "xi"):
            object.__setattr__(self, name, _finite(name, getattr(self, name), positive=True))
        for name in ("T1", "T2"):
            object.__setattr__(self, name, _finite(name, getattr(self, name), positive=True, allow_inf=True))
        p0 = _finite("P0", self.P0)
        if not 0.0 <= p0 <= 1.0:
            raise ValueError(f"P0 must lie in [0, 1], got {p0!r}")
        object.__setattr__(self, "P0", p0)

    @property
    def nVP0(self) -> float:
        """Number of polarized spins (dimensionless)."""
        return self.n * self.V * self.P0

    def with_(self, **changes) -> "SampleSpec":
        return replace(self, **changes)

    @classmethod
    def from_polarized_count(cls, *, gamma, nVP0, V, T1, T2, xi, P0=1.0) -> "SampleSpec":
        """Build a sample from the polarized-spin count rather than a density."""
        if nVP0 < 0:
            raise ValueError("nVP0 must be non-negative")
        if nVP0 == 0:
            return cls(gamma=gamma, n=1.0 / V, V=V, P0=0.0, T1=T1, T2=T2, xi=xi)
        if not P0 > 0:
            raise ValueError("P0 must be positive to back out n from nVP0")
        return cls(gamma=gamma, n=nVP0 / (V * P0), V=V, P0=P0, T1=T1, T2=T2, xi=xi)


@dataclass(frozen=True)
class DriveField:
    """Linearly polarized oscillating field ``amplitude * cos(2 pi frequency t + phase)``."""

    amplitude: float
    frequency: float
    phase: float = 0.0
    axis: str = "y"

    def __post_init__(self):
        a = _finite("amplitude", self.amplitude)
        f = _finite("frequency", self.frequency)
        if a < 0 or f < 0:
            raise ValueError("drive amplitude and frequency must be non-negative")
        object.__setattr__(self, "amplitude", a)
        object.__setattr__(self, "frequency", f)
        object.__setattr__(self, "phase", _finite("phase", self.phase))
        if self.axis not in ("x", "y", "z"):
            raise ValueError(f"axis must be one of x, y, z; got {self.axis!r}")

    def sample(self, t):
        return self.amplitude * np.cos(2.0 * np.pi * self.frequency * np.asarray(t) + self.phase)


@dataclass(frozen=True)
class Detuning:
    """Angular detuning ``delta = 2 pi (nu_a - nu0)`` (rad/s) with its resonance ``nu0`` (Hz)."""

    delta: float
    nu0: float

    @classmethod
    def between(cls, nu_a: float, nu0: float) -> "Detuning":
        return cls(delta=2.0 * math.pi * (nu_a - nu0), nu0=nu0)

    @property
    def nu_a(self) -> float:
        return self.nu0 + self.delta / (2.0 * math.pi)


def sinc(x):
    """Unnormalized sinc, ``sin(x)/x`` with ``sinc(0) = 1``."""
    return np.sinc(np.asarray(x, dtype=float) / np.pi)


_G_DIM = dim_of("xi", "mu0", "time", "gamma", "hbar", powers={"gamma": 2})
_M0_DIM = dim_of("hbar", "gamma", "n")


def magnetization(sample: SampleSpec, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Initial magnetization ``M0 = hbar * gamma * n * P0 / 2`` (A/m)."""
    require_dim(_M0_DIM, dim_of("magnetization"), "M0")
    m0 = 0.5 * constants.hbar * sample.gamma * sample.n * sample.P0
    if not math.isfinite(m0):
        raise ValueError("non-finite magnetization")
    return m0


def amplification_steady(sample: SampleSpec, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Resonant steady-state amplification factor ``xi mu0 T2 gamma^2 hbar nVP0``.

    Also evaluated as ``2 xi mu0 T2 gamma V M0``; the two forms must agree.
    """
    require_dim(_G_DIM, DIMENSIONLESS, "amplification factor")
    direct = sample.xi * constants.mu0 * sample.T2 * sample.gamma**2 * constants.hbar * sample.nVP0
    via_m0 = 2.0 * sample.xi * constants.mu0 * sample.T2 * sample.gamma * sample.V * magnetization(sample, constants)
    if not math.isclose(direct, via_m0, rel_tol=1e-12, abs_tol=0.0):
        raise ArithmeticError(f"amplification forms disagree: {direct!r} vs {via_m0!r}")
    return direct


def transient_prefactor(sample: SampleSpec, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """``xi mu0 gamma^2 hbar nVP0`` (s^-1): the slope of G(t) at t = 0."""
    require_dim(dim_mul(_G_DIM, dim_of("rate")), dim_of("rate"), "transient prefactor")
    return sample.xi * constants.mu0 * sample.gamma**2 * constants.hbar * sample.nVP0


def amplification_transient(sample: SampleSpec, t, detuning=0.0,
                            constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Amplification after sensing time ``t`` at detuning ``detuning``.

    ``detuning`` is a :class:`Detuning` or an angular detuning in rad/s.
    ``t`` and a float detuning broadcast as numpy arrays; scalar inputs give a
    float.  The result is signed (the sinc factor changes sign outside its
    main lobe).
    """
    delta = detuning.delta if isinstance(detuning, Detuning) else detuning
    t_arr = np.asarray(t, dtype=float)
    d_arr = np.asarray(delta, dtype=float)
    if np.any(t_arr < 0) or not np.all(np.isfinite(t_arr)):
        raise ValueError("sensing time must be finite and non-negative")
    if not np.all(np.isfinite(d_arr)):
        raise ValueError("detuning must be finite")
    if math.isinf(sample.T2):
        decay = np.ones_like(t_arr)
    else:
        decay = np.exp(-t_arr / sample.T2)
    g = transient_prefactor(sample, constants) * t_arr * decay * sinc(d_arr * t_arr / 2.0)
    if np.ndim(g) == 0:
        return float(g)
    return g
