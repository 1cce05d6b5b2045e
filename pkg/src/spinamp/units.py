"""Boundary unit conversions and a minimal dimensional-analysis layer.

Everything inside the package is SI (T, s, m, rad/s).  Config files and the
CLI accept the lab units used in practice (nT, Hz, cm^-3, mL, sccm) and
convert here.

Dimensions are tracked as exponent vectors over (m, kg, s, A).
"""

from __future__ import annotations

import math
from typing import Tuple

Dim = Tuple[int, int, int, int]  # (m, kg, s, A)

DIMENSIONLESS: Dim = (0, 0, 0, 0)

# T = kg s^-2 A^-1 ; J = kg m^2 s^-2
DIMS = {
    "mu0": (1, 1, -2, -2),       # T m / A = kg m s^-2 A^-2
    "hbar": (2, 1, -1, 0),       # J s
    "gamma": (0, -1, 1, 1),      # rad s^-1 T^-1
    "xi": (-3, 0, 0, 0),         # m^-3
    "time": (0, 0, 1, 0),
    "n": (-3, 0, 0, 0),
    "volume": (3, 0, 0, 0),
    "tesla": (0, 1, -2, -1),
    "magnetization": (-1, 0, 0, 1),  # A/m
    "rate": (0, 0, -1, 0),
}


def dim_mul(*dims: Dim) -> Dim:
    return tuple(sum(d[i] for d in dims) for i in range(4))  # type: ignore[return-value]


def dim_pow(d: Dim, k: int) -> Dim:
    return tuple(k * x for x in d)  # type: ignore[return-value]


def dim_of(*names: str, powers: dict | None = None) -> Dim:
    powers = powers or {}
    return dim_mul(*(dim_pow(DIMS[n], powers.get(n, 1)) for n in names))


def require_dim(d: Dim, expected: Dim, what: str) -> None:
    if tuple(d) != tuple(expected):
        raise ArithmeticError(f"{what}: dimension {d} != expected {expected}")


# -- boundary conversions -------------------------------------------------

NT = 1e-9
UT = 1e-6
PER_CM3 = 1e6   # cm^-3 -> m^-3
ML = 1e-6       # mL -> m^3


def nT(x: float) -> float:
    return x * NT


def to_nT(b: float) -> float:
    return b / NT


def per_cm3(x: float) -> float:
    return x * PER_CM3


def mL(x: float) -> float:
    return x * ML


def hz_to_rad(f: float) -> float:
    return 2.0 * math.pi * f


def rad_to_hz(w: float) -> float:
    return w / (2.0 * math.pi)


def mhz_per_t_to_gamma(x: float) -> float:
    return 2.0 * math.pi * x * 1e6


def gamma_to_mhz_per_t(g: float) -> float:
    return g / (2.0 * math.pi * 1e6)


_UNITS = {
    "T": (1.0, "field"), "mT": (1e-3, "field"), "uT": (1e-6, "field"),
    "nT": (1e-9, "field"), "pT": (1e-12, "field"),
    "s": (1.0, "time"), "ms": (1e-3, "time"),
    "Hz": (1.0, "freq"), "mHz": (1e-3, "freq"),
    "m^-3": (1.0, "density"), "cm^-3": (1e6, "density"),
    "m^3": (1.0, "volume"), "mL": (1e-6, "volume"), "cm^3": (1e-6, "volume"), "L": (1e-3, "volume"),
}


def parse_quantity(value, default_unit: str) -> float:
    """Convert ``value`` (number, or ``"<number> <unit>"`` string) to SI.

    A bare number is interpreted in ``default_unit``; an explicit unit must
    belong to the same family (field, time, ...).
    """
    if isinstance(value, bool):
        raise ValueError(f"expected a quantity, got {value!r}")
    if isinstance(value, (int, float)):
        number, unit = float(value), default_unit
    elif isinstance(value, str):
        parts = value.split()
        if len(parts) not in (1, 2):
            raise ValueError(f"cannot parse quantity {value!r}")
        number = float(parts[0])
        unit = parts[1] if len(parts) == 2 else default_unit
    else:
        raise ValueError(f"expected a quantity, got {value!r}")
    try:
        scale, family = _UNITS[unit]
    except KeyError:
        raise ValueError(f"unknown unit {unit!r}") from None
    if family != _UNITS[default_unit][1]:
        raise ValueError(f"unit {unit!r} is not a {_UNITS[default_unit][1]} unit")
    return number * scale
