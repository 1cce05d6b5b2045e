"""Physical constants and the nuclide gyromagnetic-ratio table.

Values are read from a small YAML document so that further nuclides can be
added without touching code.  The bundled file lives in ``spinamp/data``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import yaml

__all__ = ["PhysicalConstants", "load_constants", "DEFAULT_CONSTANTS", "gamma_of"]


@dataclass(frozen=True)
class PhysicalConstants:
    """SI constants used throughout the toolkit.

    Attributes
    ----------
    mu0 : float
        Vacuum permeability (T m / A).
    hbar : float
        Reduced Planck constant (J s).
    gamma_table : Mapping[str, float]
        Nuclide label -> gyromagnetic ratio (rad s^-1 T^-1).
    """

    mu0: float
    hbar: float
    gamma_table: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("mu0", "hbar"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v!r}")
        object.__setattr__(self, "gamma_table", MappingProxyType(dict(self.gamma_table)))

    def gamma(self, label: str) -> float:
        try:
            return self.gamma_table[label]
        except KeyError:
            raise KeyError(f"unknown nuclide {label!r}; known: {sorted(self.gamma_table)}") from None

    @property
    def h(self) -> float:
        return 2.0 * math.pi * self.hbar


def _parse(doc: Mapping) -> PhysicalConstants:
    if not isinstance(doc, Mapping):
        raise ValueError("constants document must be a mapping")
    missing = {"mu0", "hbar", "nuclides"} - set(doc)
    if missing:
        raise ValueError(f"constants document missing keys: {sorted(missing)}")
    table = {}
    for label, entry in doc["nuclides"].items():
        try:
            mhz = float(entry["gamma_mhz_per_t"])
        except (TypeError, KeyError, ValueError):
            raise ValueError(f"nuclides.{label}.gamma_mhz_per_t must be a number") from None
        table[str(label)] = 2.0 * math.pi * mhz * 1e6
    return PhysicalConstants(mu0=float(doc["mu0"]), hbar=float(doc["hbar"]), gamma_table=table)


def load_constants(path: str | Path | None = None) -> PhysicalConstants:
    """Load constants from a YAML file (bundled defaults when *path* is None)."""
    if path is None:
        text = resources.files("spinamp.data").joinpath("constants.yaml").read_text()
    else:
        text = Path(path).read_text()
    return _parse(yaml.safe_load(text))


DEFAULT_CONSTANTS = load_constants()


def gamma_of(label: str) -> float:
    return DEFAULT_CONSTANTS.gamma(label)
