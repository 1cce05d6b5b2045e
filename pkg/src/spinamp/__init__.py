"""Amplification of magnetic fields by polarized nuclear spins.

Closed-form amplification factors (:mod:`spinamp.core`), driven Bloch
simulations (:mod:`spinamp.bloch`), zero-field spectra of scalar-coupled
clusters (:mod:`spinamp.zerofield`), ratio measurements
(:mod:`spinamp.signal`), model fitting (:mod:`spinamp.fitting`) and a
scenario runner (:mod:`spinamp.cli`).
"""

__version__ = "0.1.0"

from .constants import DEFAULT_CONSTANTS, PhysicalConstants, gamma_of, load_constants
from .core import (Detuning, DriveField, SampleSpec, amplification_steady,
                   amplification_transient, magnetization)
from .errors import CalibrationError, ConfigError, NumericalError, SpinampError, StepSizeError
from .series import TimeSeries

__all__ = [
    "__version__",
    "DEFAULT_CONSTANTS",
    "PhysicalConstants",
    "gamma_of",
    "load_constants",
    "Detuning",
    "DriveField",
    "SampleSpec",
    "amplification_steady",
    "amplification_transient",
    "magnetization",
    "CalibrationError",
    "ConfigError",
    "NumericalError",
    "SpinampError",
    "StepSizeError",
    "TimeSeries",
]
