import math

import pytest
from hypothesis import HealthCheck, settings

from spinamp.core import SampleSpec
from spinamp.constants import DEFAULT_CONSTANTS

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GAMMA_H = DEFAULT_CONSTANTS.gamma("1H")


@pytest.fixture
def proton_sample():
    """Acetonitrile protons: nVP0 = 1e18 in 0.5 mL, T2 = 0.8 s, xi = 0.02 cm^-3."""
    return SampleSpec.from_polarized_count(gamma=GAMMA_H, nVP0=1e18, V=0.5e-6, T1=0.8, T2=0.8,
                                           xi=2e4, P0=2e-4)


@pytest.fixture
def weak_sample():
    """Same geometry with a small polarized count (linear-response tests)."""
    return SampleSpec.from_polarized_count(gamma=GAMMA_H, nVP0=1e17, V=0.5e-6, T1=0.8, T2=0.8,
                                           xi=2e4, P0=2e-4)


def pytest_terminal_summary(terminalreporter):
    lines = [value for status in ("passed", "failed") for rep in terminalreporter.stats.get(status, [])
             if rep.when == "call" for key, value in rep.user_properties if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda text: int(text.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


__all__ = ["GAMMA_H", "rel", "math"]
