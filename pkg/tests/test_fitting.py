import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spinamp import fitting as ft
from spinamp import zerofield as zf

TRUE_BUILDUP = {"c": 0.11, "T1": 21.1}
TRUE_FLOW = {"a": 0.001, "b": 4.0, "qc": 151.7}


def synth(kind, truth, x, noise_frac=0.0, seed=None, sigma=False):
    y = ft.ModelSpec(kind).evaluate(x, truth)
    s = noise_frac * np.max(np.abs(y))
    if noise_frac:
        y = y + np.random.default_rng(seed).normal(0.0, s, len(x))
    cols = [x, y] + ([np.full_like(x, s)] if sigma else [])
    return np.column_stack(cols)


def test_model_examples():
    assert ft.model_buildup(0.0, 0.11, 21.1) == 0.0
    assert ft.model_buildup(1e4, 0.11, 21.1) == pytest.approx(0.11)
    assert round(float(ft.model_buildup(21.1, 0.11, 21.1)), 4) == 0.0695
    assert ft.model_flow(0.0, 0.001, 4.0, 151.7) == 0.0
    assert round(float(ft.model_flow(151.7, 0.001, 4.0, 151.7)), 4) == 0.0759
    q = np.linspace(0.1, 15.17, 50)
    assert np.all(np.abs(ft.model_flow(q, 0.001, 4.0, 151.7) / (0.001 * q) - 1) <= 0.01)


def test_lorentzian_shape():
    t2 = 10.5
    hw = 1 / (2 * math.pi * t2)
    assert round(hw, 5) == 0.01516
    peak = ft.model_lorentzian(3.0, 3.0, 2.0, t2, 0.1)
    assert peak == pytest.approx(0.1 + 2.0 * t2 / math.pi)
    half = ft.model_lorentzian(np.array([3.0 - hw, 3.0 + hw]), 3.0, 2.0, t2, 0.0)
    assert np.allclose(half, t2 / math.pi, rtol=1e-12)


def test_model_preconditions():
    with pytest.raises(ValueError):
        ft.model_buildup(1.0, 0.1, 0.0)
    with pytest.raises(ValueError):
        ft.model_flow(1.0, 0.1, 0.0, 1.0)
    with pytest.raises(ValueError):
        ft.model_flow(-1.0, 0.1, 4.0, 1.0)
    with pytest.raises(ValueError):
        ft.model_lorentzian(1.0, 0.0, 1.0, -1.0)


_RANGES = {
    "buildup": ({"c": (-1, 1), "T1": (0.5, 50)}, np.linspace(0, 100, 41)),
    "flowrate": ({"a": (1e-4, 1e-2), "b": (0.5, 6), "qc": (20, 300)}, np.linspace(1, 400, 30)),
    "lorentzian": ({"center": (1, 3), "area": (0.1, 5), "t2": (0.5, 20), "baseline": (-1, 1)},
                   np.linspace(0, 4, 201)),
}


@pytest.mark.parametrize("kind", sorted(_RANGES))
def test_analytic_jacobian_matches_central_differences(kind):
    ranges, x = _RANGES[kind]
    spec = ft.ModelSpec(kind)
    rng = np.random.default_rng(3)
    for _ in range(100):
        vals = {k: rng.uniform(lo, hi) for k, (lo, hi) in ranges.items()}
        ana = ft.jacobian(spec, x, vals)
        # Richardson-extrapolated central differences: narrow lines make the
        # plain O(h^2) truncation error comparable to the tolerance
        coarse = ft.numeric_jacobian(spec, x, vals, rel_step=2e-5)
        fine = ft.numeric_jacobian(spec, x, vals, rel_step=1e-5)
        num = (4 * fine - coarse) / 3
        scale = np.max(np.abs(ana), axis=0)
        assert np.all(np.abs(ana - num) <= 1e-6 * scale)


def test_noiseless_buildup_recovers():
    data = synth("buildup", TRUE_BUILDUP, np.linspace(0, 100, 41))
    res = ft.fit(ft.ModelSpec("buildup"), data, {"c": 0.2, "T1": 10.0})
    assert res.converged
    for k, v in TRUE_BUILDUP.items():
        assert res.params[k] == pytest.approx(v, rel=1e-6)


@pytest.mark.parametrize("kind,truth", [("buildup", TRUE_BUILDUP), ("flowrate", TRUE_FLOW)])
def test_start_at_truth_converges_fast(kind, truth):
    x = _RANGES[kind][1]
    res = ft.fit(ft.ModelSpec(kind), synth(kind, truth, x), truth)
    assert res.converged and res.iterations <= 2


@given(st.floats(1e-3, 1e3), st.integers(0, 2**31))
def test_scale_invariance(k, seed):
    x = np.linspace(0, 100, 41)
    data = synth("buildup", TRUE_BUILDUP, x, 0.02, seed, sigma=True)
    a = ft.fit(ft.ModelSpec("buildup"), data)
    scaled = data.copy()
    scaled[:, 1:] *= k
    b = ft.fit(ft.ModelSpec("buildup"), scaled)
    assert b.params["T1"] == pytest.approx(a.params["T1"], rel=1e-9)
    assert b.params["c"] == pytest.approx(k * a.params["c"], rel=1e-9)


@pytest.mark.parametrize("kind,truth", [("buildup", TRUE_BUILDUP), ("flowrate", TRUE_FLOW)])
def test_cost_history_monotone(kind, truth):
    data = synth(kind, truth, _RANGES[kind][1], 0.02, 5)
    res = ft.fit(ft.ModelSpec(kind), data)
    h = np.array(res.history)
    assert len(h) >= 2 and np.all(np.diff(h) <= 0)


def _coverage(kind, truth, x):
    hits = 0
    for seed in range(100):
        res = ft.fit(ft.ModelSpec(kind), synth(kind, truth, x, 0.02, seed, sigma=True))
        hits += res.converged and all(abs(res.params[k] - v) <= 3 * res.stderr[k] for k, v in truth.items())
    return hits


def test_flow_coverage():
    assert _coverage("flowrate", TRUE_FLOW, np.linspace(0, 400, 30)) >= 95


def test_buildup_coverage():
    assert _coverage("buildup", TRUE_BUILDUP, np.linspace(0, 100, 41)) >= 95


def test_bounds_respected():
    data = synth("buildup", TRUE_BUILDUP, np.linspace(0, 100, 41))
    res = ft.fit(ft.ModelSpec("buildup", bounds={"T1": (1.0, 15.0)}), data, {"c": 0.2, "T1": 5.0})
    assert 1.0 < res.params["T1"] <= 15.0
    assert res.params["T1"] == pytest.approx(15.0, rel=1e-3)


def test_spec_validation():
    with pytest.raises(ValueError):
        ft.ModelSpec("cubic")
    with pytest.raises(ValueError):
        ft.ModelSpec("buildup", fixed={"c": 1.0, "T1": 1.0})
    with pytest.raises(ValueError):
        ft.ModelSpec("buildup", bounds={"T1": (5.0, 1.0)})
    with pytest.raises(ValueError):
        ft.ModelSpec("buildup", fixed={"zeta": 1.0})


def test_too_few_points_and_bad_sigma():
    with pytest.raises(ValueError):
        ft.fit(ft.ModelSpec("flowrate"), synth("flowrate", TRUE_FLOW, np.linspace(1, 400, 5)))
    data = synth("buildup", TRUE_BUILDUP, np.linspace(0, 100, 10))
    data = np.column_stack([data, np.zeros(10)])
    with pytest.raises(ValueError):
        ft.fit(ft.ModelSpec("buildup"), data)


def test_singular_jacobian_reported():
    # with all points at t=0 the model carries no information about c or T1
    data = np.column_stack([np.zeros(8), np.zeros(8)])
    res = ft.fit(ft.ModelSpec("buildup"), data, {"c": 0.1, "T1": 10.0})
    assert all(math.isinf(v) for v in res.stderr.values())
    assert "singular" in res.message


def test_max_iter_returns_best_so_far():
    data = synth("flowrate", TRUE_FLOW, np.linspace(0, 400, 30), 0.02, 1)
    res = ft.fit(ft.ModelSpec("flowrate"), data, {"a": 0.01, "b": 1.0, "qc": 30.0}, max_iter=2)
    assert not res.converged
    assert res.iterations == 2
    assert res.history[-1] <= res.history[0]


def test_fit_deterministic():
    data = synth("flowrate", TRUE_FLOW, np.linspace(0, 400, 30), 0.02, 2)
    assert ft.fit(ft.ModelSpec("flowrate"), data).to_json() == ft.fit(ft.ModelSpec("flowrate"), data).to_json()


def test_fixed_parameters_kept():
    data = synth("lorentzian", {"center": 2.0, "area": 1.0, "t2": 5.3, "baseline": 0.0}, np.linspace(1.8, 2.2, 101))
    res = ft.fit(ft.ModelSpec("lorentzian", fixed={"baseline": 0.0}), data)
    assert res.params["baseline"] == 0.0 and "baseline" not in res.stderr
    assert res.params["t2"] == pytest.approx(5.3, rel=1e-8)


def test_dispersive_fit_recovers():
    truth = {"g0": 0.03, "t2": 0.8}
    d = np.linspace(-12, 12, 81)
    res = ft.fit(ft.ModelSpec("dispersive"), synth("dispersive", truth, d))
    assert res.converged
    for k, v in truth.items():
        assert res.params[k] == pytest.approx(v, rel=1e-5)


def test_fit_json_fields():
    data = synth("buildup", TRUE_BUILDUP, np.linspace(0, 100, 41))
    doc = json.loads(ft.fit(ft.ModelSpec("buildup"), data).to_json())
    assert {"params", "stderr", "residual_norm", "iterations", "converged"} <= set(doc)


def test_read_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,y,sigma\n0,1,0.1\n1,2,0.1\n")
    assert ft.read_data_csv(p).shape == (2, 3)
    p.write_text("t,G\n0,1\n")
    with pytest.raises(ValueError):
        ft.read_data_csv(p)
    p.write_text("x,y\n0,abc\n")
    with pytest.raises(ValueError):
        ft.read_data_csv(p)


@pytest.mark.parametrize("t2", [10.5, 5.3])
def test_lorentzian_round_trip_through_spectrum(t2):
    line = zf.TransitionLine(1.688, 0.5 + 0j, None, None, "J")
    grid = np.linspace(1.688 - 0.3, 1.688 + 0.3, 601)
    y = zf.spectrum(zf.TransitionTable((line,)), {"J": t2}, grid)
    res = ft.fit(ft.ModelSpec("lorentzian", fixed={"baseline": 0.0}), np.column_stack([grid, y]))
    assert res.params["t2"] == pytest.approx(t2, rel=5e-3)


@pytest.mark.parametrize("area", [2.0, -3.0e4])
def test_lorentzian_either_sign_from_default_guess(area):
    truth = {"center": 1.688, "area": area, "t2": 10.5, "baseline": 0.0}
    x = np.linspace(1.188, 2.188, 1001)
    res = ft.fit(ft.ModelSpec("lorentzian"), synth("lorentzian", truth, x))
    assert res.converged
    assert res.params["t2"] == pytest.approx(10.5, rel=1e-6)
    assert res.params["area"] == pytest.approx(area, rel=1e-6)
