import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinamp.bloch import (BlochParams, Trajectory, calibrate_kappa, default_dt, dipolar_field, envelope,
                           evolve, rotating_frame_envelope, saturation_scale, saturation_scan)
from spinamp.core import DriveField, SampleSpec, amplification_transient, magnetization
from spinamp.errors import CalibrationError, NumericalError, StepSizeError
from spinamp.signal import SensingProtocol, interference_ratio_first_order, phase_model

from conftest import GAMMA_H

NU0 = 250.0


def params_for(sample, amplitude=1e-11, delta=0.0, kappa=2.0, **kw):
    p = BlochParams.for_larmor(sample, NU0, DriveField(amplitude, NU0), kappa=kappa, **kw)
    return p.with_detuning(delta)


def test_no_drive_stays_at_equilibrium(weak_sample):
    p = params_for(weak_sample, amplitude=0.0, relaxation="equilibrium")
    tr = evolve(p, 0.2)
    m0 = magnetization(weak_sample)
    assert np.all(tr.m[:, :2] == 0.0)
    assert np.allclose(tr.m[:, 2], m0, rtol=1e-15, atol=0)


def test_free_decay_of_tipped_state(weak_sample):
    p = params_for(weak_sample, amplitude=0.0)
    m0 = magnetization(weak_sample)
    tr = evolve(p, 1.6, initial=(m0, 0.0, 0.0))
    expected = m0 * np.exp(-tr.t / weak_sample.T2)
    assert np.max(np.abs(tr.transverse / expected - 1)) < 1e-6


def test_envelope_peaks_near_t2(weak_sample):
    tr = evolve(params_for(weak_sample), 2.4)
    t_peak = tr.t[np.argmax(tr.transverse)]
    assert abs(t_peak - weak_sample.T2) <= 0.02 * weak_sample.T2


def test_norm_conserved_without_relaxation():
    s = SampleSpec.from_polarized_count(gamma=GAMMA_H, nVP0=1e17, V=5e-7, T1=math.inf, T2=math.inf, xi=2e4)
    p = BlochParams.for_larmor(s, NU0, DriveField(1e-9, NU0))
    dt = 1.0 / (1000 * NU0)
    tr = evolve(p, 1_000_000 * dt, dt)
    assert len(tr) == 1_000_001
    n = np.linalg.norm(tr.m, axis=1)
    assert np.max(np.abs(n / n[0] - 1.0)) < 1e-9


def test_norm_bounded_when_relaxing_to_m0(weak_sample):
    p = params_for(weak_sample, amplitude=5e-9, relaxation="equilibrium")
    tr = evolve(p, 2.0)
    assert np.max(np.linalg.norm(tr.m, axis=1)) <= magnetization(weak_sample) * (1 + 1e-9)


def test_trajectory_time_axis_uniform(weak_sample):
    tr = evolve(params_for(weak_sample), 0.1)
    steps = np.diff(tr.t)
    assert np.all(steps > 0)
    k = np.arange(len(tr))
    assert np.all(np.abs(tr.t - (tr.t0 + k * tr.dt)) <= 1e-12 * np.maximum(tr.t, tr.dt))
    assert tr.t[-1] == pytest.approx(0.1, rel=1e-12)


def test_step_size_rejected(weak_sample):
    with pytest.raises(StepSizeError):
        evolve(params_for(weak_sample), 0.1, dt=1.0 / (40 * NU0))
    evolve(params_for(weak_sample), 0.01, dt=1.0 / (50 * NU0))


def test_nan_aborts_with_diagnostic(weak_sample):
    p = params_for(weak_sample)
    with pytest.raises(NumericalError, match="non-finite"):
        evolve(p, 0.01, initial=(float("nan"), 0.0, 0.0))


def test_dt_convergence(weak_sample):
    p = params_for(weak_sample, delta=2 * math.pi * 0.3)
    dt = default_dt(p)
    coarse = dipolar_field(evolve(p, 1.0, dt), p).samples
    fine = dipolar_field(evolve(p, 1.0, dt / 2), p).samples[::2]
    assert np.max(np.abs(coarse - fine)) < 1e-6 * np.max(np.abs(coarse))


def test_fourth_order_convergence(weak_sample):
    p = params_for(weak_sample, amplitude=1e-9)
    errs = []
    ref = evolve(p, 0.2, 1.0 / (3200 * NU0)).m[-1]
    for k in (100, 200):
        errs.append(np.linalg.norm(evolve(p, 0.2, 1.0 / (k * NU0)).m[-1] - ref))
    assert math.log2(errs[0] / errs[1]) >= 3.8


def test_xi_doubles_dipolar_field(weak_sample):
    p1 = params_for(weak_sample)
    p2 = params_for(weak_sample.with_(xi=2 * weak_sample.xi))
    tr = evolve(p1, 0.3)
    b1 = dipolar_field(tr, p1).samples
    b2 = dipolar_field(evolve(p2, 0.3), p2).samples
    assert np.allclose(b2, 2 * b1, rtol=1e-12, atol=0)


def test_zero_transverse_gives_zero_field(weak_sample):
    p = params_for(weak_sample, amplitude=0.0)
    assert not np.any(dipolar_field(evolve(p, 0.05), p).samples)


def test_rotating_frame_cross_check(weak_sample):
    assert NU0 >= 100 / weak_sample.T2
    for amp in (1e-11, 3e-9):
        for delta in (0.0, 2 * math.pi * 0.4):
            p = params_for(weak_sample, amplitude=amp, delta=delta)
            tr = evolve(p, 2.4)
            env = envelope(tr, p)
            closed = rotating_frame_envelope(p, tr.t)
            assert np.max(np.abs(env - closed)) <= 0.02 * np.max(closed)


def test_detuning_asymmetry_is_counter_rotating_transient(weak_sample):
    """Envelopes at +delta and -delta differ only through the counter-rotating drive term,
    whose start-up transient shrinks as 1/nu0."""
    d = 2 * math.pi * 0.5
    gaps = []
    for nu0 in (250.0, 500.0):
        base = BlochParams.for_larmor(weak_sample, nu0, DriveField(1e-11, nu0), kappa=2.0)
        dt = 1.0 / (500 * (nu0 + 1))
        ep = envelope(evolve(base.with_detuning(d), 1.6, dt), base)
        em = envelope(evolve(base.with_detuning(-d), 1.6, dt), base)
        gaps.append(np.max(np.abs(ep - em)) / np.max(ep))
    assert gaps[0] < 5e-3
    assert gaps[0] / gaps[1] == pytest.approx(2.0, rel=0.02)
    t = np.linspace(0, 2.4, 500)
    plus = rotating_frame_envelope(params_for(weak_sample, delta=d), t)
    minus = rotating_frame_envelope(params_for(weak_sample, delta=-d), t)
    assert np.max(np.abs(plus - minus)) <= 1e-12 * np.max(plus)


@pytest.mark.xfail(strict=True, reason="lab-frame drive: counter-rotating transient gives ~2.6e-3 at nu0=250 Hz; "
                                       "1e-6 would need nu0*T2 ~ 5e5")
def test_detuning_symmetry_at_1e6(weak_sample):
    d = 2 * math.pi * 0.5
    dt = 1.0 / (500 * (NU0 + 1))
    ep = envelope(evolve(params_for(weak_sample, delta=d), 1.6, dt), params_for(weak_sample))
    em = envelope(evolve(params_for(weak_sample, delta=-d), 1.6, dt), params_for(weak_sample))
    assert np.max(np.abs(ep - em)) <= 1e-6 * np.max(ep)


def test_calibration_reproduces_closed_form(weak_sample):
    b0 = 2 * math.pi * NU0 / GAMMA_H
    kappa = calibrate_kappa(weak_sample, b0)
    assert kappa == pytest.approx(2.0, rel=1e-3)
    amp = 1e-4 * saturation_scale(weak_sample)
    p = BlochParams(weak_sample, b0, DriveField(amp, NU0), kappa=kappa)
    tr = evolve(p, weak_sample.T2)
    measured = envelope(tr, p)[-1] / amp
    assert measured == pytest.approx(amplification_transient(weak_sample, weak_sample.T2, 0.0), rel=1e-6)


def test_calibration_independent_of_amplitude_and_count(weak_sample):
    b0 = 2 * math.pi * NU0 / GAMMA_H
    bsat = saturation_scale(weak_sample)
    ks = [calibrate_kappa(weak_sample, b0, amplitude=f * bsat) for f in (1e-5, 1e-4, 1e-3)]
    assert max(ks) / min(ks) - 1 < 0.01
    k10 = calibrate_kappa(weak_sample.with_(n=10 * weak_sample.n), b0)
    assert k10 / ks[1] - 1 < 0.01


def test_calibration_rejects_large_amplitude(weak_sample):
    b0 = 2 * math.pi * NU0 / GAMMA_H
    with pytest.raises(CalibrationError):
        calibrate_kappa(weak_sample, b0, amplitude=0.01 * saturation_scale(weak_sample))


def test_calibration_flags_broken_convention(weak_sample):
    # the equilibrium model cannot reproduce the decaying law by an O(1) factor at large T1/T2
    s = weak_sample.with_(T1=1e6)
    b0 = 2 * math.pi * NU0 / GAMMA_H
    k = calibrate_kappa(s, b0, relaxation="equilibrium")
    assert 0.25 <= k <= 4


def _sat_protocol(delta):
    return SensingProtocol(sensing_time=2.4, detuning=delta, model="bloch", nu0=NU0)


def test_saturation_small_signal_limit(weak_sample):
    delta = 1.0 / weak_sample.T2
    p = params_for(weak_sample, delta=delta)
    (amp, R), = saturation_scan(p, [1e-12], _sat_protocol(delta))
    t = 2.4
    g = abs(amplification_transient(weak_sample, round(t * p.drive.frequency) / p.drive.frequency, delta))
    # the record-averaged phasor differs from the end-of-record value; compare against the simulated g, phi
    from spinamp.signal import simulate_ratio
    res = simulate_ratio(p.with_drive(amplitude=1e-12), _sat_protocol(delta))
    assert R == pytest.approx(interference_ratio_first_order(res.g, res.phi), abs=0.01 * (R - 1) + 1e-9)
    assert g > 0


def test_saturation_undamped_linear_regime_flat():
    s = SampleSpec.from_polarized_count(gamma=GAMMA_H, nVP0=1e17, V=5e-7, T1=math.inf, T2=math.inf, xi=2e4)
    p = BlochParams.for_larmor(s, NU0, DriveField(1e-13, NU0), kappa=2.0).with_detuning(2 * math.pi * 0.5)
    rows = saturation_scan(p, [1e-14, 1e-13, 1e-12], _sat_protocol(2 * math.pi * 0.5))
    rs = [r for _, r in rows]
    assert max(rs) - min(rs) < 1e-3


def test_saturation_scan_validates_order(weak_sample):
    with pytest.raises(ValueError):
        saturation_scan(params_for(weak_sample), [2e-9, 1e-9], _sat_protocol(0.0))


def test_parallel_scan_matches_serial(weak_sample):
    p = params_for(weak_sample, delta=1.5)
    prot = SensingProtocol(sensing_time=0.5, detuning=1.5, model="bloch", nu0=NU0, noise_rms=1e-12, seed=3)
    amps = [1e-10, 1e-9, 3e-9]
    assert saturation_scan(p, amps, prot, workers=3) == saturation_scan(p, amps, prot, workers=1)


def test_trajectory_csv(tmp_path, weak_sample):
    tr = evolve(params_for(weak_sample), 0.01)
    tr.to_csv(tmp_path / "t.csv")
    head = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert head == "t_s,mx_A_per_m,my_A_per_m,mz_A_per_m"


@settings(max_examples=15)
@given(st.floats(-3.0, 3.0))
def test_linear_regime_matches_transient_law(delta_t2):
    s = SampleSpec.from_polarized_count(gamma=GAMMA_H, nVP0=1e17, V=5e-7, T1=0.8, T2=0.8, xi=2e4, P0=2e-4)
    delta = delta_t2 / s.T2
    p = params_for(s, amplitude=1e-12, delta=delta)
    tr = evolve(p, 1.6)
    ratio = envelope(tr, p) / p.drive.amplitude
    law = np.abs(amplification_transient(s, tr.t, delta))
    assert np.max(np.abs(ratio - law)) <= 0.03 * np.max(law)


def test_trajectory_rejects_bad_shape():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((1, 3)), 1e-3)
