import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinamp import zerofield as zf
from spinamp.constants import gamma_of
from spinamp.core import SampleSpec, amplification_transient

J_NH = -1.688


@pytest.fixture(scope="module")
def nh3():
    c = zf.SpinCluster.xa_n("15N", "1H", 3, J_NH)
    return c, zf.eigensystem(zf.build_hamiltonian(c), c)


def test_hamiltonian_traceless_and_hermitian(nh3):
    c, eig = nh3
    h = eig.hamiltonian
    assert abs(np.trace(h)) < 1e-12
    assert np.max(np.abs(h - h.conj().T)) == 0.0


def test_zero_coupling_gives_zero_hamiltonian():
    c = zf.SpinCluster.xa_n("15N", "1H", 3, 0.0)
    h = zf.build_hamiltonian(c)
    assert not np.any(h)
    eig = zf.eigensystem(h, c)
    assert np.all(eig.frequencies_hz == 0.0)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_xa_closed_form_oracle(n):
    c = zf.SpinCluster.xa_n("15N", "1H", n, J_NH)
    eig = zf.eigensystem(zf.build_hamiltonian(c), c)
    oracle = zf.xa_energies(n, J_NH)
    assert len(oracle) == 2 ** (n + 1)
    assert np.max(np.abs(np.sort(eig.frequencies_hz) - np.array([e for _, _, e in oracle]))) < 1e-10
    if n >= 2:
        got = sorted((lb.F, lb.K, round(e, 9)) for lb, e in zip(eig.labels, eig.frequencies_hz))
        want = sorted((F, K, round(e, 9)) for F, K, e in oracle)
        assert got == want


def test_nh3_multiplicities(nh3):
    _, eig = nh3
    counts = {}
    for lb in eig.labels:
        counts[(lb.F, lb.K)] = counts.get((lb.F, lb.K), 0) + 1
    assert counts == {(2.0, 1.5): 5, (1.0, 1.5): 3, (1.0, 0.5): 6, (0.0, 0.5): 2}
    assert all(lb.ok for lb in eig.labels)


def test_two_spin_gap_is_j():
    c = zf.SpinCluster.xa_n("13C", "1H", 1, 5.0)
    eig = zf.eigensystem(zf.build_hamiltonian(c), c)
    levels = np.unique(np.round(eig.frequencies_hz, 9))
    assert levels.size == 2 and levels[1] - levels[0] == pytest.approx(5.0, abs=1e-12)


def test_eigenvectors_orthonormal_and_exact(nh3):
    _, eig = nh3
    v = eig.states
    assert np.max(np.abs(v.conj().T @ v - np.eye(16))) < 1e-10
    h = eig.hamiltonian
    resid = h @ v - v * eig.energies
    assert np.max(np.abs(resid)) <= 1e-9 * np.max(np.abs(h))


def test_labels_are_eigenstates(nh3):
    _, eig = nh3
    _, _, fz, f2 = zf.total_spin(4)
    for col, lb in zip(eig.states.T, eig.labels):
        assert np.linalg.norm(f2 @ col - lb.F * (lb.F + 1) * col) <= 1e-8
        assert np.linalg.norm(fz @ col - lb.MF * col) <= 1e-8


def test_commutation_with_total_spin(nh3):
    _, eig = nh3
    h = eig.hamiltonian
    _, _, fz, f2 = zf.total_spin(4)
    scale = np.max(np.abs(h))
    assert np.max(np.abs(h @ f2 - f2 @ h)) <= 1e-12 * scale
    assert np.max(np.abs(h @ fz - fz @ h)) <= 1e-12 * scale


@settings(max_examples=25)
@given(st.floats(0.0, 100.0 / abs(J_NH)))
def test_propagator_unitary(t):
    c = zf.SpinCluster.xa_n("15N", "1H", 3, J_NH)
    eig = zf.eigensystem(zf.build_hamiltonian(c), c)
    u = zf.propagator(eig, t)
    assert np.max(np.abs(u.conj().T @ u - np.eye(16))) <= 1e-10


def test_nh3_lines_only_at_j_and_2j(nh3):
    c, eig = nh3
    table = zf.transitions(eig, zf.polarized_density(c, 1e-3), zf.detection_operator(c, "z"))
    assert len(table) == 2
    f = table.frequencies
    assert abs(f[0] - 1.688) <= 1e-9 and abs(f[1] - 3.376) <= 1e-9
    assert [ln.manifold for ln in table] == ["J", "2J"]
    assert np.all(np.abs(np.imag(table.amplitudes)) <= 1e-12 * np.max(np.abs(table.amplitudes)))


def test_unpolarized_state_has_no_lines(nh3):
    c, eig = nh3
    table = zf.transitions(eig, np.eye(16) / 16, zf.detection_operator(c))
    assert len(table) == 0


def test_transitions_validate_inputs(nh3):
    c, eig = nh3
    with pytest.raises(ValueError):
        zf.transitions(eig, np.eye(16) / 8, zf.detection_operator(c))
    bad = np.zeros((16, 16), complex)
    bad[0, 1] = 1
    with pytest.raises(ValueError):
        zf.transitions(eig, np.eye(16) / 16, bad)


@pytest.mark.parametrize("perm", list(itertools.permutations([1, 2, 3])))
def test_permutation_of_equivalent_protons(nh3, perm):
    c, eig = nh3
    ref = zf.transitions(eig, zf.polarized_density(c, 1e-3), zf.detection_operator(c))
    pc = c.permuted([0, *perm])
    peig = zf.eigensystem(zf.build_hamiltonian(pc), pc)
    got = zf.transitions(peig, zf.polarized_density(pc, 1e-3), zf.detection_operator(pc))
    assert np.max(np.abs(got.frequencies - ref.frequencies)) <= 1e-10
    assert np.max(np.abs(got.amplitudes - ref.amplitudes)) <= 1e-10 * np.max(np.abs(ref.amplitudes))


def test_all_xa3_lines_in_j_manifolds():
    rng = np.random.default_rng(5)
    c = zf.SpinCluster.xa_n("15N", "1H", 3, J_NH)
    eig = zf.eigensystem(zf.build_hamiltonian(c), c)
    for _ in range(5):
        a = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
        rho = np.eye(16) / 16 + 1e-3 * (a + a.conj().T) / 16
        rho = rho - (np.trace(rho) - 1) * np.eye(16) / 16
        for ln in zf.transitions(eig, rho, zf.detection_operator(c, "x")):
            assert min(abs(ln.freq_hz - 1.688), abs(ln.freq_hz - 3.376)) <= 1e-9


def test_spectrum_hwhm():
    line = zf.TransitionLine(1.0, 1.0 + 0j, zf.StateLabel(1, 0), zf.StateLabel(0, 0), "J")
    table = zf.TransitionTable((line,))
    grid = np.linspace(0.9, 1.1, 200001)
    spec = zf.spectrum(table, {"J": 10.5}, grid)
    half = grid[spec >= spec.max() / 2]
    hwhm = (half[-1] - half[0]) / 2
    assert abs(hwhm - 1 / (2 * math.pi * 10.5)) <= grid[1] - grid[0]
    assert 1 / (2 * math.pi * 10.5) == pytest.approx(0.01516, abs=1e-5)


def test_spectrum_peak_ratio_follows_t2():
    a = zf.TransitionLine(1.0, 1.0 + 0j, zf.StateLabel(1, 0), zf.StateLabel(0, 0), "J")
    b = zf.TransitionLine(2.0, 1.0 + 0j, zf.StateLabel(1, 0), zf.StateLabel(0, 0), "2J")
    grid = np.linspace(0, 3, 30001)
    spec = zf.spectrum(zf.TransitionTable((a, b)), {"J": 10.0, "2J": 5.0}, grid)
    pa, pb = spec[np.argmin(abs(grid - 1))], spec[np.argmin(abs(grid - 2))]
    assert pa / pb == pytest.approx(2.0, rel=0.01)


def test_empty_spectrum_is_zero():
    assert not np.any(zf.spectrum(zf.TransitionTable(()), {"default": 1.0}, np.linspace(0, 1, 11)))


def _env(p0=1e-4):
    return SampleSpec(gamma=1.0, n=1.15e28, V=5e-7, P0=p0, T1=21.1, T2=5.3, xi=2e4)


def test_uncoupled_spin_has_no_manifold():
    c = zf.SpinCluster(("1H",), (gamma_of("1H"),), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        zf.effective_two_level(c, "J", _env())


def test_xa_pair_reduction_matches_hand_result():
    gx, ga = gamma_of("15N"), gamma_of("1H")
    c = zf.SpinCluster.xa_n("15N", "1H", 1, J_NH)
    env = _env()
    eff = zf.effective_two_level(c, "J", env, t2=5.3)
    # singlet-triplet moments with X polarized: gamma_eff^2 = (gamma_A - gamma_X)^2 / 4
    assert eff.gamma ** 2 / ((ga - gx) ** 2 / 4) == pytest.approx(1.0, abs=1e-9)
    bare = env.with_(gamma=abs(ga - gx) / 2, T2=5.3)
    assert amplification_transient(eff, 5.3, 0.0) / amplification_transient(bare, 5.3, 0.0) == \
        pytest.approx(1.0, abs=1e-9)


def test_2j_manifold_near_reported_amplification():
    c = zf.SpinCluster.xa_n("15N", "1H", 3, J_NH)
    eff = zf.effective_two_level(c, "2J", _env(3e-4), t2=5.3)
    g = amplification_transient(eff, 5.3, 0.0)
    assert 0.132 / 3 <= g <= 0.132 * 3


def test_zero_coupling_has_no_manifold():
    c = zf.SpinCluster.xa_n("15N", "1H", 3, 0.0)
    with pytest.raises(ValueError):
        zf.effective_two_level(c, "2J", _env())


def test_cluster_validation():
    with pytest.raises(ValueError):
        zf.SpinCluster(("a", "b"), (1.0, 1.0), np.array([[0, 1], [2, 0]]))
    with pytest.raises(ValueError):
        zf.SpinCluster(("a",) * 9, (1.0,) * 9, np.zeros((9, 9)))
    with pytest.raises(ValueError):
        zf.SpinCluster(("a", "b"), (1.0, 1.0), np.array([[1, 1], [1, 0]]))


def test_cluster_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("spins: [15N, 1H]\ncouplings:\n  - [0, 1, -1.688]\n")
    c = zf.load_cluster(p)
    assert c.labels == ("15N", "1H") and c.j[0, 1] == -1.688


def test_lines_csv(tmp_path, nh3):
    c, eig = nh3
    table = zf.transitions(eig, zf.polarized_density(c, 1e-3), zf.detection_operator(c))
    table.to_csv(tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "freq_hz,amplitude"
