"""Zero-field dynamics of small J-coupled spin-1/2 clusters.

At zero field the Hamiltonian is pure scalar coupling,

    H / hbar = 2 pi sum_{i<j} J_ij I_i . I_j        (rad/s),

so eigenstates carry total angular momentum F and its projection M_F (and,
for an XA_n cluster, the total spin K of the n equivalent nuclei).
Operators are dense matrices on the tensor-product Zeeman basis with spin 0
as the most significant factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .core import SampleSpec
from .series import write_csv

__all__ = [
    "SpinCluster",
    "StateLabel",
    "EigenSystem",
    "TransitionLine",
    "TransitionTable",
    "spin_operator",
    "total_spin",
    "build_hamiltonian",
    "eigensystem",
    "transitions",
    "spectrum",
    "effective_two_level",
    "polarized_density",
    "detection_operator",
    "propagator",
    "xa_energies",
    "load_cluster",
    "MERGE_TOL_HZ",
    "MANIFOLD_WINDOW",
]

MAX_SPINS = 8
MERGE_TOL_HZ = 1e-9
MANIFOLD_WINDOW = 0.05

_PAULI = {
    "x": np.array([[0, 0.5], [0.5, 0]], dtype=complex),
    "y": np.array([[0, -0.5j], [0.5j, 0]], dtype=complex),
    "z": np.array([[0.5, 0], [0, -0.5]], dtype=complex),
}


@dataclass(frozen=True, eq=False)
class SpinCluster:
    """Spin-1/2 nuclei with gyromagnetic ratios (rad s^-1 T^-1) and couplings J (Hz)."""

    labels: Tuple[str, ...]
    gammas: Tuple[float, ...]
    j: np.ndarray

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        gammas = tuple(float(g) for g in self.gammas)
        j = np.array(self.j, dtype=float)
        n = len(labels)
        if n < 1 or len(gammas) != n:
            raise ValueError("labels and gammas must be non-empty and of equal length")
        if n > MAX_SPINS:
            raise ValueError(f"{n} spins exceeds the {MAX_SPINS}-spin limit (matrix size 2^{n})")
        if j.shape != (n, n):
            raise ValueError(f"J matrix must be {n}x{n}, got {j.shape}")
        if not np.all(np.isfinite(j)):
            raise ValueError("J matrix must be finite")
        if np.max(np.abs(j - j.T), initial=0.0) > 1e-15 * max(1.0, np.max(np.abs(j), initial=0.0)):
            raise ValueError("J matrix must be symmetric")
        if np.any(np.diag(j) != 0):
            raise ValueError("J matrix must have a zero diagonal")
        j.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "gammas", gammas)
        object.__setattr__(self, "j", j)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return 2 ** self.n

    @property
    def j_ref(self) -> float:
        """Largest |J_ij|, the reference for J / 2J manifold tags."""
        return float(np.max(np.abs(self.j), initial=0.0))

    @classmethod
    def xa_n(cls, x: str, a: str, n: int, j_hz: float, *, j_aa: float = 0.0,
             constants: PhysicalConstants = DEFAULT_CONSTANTS) -> "SpinCluster":
        """One X nucleus equally coupled to ``n`` equivalent A nuclei (spin 0 is X)."""
        size = n + 1
        j = np.full((size, size), float(j_aa))
        j[0, :] = j[:, 0] = j_hz
        np.fill_diagonal(j, 0.0)
        labels = (x,) + (a,) * n
        return cls(labels, tuple(constants.gamma(lab) for lab in labels), j)

    def permuted(self, order: Sequence[int]) -> "SpinCluster":
        order = list(order)
        return SpinCluster(tuple(self.labels[i] for i in order), tuple(self.gammas[i] for i in order),
                           self.j[np.ix_(order, order)])

    def equivalent_subset(self) -> Optional[Tuple[int, ...]]:
        """Indices of the largest group of magnetically equivalent spins (size >= 2).

        Equivalent spins share a gyromagnetic ratio and couple identically to
        every spin outside the group.
        """
        best = None
        for i in range(self.n):
            group = [k for k in range(self.n)
                     if self.gammas[k] == self.gammas[i] and self.labels[k] == self.labels[i]]
            outside = [m for m in range(self.n) if m not in group]
            if len(group) < 2:
                continue
            if all(np.all(self.j[group, m] == self.j[group[0], m]) for m in outside):
                if best is None or len(group) > len(best):
                    best = tuple(group)
        return best


@lru_cache(maxsize=64)
def _spin_operator_cached(n: int, k: int, axis: str) -> np.ndarray:
    op = np.ones((1, 1), dtype=complex)
    for i in range(n):
        op = np.kron(op, _PAULI[axis] if i == k else np.eye(2, dtype=complex))
    op.setflags(write=False)
    return op


def spin_operator(n: int, k: int, axis: str) -> np.ndarray:
    """``I_{k,axis}`` embedded in the ``2**n`` tensor-product space."""
    if not 0 <= k < n:
        raise IndexError(f"spin index {k} out of range for {n} spins")
    return _spin_operator_cached(n, k, axis)


def total_spin(n: int, subset: Optional[Sequence[int]] = None):
    """Return ``(Sx, Sy, Sz, S^2)`` summed over ``subset`` (all spins by default)."""
    idx = range(n) if subset is None else subset
    comps = [sum(spin_operator(n, k, a) for k in idx) for a in "xyz"]
    sq = sum(c @ c for c in comps)
    return comps[0], comps[1], comps[2], sq


def build_hamiltonian(cluster: SpinCluster) -> np.ndarray:
    """``H / hbar`` (rad/s) of the scalar couplings."""
    n = cluster.n
    h = np.zeros((cluster.dim, cluster.dim), dtype=complex)
    for i in range(n):
        for k in range(i + 1, n):
            jik = cluster.j[i, k]
            if jik == 0:
                continue
            dot = sum(spin_operator(n, i, a) @ spin_operator(n, k, a) for a in "xyz")
            h += 2.0 * math.pi * jik * dot
    return h


@dataclass(frozen=True)
class StateLabel:
    F: Optional[float]
    MF: Optional[float]
    K: Optional[float] = None
    ok: bool = True
    note: str = ""

    def short(self) -> str:
        def fmt(x):
            if x is None:
                return "?"
            return str(int(x)) if float(x).is_integer() else f"{int(round(2 * x))}/2"
        s = f"F={fmt(self.F)},M={fmt(self.MF)}"
        if self.K is not None:
            s += f",K={fmt(self.K)}"
        return s


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Energies (rad/s, ascending), eigenvector columns and quantum-number labels."""

    energies: np.ndarray
    states: np.ndarray
    labels: Tuple[StateLabel, ...]
    cluster: SpinCluster
    hamiltonian: np.ndarray = field(repr=False)

    @property
    def frequencies_hz(self) -> np.ndarray:
        return self.energies / (2.0 * math.pi)

    def to_eigenbasis(self, op: np.ndarray) -> np.ndarray:
        return self.states.conj().T @ op @ self.states


def _blocks(values: np.ndarray, tol: float) -> List[np.ndarray]:
    order = np.argsort(values, kind="stable")
    groups, current = [], [order[0]]
    for a, b in zip(order[:-1], order[1:]):
        if values[b] - values[a] <= tol:
            current.append(b)
        else:
            groups.append(np.array(current))
            current = [b]
    groups.append(np.array(current))
    return groups


def _refine(vecs: np.ndarray, op: np.ndarray, tol: float) -> List[np.ndarray]:
    """Split the column space of ``vecs`` into eigen-subspaces of Hermitian ``op``."""
    sub = vecs.conj().T @ op @ vecs
    w, u = np.linalg.eigh(0.5 * (sub + sub.conj().T))
    rotated = vecs @ u
    return [rotated[:, g] for g in _blocks(w, tol)]


def _spin_from_square(s2: float) -> Tuple[Optional[float], bool]:
    s = 0.5 * (-1.0 + math.sqrt(max(1.0 + 4.0 * s2, 0.0)))
    ok = abs(2.0 * s - round(2.0 * s)) <= 1e-6
    return (round(2.0 * s) / 2.0 if ok else s), ok


def eigensystem(h: np.ndarray, cluster: SpinCluster) -> EigenSystem:
    """Diagonalize ``h`` and label states by (F, M_F[, K]).

    Degenerate energy subspaces are rotated to simultaneously diagonalize F^2,
    K^2 (when ``cluster`` has an equivalent subset whose K^2 commutes with
    ``h``) and F_z.  Unresolvable labels are flagged per state.
    """
    h = np.asarray(h, dtype=complex)
    scale = max(np.max(np.abs(h), initial=0.0), 1.0)
    if np.max(np.abs(h - h.conj().T), initial=0.0) > 1e-12 * scale:
        raise ValueError("Hamiltonian is not Hermitian")
    n = cluster.n
    _, _, fz, f2 = total_spin(n)
    ops = [f2]
    subset = cluster.equivalent_subset()
    k2 = None
    if subset is not None:
        k2 = total_spin(n, subset)[3]
        if np.max(np.abs(h @ k2 - k2 @ h)) > 1e-12 * scale * np.max(np.abs(k2)):
            k2 = None
    if k2 is not None:
        ops.append(k2)
    ops.append(fz)

    w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
    tol_e = 1e-9 * scale
    spaces = [v[:, g] for g in _blocks(w, tol_e)]
    for op in ops:
        spaces = [piece for sp in spaces for piece in _refine(sp, op, 1e-6)]
    states = np.concatenate(spaces, axis=1)
    energies = np.real(np.einsum("ij,ik,kj->j", states.conj(), h, states))
    order = np.argsort(energies, kind="stable")
    energies, states = energies[order], states[:, order]

    labels = []
    for col in states.T:
        notes = []
        f2v = float(np.real(col.conj() @ f2 @ col))
        F, okF = _spin_from_square(f2v)
        if np.linalg.norm(f2 @ col - f2v * col) > 1e-8:
            okF = False
            notes.append("not an F^2 eigenstate")
        mz = float(np.real(col.conj() @ fz @ col))
        okM = abs(2 * mz - round(2 * mz)) <= 1e-6 and np.linalg.norm(fz @ col - mz * col) <= 1e-8
        K = None
        if k2 is not None:
            kv = float(np.real(col.conj() @ k2 @ col))
            K, okK = _spin_from_square(kv)
            if not okK:
                notes.append("K not half-integer")
        else:
            okK = True
        if not okF:
            notes.append("F not half-integer")
        if not okM:
            notes.append("M_F not resolved")
        labels.append(StateLabel(F if okF else None, round(2 * mz) / 2 if okM else None, K,
                                 okF and okM and okK, "; ".join(notes)))
    return EigenSystem(energies, states, tuple(labels), cluster, h)


def xa_energies(n: int, j_hz: float) -> List[Tuple[float, float, float]]:
    """Closed-form XA_n zero-field levels ``(F, K, E/h in Hz)`` with multiplicity.

    ``E(F, K)/h = (J/2) [F(F+1) - K(K+1) - 3/4]``; each (F, K) appears
    ``(2F+1)`` times per K-multiplet copy.
    """
    from math import comb

    out = []
    kmax = n / 2.0
    k = kmax
    while k >= 0:
        # number of K multiplets among n spin-1/2: C(n, n/2-K) - C(n, n/2-K-1)
        lo = int(round(n / 2.0 - k))
        copies = comb(n, lo) - (comb(n, lo - 1) if lo >= 1 else 0)
        for F in {k + 0.5, abs(k - 0.5)}:
            e = 0.5 * j_hz * (F * (F + 1) - k * (k + 1) - 0.75)
            out.extend([(F, k, e)] * int((2 * F + 1) * copies))
        k -= 1.0
    return sorted(out, key=lambda x: x[2])


def propagator(eig: EigenSystem, t: float) -> np.ndarray:
    """``U(t) = exp(-i H t)`` from the eigen-decomposition."""
    phase = np.exp(-1j * eig.energies * t)
    return (eig.states * phase) @ eig.states.conj().T


def polarized_density(cluster: SpinCluster, polarization: float, spin: int = 0) -> np.ndarray:
    """``(1/d) (1 + polarization * 2 I_{spin,z})``."""
    if not -1.0 <= polarization <= 1.0:
        raise ValueError("polarization must lie in [-1, 1]")
    d = cluster.dim
    return (np.eye(d) + polarization * 2.0 * spin_operator(cluster.n, spin, "z")) / d


def detection_operator(cluster: SpinCluster, axis: str = "z") -> np.ndarray:
    """Gyromagnetic-weighted total magnetization ``sum_i gamma_i I_{i,axis}``."""
    return sum(g * spin_operator(cluster.n, i, axis) for i, g in enumerate(cluster.gammas))


@dataclass(frozen=True)
class TransitionLine:
    freq_hz: float
    amplitude: complex
    initial: StateLabel
    final: StateLabel
    manifold: str
    n_pairs: int = 1


@dataclass(frozen=True)
class TransitionTable:
    lines: Tuple[TransitionLine, ...]

    def __len__(self):
        return len(self.lines)

    def __iter__(self):
        return iter(self.lines)

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([ln.freq_hz for ln in self.lines])

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([ln.amplitude for ln in self.lines])

    def manifold(self, tag: str) -> "TransitionTable":
        return TransitionTable(tuple(ln for ln in self.lines if ln.manifold == tag))

    def to_csv(self, path) -> None:
        write_csv(path, ("freq_hz", "amplitude"),
                  (self.frequencies, np.real(self.amplitudes)))


def _manifold_tag(freq: float, j_ref: float) -> str:
    if j_ref > 0:
        if abs(freq - j_ref) <= MANIFOLD_WINDOW * j_ref:
            return "J"
        if abs(freq - 2 * j_ref) <= MANIFOLD_WINDOW * 2 * j_ref:
            return "2J"
    return "other"


def _check_hermitian(name, a):
    scale = max(np.max(np.abs(a), initial=0.0), 1e-300)
    if np.max(np.abs(a - a.conj().T)) > 1e-12 * scale:
        raise ValueError(f"{name} is not Hermitian")


def transitions(eig: EigenSystem, rho0: np.ndarray, detect: np.ndarray, *,
                amp_tol: Optional[float] = None, j_ref: Optional[float] = None) -> TransitionTable:
    """Observable lines of ``Tr(detect rho(t))`` under free zero-field evolution.

    Each ordered pair (k, l) of eigenstates contributes
    ``<k|detect|l><l|rho0|k>`` at ``|E_k - E_l| / 2 pi``.  Lines closer than
    1e-9 Hz are merged (which makes amplitudes real for Hermitian inputs);
    static (zero-frequency) terms and lines with ``|amplitude| <= amp_tol``
    are dropped.
    """
    rho0 = np.asarray(rho0, dtype=complex)
    detect = np.asarray(detect, dtype=complex)
    _check_hermitian("rho0", rho0)
    _check_hermitian("detect", detect)
    if abs(np.trace(rho0) - 1.0) > 1e-9:
        raise ValueError(f"rho0 must have unit trace, got {np.trace(rho0)!r}")
    if j_ref is None:
        j_ref = eig.cluster.j_ref
    if amp_tol is None:
        amp_tol = 1e-12 * np.max(np.abs(detect)) * rho0.shape[0] * np.max(np.abs(rho0))
    d = eig.to_eigenbasis(detect)
    r = eig.to_eigenbasis(rho0)
    contrib = d * r.T  # contrib[k, l] = <k|D|l><l|rho|k>
    freqs = np.abs(eig.energies[:, None] - eig.energies[None, :]) / (2.0 * math.pi)
    mask = freqs > MERGE_TOL_HZ
    ks, ls = np.nonzero(mask)
    if ks.size == 0:
        return TransitionTable(())
    fs = freqs[ks, ls]
    lines = []
    for grp in _blocks(fs, MERGE_TOL_HZ):
        amp = complex(np.sum(contrib[ks[grp], ls[grp]]))
        if abs(amp) <= amp_tol:
            continue
        mags = np.abs(contrib[ks[grp], ls[grp]])
        top = grp[int(np.argmax(mags))]
        k, l = ks[top], ls[top]
        hi, lo = (k, l) if eig.energies[k] >= eig.energies[l] else (l, k)
        f = float(np.mean(fs[grp]))
        lines.append(TransitionLine(f, amp, eig.labels[hi], eig.labels[lo],
                                    _manifold_tag(f, j_ref), int(grp.size)))
    lines.sort(key=lambda ln: ln.freq_hz)
    return TransitionTable(tuple(lines))


def spectrum(table: TransitionTable, t2_by_manifold: Mapping[str, float], grid) -> np.ndarray:
    """Sum of Lorentzians on ``grid`` (Hz).

    Each line contributes ``A (T2/pi) / (1 + (2 pi (f - f0) T2)^2)`` with
    ``A = Re(amplitude)`` and the T2 of its manifold (key ``"default"`` is
    the fallback), i.e. half width 1/(2 pi T2) and area A over angular
    frequency.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size > 1 and np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted")
    out = np.zeros_like(grid)
    for ln in table:
        t2 = t2_by_manifold.get(ln.manifold, t2_by_manifold.get("default"))
        if t2 is None:
            raise KeyError(f"no T2 for manifold {ln.manifold!r}")
        if not t2 > 0:
            raise ValueError("T2 values must be positive")
        x = 2.0 * math.pi * (grid - ln.freq_hz) * t2
        out += ln.amplitude.real * (t2 / math.pi) / (1.0 + x * x)
    return out


def effective_two_level(cluster: SpinCluster, manifold: str, sample_env: SampleSpec, *,
                        t2: Optional[float] = None, rho0: Optional[np.ndarray] = None,
                        drive_axis: str = "x") -> SampleSpec:
    """Collapse one manifold of ``cluster`` onto an equivalent two-level sample.

    Every driven transition k <-> l of the manifold responds like a spin-1/2
    with squared moment ``4 |<k|D|l>|^2`` (D the gyromagnetic-weighted spin
    along ``drive_axis``) and population difference ``|p_k - p_l|``.  The
    returned sample carries

        gamma_eff^2 = 4 sum |<k|D|l>|^2 |p_k - p_l| / P0

    with the molecular density, volume, polarization P0 and xi of
    ``sample_env`` and the manifold's T2, so :func:`amplification_transient`
    applies unchanged.  A lone spin-1/2 gives gamma_eff = gamma.
    ``rho0`` defaults to ``polarized_density(cluster, sample_env.P0)``.
    """
    if manifold not in ("J", "2J"):
        raise ValueError(f"unknown manifold {manifold!r}; use 'J' or '2J'")
    if cluster.j_ref == 0:
        raise ValueError("cluster has no couplings, hence no J manifolds")
    if not sample_env.P0 > 0:
        raise ValueError("sample_env.P0 must be positive")
    eig = eigensystem(build_hamiltonian(cluster), cluster)
    if rho0 is None:
        rho0 = polarized_density(cluster, sample_env.P0)
    d = eig.to_eigenbasis(detection_operator(cluster, drive_axis))
    p = np.real(np.diag(eig.to_eigenbasis(np.asarray(rho0, dtype=complex))))
    freqs = np.abs(eig.energies[:, None] - eig.energies[None, :]) / (2.0 * math.pi)
    tags = np.vectorize(lambda f: _manifold_tag(f, cluster.j_ref) if f > MERGE_TOL_HZ else "")(freqs)
    upper = eig.energies[:, None] > eig.energies[None, :]
    sel = (tags == manifold) & upper
    if not np.any(sel):
        raise ValueError(f"cluster has no {manifold} manifold")
    w = float(np.sum((np.abs(d) ** 2 * np.abs(p[:, None] - p[None, :]))[sel]))
    if w == 0:
        raise ValueError(f"no driven transitions in the {manifold} manifold for this rho0")
    gamma_eff = math.sqrt(4.0 * w / sample_env.P0)
    return sample_env.with_(gamma=gamma_eff, T2=sample_env.T2 if t2 is None else t2)


def load_cluster(path, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> SpinCluster:
    """Read a cluster definition (YAML).

    Schema::

        spins:
          - label: 15N                  # gamma from the constants table, or
            gamma_mhz_per_t: -4.3156    # explicit gamma/2pi
        j_hz:                           # full symmetric matrix, or
          [[0, -1.688], [-1.688, 0]]
        couplings:                      # sparse list (alternative to j_hz)
          - [0, 1, -1.688]
    """
    doc = yaml.safe_load(Path(path).read_text())
    return cluster_from_mapping(doc, constants)


def cluster_from_mapping(doc: Mapping, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> SpinCluster:
    if not isinstance(doc, Mapping) or "spins" not in doc:
        raise ValueError("cluster document needs a 'spins' list")
    labels, gammas = [], []
    for i, s in enumerate(doc["spins"]):
        if isinstance(s, str):
            s = {"label": s}
        label = str(s["label"])
        if "gamma_mhz_per_t" in s:
            g = 2.0 * math.pi * float(s["gamma_mhz_per_t"]) * 1e6
        else:
            g = constants.gamma(label)
        labels.append(label)
        gammas.append(g)
    n = len(labels)
    if "j_hz" in doc:
        j = np.array(doc["j_hz"], dtype=float)
    else:
        j = np.zeros((n, n))
        for a, b, val in doc.get("couplings", []):
            j[int(a), int(b)] = j[int(b), int(a)] = float(val)
    return SpinCluster(tuple(labels), tuple(gammas), j)
