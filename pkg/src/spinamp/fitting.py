"""Weighted nonlinear least squares for the empirical and lineshape models.

Models
------
buildup      G = c (1 - exp(-t/T1))                          analytic Jacobian
flowrate     G = a Q / (1 + (Q/Qc)^b)                        analytic Jacobian
lorentzian   y = baseline + area (T2/pi) / (1 + (2 pi (f - f0) T2)^2)
                                                             analytic Jacobian
dispersive   R = |1 + g exp(i phi)|, g = g0 |sinc(delta ts/2)|,
             phi = pi/2 - arctan(delta T2)                   finite differences

The solver is a damped Gauss-Newton (Levenberg-Marquardt) iteration with
Marquardt diagonal scaling.  Bounds are enforced by shrinking any step that
would leave the feasible box.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "ModelSpec",
    "FitResult",
    "MODELS",
    "model_buildup",
    "model_flow",
    "model_lorentzian",
    "model_dispersive",
    "fit",
    "initial_guess",
    "read_data_csv",
    "jacobian",
    "numeric_jacobian",
]

FTOL = 1e-10
GTOL = 1e-10
MAX_ITER = 200


# -- model functions --------------------------------------------------------

def model_buildup(t, c, T1):
    if not T1 > 0:
        raise ValueError("T1 must be positive")
    return c * -np.expm1(-np.asarray(t, dtype=float) / T1)


def model_flow(q, a, b, qc):
    if not (qc > 0 and b > 0):
        raise ValueError("qc and b must be positive")
    q = np.asarray(q, dtype=float)
    if np.any(q < 0):
        raise ValueError("flow rate must be non-negative")
    return a * q / (1.0 + (q / qc) ** b)


def model_lorentzian(f, center, area, t2, baseline=0.0):
    if not t2 > 0:
        raise ValueError("t2 must be positive")
    x = 2.0 * np.pi * (np.asarray(f, dtype=float) - center) * t2
    return baseline + area * (t2 / np.pi) / (1.0 + x * x)


def model_dispersive(delta, g0, t2, ts=None):
    if not t2 > 0:
        raise ValueError("t2 must be positive")
    ts = t2 if ts is None else ts
    delta = np.asarray(delta, dtype=float)
    g = np.abs(g0) * np.abs(np.sinc(delta * ts / 2.0 / np.pi))
    phi = np.pi / 2.0 - np.arctan(delta * t2)
    return np.sqrt(1.0 + 2.0 * g * np.cos(phi) + g * g)


def _jac_buildup(t, c, T1):
    t = np.asarray(t, dtype=float)
    e = np.exp(-t / T1)
    return np.column_stack([1.0 - e, -c * e * t / T1**2])


def _jac_flow(q, a, b, qc):
    q = np.asarray(q, dtype=float)
    ratio = q / qc
    u = ratio**b
    den = 1.0 + u
    with np.errstate(divide="ignore", invalid="ignore"):
        logr = np.where(q > 0, np.log(np.where(q > 0, ratio, 1.0)), 0.0)
    d_a = q / den
    d_b = -a * q * u * logr / den**2
    d_qc = a * q * u * (b / qc) / den**2
    return np.column_stack([d_a, d_b, d_qc])


def _jac_lorentzian(f, center, area, t2, baseline=0.0):
    x = 2.0 * np.pi * (np.asarray(f, dtype=float) - center) * t2
    den = 1.0 + x * x
    d_center = area * (t2 / np.pi) * (4.0 * np.pi * t2 * x) / den**2
    d_area = (t2 / np.pi) / den
    d_t2 = area / np.pi * (1.0 - x * x) / den**2
    d_base = np.ones_like(x)
    return np.column_stack([d_center, d_area, d_t2, d_base])


@dataclass(frozen=True)
class _Model:
    func: Callable
    params: Tuple[str, ...]
    jac: Optional[Callable]
    bounds: Dict[str, Tuple[float, float]]


MODELS: Dict[str, _Model] = {
    "buildup": _Model(model_buildup, ("c", "T1"), _jac_buildup,
                      {"T1": (0.0, math.inf)}),
    "flowrate": _Model(model_flow, ("a", "b", "qc"), _jac_flow,
                       {"b": (0.0, math.inf), "qc": (0.0, math.inf)}),
    "lorentzian": _Model(model_lorentzian, ("center", "area", "t2", "baseline"), _jac_lorentzian,
                         {"t2": (0.0, math.inf)}),
    "dispersive": _Model(model_dispersive, ("g0", "t2", "ts"), None,
                         {"g0": (0.0, math.inf), "t2": (0.0, math.inf), "ts": (0.0, math.inf)}),
}


@dataclass(frozen=True)
class ModelSpec:
    """A model family with some parameters held fixed.

    ``free`` defaults to every parameter not in ``fixed``.  ``bounds`` add to
    the model's built-in open bounds (e.g. T1 > 0).
    """

    kind: str
    fixed: Mapping[str, float] = field(default_factory=dict)
    free: Optional[Tuple[str, ...]] = None
    bounds: Mapping[str, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODELS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {sorted(MODELS)}")
        names = MODELS[self.kind].params
        unknown = (set(self.fixed) | set(self.bounds) | set(self.free or ())) - set(names)
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        free = self.free
        if free is None:
            free = tuple(p for p in names if p not in self.fixed)
            if self.kind == "dispersive" and "ts" not in self.fixed:
                free = tuple(p for p in free if p != "ts")
        object.__setattr__(self, "free", tuple(free))
        if not self.free:
            raise ValueError("at least one free parameter is required")
        for name, (lo, hi) in self.bounds.items():
            if math.isnan(lo) or math.isnan(hi) or lo >= hi:
                raise ValueError(f"bad bounds for {name}: {(lo, hi)}")

    @property
    def model(self) -> _Model:
        return MODELS[self.kind]

    def bounds_of(self, name: str) -> Tuple[float, float]:
        lo, hi = self.model.bounds.get(name, (-math.inf, math.inf))
        ulo, uhi = self.bounds.get(name, (-math.inf, math.inf))
        return max(lo, ulo), min(hi, uhi)

    def evaluate(self, x, values: Mapping[str, float]):
        return self.model.func(x, **{**self.fixed, **values})


def jacobian(spec: ModelSpec, x, values: Mapping[str, float]) -> np.ndarray:
    """Jacobian of the model w.r.t. the free parameters (analytic where available)."""
    m = spec.model
    if m.jac is None:
        return numeric_jacobian(spec, x, values)
    full = m.jac(x, **{**spec.fixed, **values})
    cols = [m.params.index(p) for p in spec.free]
    return full[:, cols]


def numeric_jacobian(spec: ModelSpec, x, values: Mapping[str, float], rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian."""
    cols = []
    for name in spec.free:
        v = values[name]
        h = rel_step * max(abs(v), 1e-12)
        lo, hi = spec.bounds_of(name)
        vp, vm = min(v + h, hi - 1e-15 * abs(hi) if math.isfinite(hi) else v + h), max(v - h, lo + h * 1e-3)
        fp = spec.evaluate(x, {**values, name: vp})
        fm = spec.evaluate(x, {**values, name: vm})
        cols.append((fp - fm) / (vp - vm))
    return np.column_stack(cols)


@dataclass(frozen=True)
class FitResult:
    params: Dict[str, float]
    stderr: Dict[str, float]
    residual_norm: float
    iterations: int
    converged: bool
    cost: float = 0.0
    gradient_max: float = 0.0
    last_step: float = 0.0
    message: str = ""
    history: Tuple[float, ...] = ()
    kind: str = ""

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "params": self.params,
            "stderr": self.stderr,
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
        }
        return json.dumps(doc, indent=2, sort_keys=True, default=_json_float) + "\n"


def _json_float(x):
    return float(x)


# -- initial guesses ----------------------------------------------------------

def initial_guess(kind: str, x, y) -> Dict[str, float]:
    """Heuristic starting point so fits run without hand tuning."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.argsort(x)
    x, y = x[order], y[order]
    if kind == "buildup":
        tail = y[-max(1, len(y) // 5):]
        c = float(np.mean(tail)) if abs(np.mean(tail)) > 0 else float(np.max(y))
        target = (1.0 - math.exp(-1.0)) * c
        above = np.nonzero(y >= target)[0] if c > 0 else np.nonzero(y <= target)[0]
        T1 = float(x[above[0]]) if above.size and x[above[0]] > 0 else float(np.ptp(x) / 3.0)
        return {"c": c, "T1": max(T1, 1e-12)}
    if kind == "flowrate":
        pos = x > 0
        xs, ys = x[pos], y[pos]
        slope = ys / xs
        a = float(np.mean(slope[: max(2, len(slope) // 10)]))
        half = np.nonzero(slope <= a / 2.0)[0]
        qc = float(xs[half[0]]) if half.size else float(xs[-1])
        fifth = np.nonzero(slope <= a / 5.0)[0]
        b = 4.0
        if fifth.size and xs[fifth[0]] > qc:
            b = float(math.log(4.0) / math.log(xs[fifth[0]] / qc))
        return {"a": a, "b": min(max(b, 0.5), 20.0), "qc": qc}
    if kind == "lorentzian":
        # the line may point either way (zero-field lines are often negative)
        edge = 0.5 * (y[0] + y[-1])
        sign = 1.0 if np.max(y) - edge >= edge - np.min(y) else -1.0
        base = float(sign * min(sign * y[0], sign * y[-1]))
        k = int(np.argmax(sign * y))
        height = float(y[k] - base)
        above = np.nonzero(sign * (y - base) >= abs(height) / 2.0)[0]
        fwhm = float(x[above[-1]] - x[above[0]]) if above.size > 1 else float(np.ptp(x) / 10.0)
        fwhm = max(fwhm, float(np.min(np.diff(x))) if x.size > 1 else 1.0)
        t2 = 1.0 / (math.pi * fwhm)
        return {"center": float(x[k]), "area": height * math.pi / t2, "t2": t2, "baseline": base}
    if kind == "dispersive":
        kmax, kmin = int(np.argmax(y)), int(np.argmin(y))
        g0 = max(float(y[kmax] - y[kmin]) / 1.5, 1e-6)
        dpk = 0.5 * (abs(x[kmax]) + abs(x[kmin]))
        t2 = 1.7 / dpk if dpk > 0 else 1.0
        return {"g0": g0, "t2": t2}
    raise ValueError(f"unknown model kind {kind!r}")


# -- solver -------------------------------------------------------------------

def _box_step(p, step, lo, hi):
    """Largest alpha in (0, 1] keeping p + alpha*step strictly inside (lo, hi), times 0.9 when clipped."""
    alpha = 1.0
    for pi, si, l, h in zip(p, step, lo, hi):
        if si > 0 and math.isfinite(h) and pi + si >= h:
            alpha = min(alpha, 0.9 * (h - pi) / si)
        elif si < 0 and math.isfinite(l) and pi + si <= l:
            alpha = min(alpha, 0.9 * (l - pi) / si)
    return alpha


def fit(model: ModelSpec, data, init: Optional[Mapping[str, float]] = None, *,
        max_iter: int = MAX_ITER, ftol: float = FTOL, gtol: float = GTOL) -> FitResult:
    """Fit ``model`` to ``data`` (rows of ``(x, y)`` or ``(x, y, sigma)``).

    Cost is ``0.5 * sum(((y - f) / sigma)^2)``; accepted steps never
    increase it.  Converges when the relative cost decrease of an accepted
    step falls below ``ftol`` or the parameter-scaled gradient falls below
    ``gtol`` (relative to the cost).  Parameter errors come from the inverse
    Gauss-Newton Hessian, scaled by the reduced chi-square when no sigma
    column was supplied.
    """
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ValueError("data must be rows of (x, y) or (x, y, sigma)")
    x, y = arr[:, 0], arr[:, 1]
    absolute_sigma = arr.shape[1] == 3
    sigma = arr[:, 2] if absolute_sigma else np.ones_like(y)
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be positive")
    names = model.free
    npar = len(names)
    if len(y) < 2 * npar:
        raise ValueError(f"need at least {2 * npar} points for {npar} free parameters")

    start = dict(initial_guess(model.kind, x, y))
    if init:
        start.update(init)
    missing = [p for p in names if p not in start]
    if missing:
        raise ValueError(f"no initial value for {missing}")
    p = np.array([float(start[n]) for n in names])
    lo = np.array([model.bounds_of(n)[0] for n in names])
    hi = np.array([model.bounds_of(n)[1] for n in names])
    if np.any(p <= lo) or np.any(p >= hi):
        # nudge into the open box
        p = np.where(p <= lo, np.where(np.isfinite(hi), 0.5 * (lo + hi), lo + np.maximum(1.0, np.abs(lo)) * 1e-3), p)
        p = np.where(p >= hi, np.where(np.isfinite(lo), 0.5 * (lo + hi), hi - np.maximum(1.0, np.abs(hi)) * 1e-3), p)

    def residuals(pv):
        f = model.evaluate(x, dict(zip(names, pv)))
        return (y - f) / sigma

    def wjac(pv):
        return jacobian(model, x, dict(zip(names, pv))) / sigma[:, None]

    r = residuals(p)
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = 1e-3
    converged = False
    message = "maximum iterations reached"
    last_step = 0.0
    gmax = math.inf
    it = 0
    tiny = 1e-300
    while it < max_iter:
        J = wjac(p)
        grad = J.T @ r  # minus the cost gradient
        gmax = float(np.max(np.abs(grad) * np.maximum(np.abs(p), tiny)))
        if cost <= tiny or gmax <= gtol * cost:
            converged = True
            message = "gradient below tolerance"
            break
        A = J.T @ J
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while it < max_iter:
            it += 1
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            alpha = _box_step(p, step, lo, hi)
            trial = p + alpha * step
            with np.errstate(all="ignore"):
                try:
                    rt = residuals(trial)
                except ValueError:
                    rt = None
            ct = 0.5 * float(rt @ rt) if rt is not None and np.all(np.isfinite(rt)) else math.inf
            if ct <= cost:
                last_step = float(np.max(np.abs(alpha * step) / np.maximum(np.abs(p), tiny)))
                decrease = cost - ct
                p, r, cost = trial, rt, ct
                history.append(cost)
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                break
            lam *= 10.0
            if lam > 1e20:
                break
        if not accepted:
            message = "damping exhausted without a cost decrease"
            converged = gmax <= math.sqrt(gtol) * max(cost, tiny)
            break
        if decrease <= ftol * history[-2]:
            converged = True
            message = "relative cost change below tolerance"
            break

    J = wjac(p)
    A = J.T @ J
    stderr = {}
    cond = np.linalg.cond(A) if np.all(np.isfinite(A)) else math.inf
    if not math.isfinite(cond) or cond > 1e14:
        stderr = {n: math.inf for n in names}
        message += "; singular Jacobian at the optimum"
    else:
        cov = np.linalg.inv(A)
        if not absolute_sigma:
            dof = max(len(y) - npar, 1)
            cov = cov * (2.0 * cost / dof)
        stderr = {n: float(math.sqrt(max(cov[i, i], 0.0))) for i, n in enumerate(names)}
    params = {**{k: float(v) for k, v in model.fixed.items()}, **dict(zip(names, map(float, p)))}
    return FitResult(
        params=params,
        stderr=stderr,
        residual_norm=float(math.sqrt(2.0 * cost / len(y))),
        iterations=it,
        converged=converged,
        cost=cost,
        gradient_max=gmax,
        last_step=last_step,
        message=message,
        history=tuple(history),
        kind=model.kind,
    )


def read_data_csv(path) -> np.ndarray:
    """Read ``x,y[,sigma]`` rows (header required)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header not in (["x", "y"], ["x", "y", "sigma"]):
        raise ValueError(f"{path}: header must be 'x,y' or 'x,y,sigma'")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    return data
