"""Pure-Python fallback for the compiled Bloch RK4 kernel.

Operation order mirrors ``_bloch.pyx`` exactly; keep the two in sync.
"""

from math import cos, isfinite


def _deriv(t, mx, my, mz, gamma, b0, ba, omega, phase, ax, ay, az, r1, r2, mz_eq):
    d = ba * cos(omega * t + phase)
    bx = d * ax
    by = d * ay
    bz = b0 + d * az
    return (
        gamma * (my * bz - mz * by) - r2 * mx,
        gamma * (mz * bx - mx * bz) - r2 * my,
        gamma * (mx * by - my * bx) - r1 * (mz - mz_eq),
    )


def rk4_bloch(out, mx, my, mz, gamma, b0, ba, omega, phase, ax, ay, az,
              r1, r2, mz_eq, t0, dt, nsteps):
    if out.shape[0] < nsteps + 1 or out.shape[1] != 3:
        raise ValueError("output buffer has the wrong shape")
    # Plain lists are much faster than per-element numpy writes.
    xs = [0.0] * (nsteps + 1)
    ys = [0.0] * (nsteps + 1)
    zs = [0.0] * (nsteps + 1)
    xs[0], ys[0], zs[0] = mx, my, mz
    h2 = 0.5 * dt
    h6 = dt / 6.0
    args = (gamma, b0, ba, omega, phase, ax, ay, az, r1, r2, mz_eq)
    bad = -1
    last = nsteps
    for k in range(nsteps):
        t = t0 + k * dt
        k1x, k1y, k1z = _deriv(t, mx, my, mz, *args)
        k2x, k2y, k2z = _deriv(t + h2, mx + h2 * k1x, my + h2 * k1y, mz + h2 * k1z, *args)
        k3x, k3y, k3z = _deriv(t + h2, mx + h2 * k2x, my + h2 * k2y, mz + h2 * k2z, *args)
        k4x, k4y, k4z = _deriv(t + dt, mx + dt * k3x, my + dt * k3y, mz + dt * k3z, *args)
        mx = mx + h6 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        my = my + h6 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        mz = mz + h6 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z)
        if not (isfinite(mx) and isfinite(my) and isfinite(mz)):
            bad = k + 1
            last = k
            break
        xs[k + 1], ys[k + 1], zs[k + 1] = mx, my, mz
    out[: last + 1, 0] = xs[: last + 1]
    out[: last + 1, 1] = ys[: last + 1]
    out[: last + 1, 2] = zs[: last + 1]
    return bad
