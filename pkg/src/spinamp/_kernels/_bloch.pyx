# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fixed-step RK4 integrator for the driven Bloch equations.

Must perform the same floating-point operations, in the same order, as
``_bloch_py.rk4_bloch`` so both backends give bit-identical trajectories.
"""

from libc.math cimport cos, isfinite


cdef inline void _deriv(double t, double mx, double my, double mz,
                        double gamma, double b0, double ba, double omega, double phase,
                        double ax, double ay, double az,
                        double r1, double r2, double mz_eq,
                        double* dx, double* dy, double* dz) noexcept nogil:
    cdef double d = ba * cos(omega * t + phase)
    cdef double bx = d * ax
    cdef double by = d * ay
    cdef double bz = b0 + d * az
    dx[0] = gamma * (my * bz - mz * by) - r2 * mx
    dy[0] = gamma * (mz * bx - mx * bz) - r2 * my
    dz[0] = gamma * (mx * by - my * bx) - r1 * (mz - mz_eq)


def rk4_bloch(double[:, ::1] out, double mx, double my, double mz,
              double gamma, double b0, double ba, double omega, double phase,
              double ax, double ay, double az,
              double r1, double r2, double mz_eq,
              double t0, double dt, Py_ssize_t nsteps):
    """Integrate into ``out`` (shape ``(nsteps + 1, 3)``).

    Returns -1 on success, otherwise the first step index whose state is
    not finite (integration stops there).
    """
    cdef Py_ssize_t k
    cdef double t, h2 = 0.5 * dt, h6 = dt / 6.0
    cdef double k1x, k1y, k1z, k2x, k2y, k2z, k3x, k3y, k3z, k4x, k4y, k4z
    cdef Py_ssize_t bad = -1
    if out.shape[0] < nsteps + 1 or out.shape[1] != 3:
        raise ValueError("output buffer has the wrong shape")
    with nogil:
        out[0, 0] = mx
        out[0, 1] = my
        out[0, 2] = mz
        for k in range(nsteps):
            t = t0 + k * dt
            _deriv(t, mx, my, mz, gamma, b0, ba, omega, phase, ax, ay, az, r1, r2, mz_eq,
                   &k1x, &k1y, &k1z)
            _deriv(t + h2, mx + h2 * k1x, my + h2 * k1y, mz + h2 * k1z,
                   gamma, b0, ba, omega, phase, ax, ay, az, r1, r2, mz_eq, &k2x, &k2y, &k2z)
            _deriv(t + h2, mx + h2 * k2x, my + h2 * k2y, mz + h2 * k2z,
                   gamma, b0, ba, omega, phase, ax, ay, az, r1, r2, mz_eq, &k3x, &k3y, &k3z)
            _deriv(t + dt, mx + dt * k3x, my + dt * k3y, mz + dt * k3z,
                   gamma, b0, ba, omega, phase, ax, ay, az, r1, r2, mz_eq, &k4x, &k4y, &k4z)
            mx = mx + h6 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            my = my + h6 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
            mz = mz + h6 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z)
            if not (isfinite(mx) and isfinite(my) and isfinite(mz)):
                bad = k + 1
                break
            out[k + 1, 0] = mx
            out[k + 1, 1] = my
            out[k + 1, 2] = mz
    return bad
