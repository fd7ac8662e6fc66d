"""Continuous-time glucose-insulin dynamics.

Supports a pump-therapy variant with zero endogenous secretion and a
hybrid variant with residual secretion and insulin resistance,
integrated with fixed-step RK4 at one-minute resolution. A compiled
kernel is preferred when the extension built; a pure-Python twin is the
fallback. Set ``GLUCO_FORCE_PYTHON_BACKEND=1`` to skip the extension.
"""

import os

import numpy as np

from . import common
from . import dynamics_py

if os.environ.get("GLUCO_FORCE_PYTHON_BACKEND"):
    _backend = dynamics_py
else:
    try:
        from . import _ode_core as _backend
    except ImportError:
        _backend = dynamics_py

BACKEND = _backend.BACKEND_NAME

KIND_T1D = common.KIND_T1D
KIND_T2D = common.KIND_T2D


def nn_guard(x: float, dx: float) -> float:
    """Zero out derivatives that would push a non-positive state lower."""
    if x <= 0.0 and dx < 0.0:
        return 0.0
    return dx


def make_input(cho=0.0, ins=0.0, hr_rel=0.0, d_bar=0.0, circ_m1=0.0):
    """Assemble the per-minute input vector.

    ``cho`` g/min, ``ins`` U/min, ``hr_rel`` in [0, 1], ``d_bar`` mg of
    the most recent meal, ``circ_m1`` the circadian factor minus one.
    """
    if cho < 0.0 or ins < 0.0 or hr_rel < 0.0:
        raise ValueError("control inputs must be non-negative")
    if hr_rel > 1.0:
        raise ValueError("hr_rel must not exceed 1")
    return np.array([cho, ins, hr_rel, d_bar, circ_m1], dtype=float)


def _check_finite_state(x, label):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        bad = int(np.argmax(~np.isfinite(arr)))
        raise FloatingPointError(
            f"non-finite value in {label}: state component "
            f"{common.STATE_NAMES[bad]!r} = {arr[bad]!r}"
        )
    return arr


def derivatives(kind, x, u, pvec):
    """Full derivative vector for state ``x`` under inputs ``u``."""
    x = _check_finite_state(x, "input state")
    out = np.empty(common.N_STATE)
    _backend.derivs(kind, x, np.asarray(u, dtype=float),
                    np.asarray(pvec, dtype=float), out)
    return out


def derivatives_t1d(x, u, pvec):
    return derivatives(KIND_T1D, x, u, pvec)


def derivatives_t2d(x, u, pvec):
    return derivatives(KIND_T2D, x, u, pvec)


def project_state(x):
    """Project guarded states to >= 0 and clip TE to its valid range."""
    out = np.array(x, dtype=float)
    return dynamics_py.project(out)


def rk4_step(f, x, u, dt, project=None):
    """Generic classic RK4 step ``x + dt/6 (k1 + 2 k2 + 2 k3 + k4)``.

    Works for any vector field ``f(x, u)``; pass ``project_state`` as
    ``project`` when stepping the physiological system so the guard and
    TE clip apply. Raises when the result is non-finite.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(f(x, u), dtype=float)
    k2 = np.asarray(f(x + 0.5 * dt * k1, u), dtype=float)
    k3 = np.asarray(f(x + 0.5 * dt * k2, u), dtype=float)
    k4 = np.asarray(f(x + dt * k3, u), dtype=float)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if out.shape == (common.N_STATE,):
        _check_finite_state(out, "rk4_step result")
    elif not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value in rk4_step result")
    if project is not None:
        out = project(out)
    return out


def physiologic_rk4_step(kind, x, u, pvec, dt=1.0):
    """One guarded RK4 minute of the physiological system (backend path)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    out = _backend.rk4_minute(kind, np.asarray(x, dtype=float),
                              np.asarray(u, dtype=float),
                              np.asarray(pvec, dtype=float), dt)
    return _check_finite_state(out, "rk4 result")


def step_minutes(kind, x, u_rows, gp_noise, pvec):
    """Integrate consecutive one-minute RK4 steps with per-minute inputs.

    ``u_rows`` is (n, 5); ``gp_noise`` is (n,) additive plasma-glucose
    increments (mg/kg) applied after each minute (process noise).
    """
    u_rows = np.ascontiguousarray(u_rows, dtype=float)
    gp_noise = np.ascontiguousarray(gp_noise, dtype=float)
    out = _backend.integrate_minutes(kind, np.asarray(x, dtype=float),
                                     u_rows, gp_noise,
                                     np.asarray(pvec, dtype=float))
    return _check_finite_state(out, "integration result")
