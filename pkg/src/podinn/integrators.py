"""Time integrators.

``rk4_step`` is written with tape ops so a training loss can be
differentiated through it.  ``integrate`` is an adaptive Dormand-Prince 5(4)
scheme with 4th-order dense output, compiled with numba when available.  The
right-hand side has the signature ``rhs(t, y, params) -> dy`` on flat float64
arrays; numba needs an ``@njit`` rhs, any Python callable works on the
interpreted path.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from ._accel import NUMBA_ENABLED, njit

OK, STEP_UNDERFLOW, MAX_STEPS, NON_FINITE = 0, 1, 2, 3
_STATUS_TEXT = {
    STEP_UNDERFLOW: "step size underflow",
    MAX_STEPS: "maximum number of steps exceeded",
    NON_FINITE: "non-finite state or derivative",
}


class IntegrationError(RuntimeError):
    def __init__(self, status, t, message=""):
        self.status = int(status)
        self.t = float(t)
        text = _STATUS_TEXT.get(self.status, f"status {self.status}")
        super().__init__(f"integration failed at t={self.t:.6g}: {text}{'; ' + message if message else ''}")


def rk4_step(field, t, u, dt, substeps=1):
    """Classical RK4 over ``dt`` split into ``substeps`` equal steps.

    ``field(t, u)`` may return arrays or tape nodes; the update is recorded on
    the tape when it does.
    """
    h = dt / substeps
    for i in range(substeps):
        ti = t + i * h
        k1 = field(ti, u)
        k2 = field(ti + 0.5 * h, ad.add(u, ad.mul(k1, 0.5 * h)))
        k3 = field(ti + 0.5 * h, ad.add(u, ad.mul(k2, 0.5 * h)))
        k4 = field(ti + h, ad.add(u, ad.mul(k3, h)))
        incr = ad.add(ad.add(k1, k4), ad.mul(ad.add(k2, k3), 2.0))
        u = ad.add(u, ad.mul(incr, h / 6.0))
    return u


# Dormand-Prince coefficients; dense-output polynomial from Shampine (1986).
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = np.array([
    [0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
], dtype=np.float64)
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
], dtype=np.float64)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_BETA = 0.04
_ALPHA = 0.2 - 0.75 * _BETA


def _build_kernel(jit):
    """Dopri5 kernel and helpers, compiled with ``jit`` (identity for python)."""

    @jit
    def _error_norm(x, nbatch):
        """RMS per batch row, maximum over rows."""
        m = x.shape[0] // nbatch
        worst = 0.0
        for b in range(nbatch):
            acc = 0.0
            for i in range(b * m, (b + 1) * m):
                acc += x[i] * x[i]
            val = np.sqrt(acc / m)
            if val > worst:
                worst = val
        return worst

    @jit
    def _initial_step(rhs, t0, y0, f0, params, direction, rtol, atol, nbatch):
        scale = atol + np.abs(y0) * rtol
        d0 = _error_norm(y0 / scale, nbatch)
        d1 = _error_norm(f0 / scale, nbatch)
        if d0 < 1e-5 or d1 < 1e-5:
            h0 = 1e-6
        else:
            h0 = 0.01 * d0 / d1
        y1 = y0 + h0 * direction * f0
        f1 = rhs(t0 + h0 * direction, y1, params)
        d2 = _error_norm((f1 - f0) / scale, nbatch) / h0
        if d1 <= 1e-15 and d2 <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** 0.2
        return min(100 * h0, h1)

    @jit
    def _dopri5(rhs, y0, t_eval, params, rtol, atol, h_init, max_steps, nbatch, A, B, C, E, P):
        n = y0.shape[0]
        n_out = t_eval.shape[0]
        out = np.empty((n_out, n))
        t0 = t_eval[0]
        t_end = t_eval[n_out - 1]
        out[0] = y0
        if n_out == 1:
            return out, 0, 0, 0.0
        span = abs(t_end - t0)
        direction = 1.0 if t_end >= t0 else -1.0
        y = y0.copy()
        t = t0
        K = np.zeros((7, n))
        K[0] = rhs(t, y, params)
        for i in range(n):
            if not np.isfinite(K[0, i]):
                return out, 3, 0, t
        h = h_init
        if h <= 0.0:
            h = _initial_step(rhs, t0, y, K[0], params, direction, rtol, atol, nbatch)
        err_old = 1e-4
        next_out = 1
        steps = 0
        while next_out < n_out:
            if steps >= max_steps:
                return out, 2, steps, t
            min_step = 1e-14 * span
            if h < min_step:
                return out, 1, steps, t
            if h > abs(t_end - t):
                h = abs(t_end - t)
            accepted = False
            while not accepted:
                if h < min_step:
                    return out, 1, steps, t
                hs = h * direction
                for s in range(1, 6):
                    dy = np.zeros(n)
                    for j in range(s):
                        if A[s, j] != 0.0:
                            dy += A[s, j] * K[j]
                    K[s] = rhs(t + C[s] * hs, y + hs * dy, params)
                dy = np.zeros(n)
                for j in range(6):
                    if B[j] != 0.0:
                        dy += B[j] * K[j]
                y_new = y + hs * dy
                t_new = t + hs
                finite = True
                for i in range(n):
                    if not np.isfinite(y_new[i]):
                        finite = False
                        break
                if finite:
                    K[6] = rhs(t_new, y_new, params)
                    for i in range(n):
                        if not np.isfinite(K[6, i]):
                            finite = False
                            break
                if not finite:
                    h *= _MIN_FACTOR
                    steps += 1
                    if steps >= max_steps:
                        return out, 3, steps, t
                    continue
                err = np.zeros(n)
                for j in range(7):
                    if E[j] != 0.0:
                        err += E[j] * K[j]
                scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
                err_norm = _error_norm(hs * err / scale, nbatch)
                steps += 1
                if err_norm <= 1.0:
                    accepted = True
                    if err_norm == 0.0:
                        factor = _MAX_FACTOR
                    else:
                        factor = min(_MAX_FACTOR, max(_MIN_FACTOR, _SAFETY * err_norm ** (-_ALPHA) * err_old ** _BETA))
                    err_old = max(err_norm, 1e-4)
                else:
                    h *= max(_MIN_FACTOR, _SAFETY * err_norm ** (-_ALPHA))
                    if steps >= max_steps:
                        return out, 2, steps, t
            # dense output for every requested time inside (t, t_new]
            Q = K.T @ P
            while next_out < n_out and (t_eval[next_out] - t_new) * direction <= 0.0:
                x = (t_eval[next_out] - t) / hs
                xp = x
                acc = np.zeros(n)
                for k in range(4):
                    acc += Q[:, k] * xp
                    xp *= x
                out[next_out] = y + hs * acc
                next_out += 1
            t = t_new
            y = y_new
            K[0] = K[6]
            h = h * factor
        return out, 0, steps, t

    return _dopri5


_kernel_py = _build_kernel(lambda fn: fn)
_kernel_jit = _build_kernel(njit) if NUMBA_ENABLED else _kernel_py


def integrate(rhs, y0, t_eval, params=None, rtol=1e-10, atol=1e-12, max_steps=1_000_000, nbatch=1,
              first_step=0.0, compiled=None):
    """Adaptive Dormand-Prince integration sampled at ``t_eval``.

    ``y0`` may have any shape; it is flattened for ``rhs`` and the result is
    reshaped to ``(len(t_eval), *y0.shape)``.  With ``nbatch > 1`` the error
    norm is the maximum of the RMS norms over ``nbatch`` equal slices, so a
    batch of trajectories is integrated with a shared step.  ``compiled``
    forces the numba (True) or interpreted (False) kernel; by default the
    compiled kernel is used when numba is enabled and ``rhs`` is a numba
    dispatcher.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    t_eval = np.asarray(t_eval, dtype=np.float64)
    if t_eval.ndim != 1 or t_eval.size == 0:
        raise ValueError("t_eval must be a non-empty 1-D array")
    d = np.diff(t_eval)
    if d.size and not (np.all(d > 0) or np.all(d < 0)):
        raise ValueError("t_eval must be strictly monotonic")
    flat = np.ascontiguousarray(y0.reshape(-1))
    if flat.size % nbatch:
        raise ValueError("state size must be divisible by nbatch")
    params = np.zeros(0) if params is None else np.ascontiguousarray(params, dtype=np.float64)
    if compiled is None:
        compiled = NUMBA_ENABLED and hasattr(rhs, "py_func")
    kernel = _kernel_jit if compiled else _kernel_py
    if not compiled and hasattr(rhs, "py_func"):
        rhs = rhs.py_func
    out, status, steps, t_fail = kernel(rhs, flat, t_eval, params, float(rtol), float(atol), float(first_step),
                                        int(max_steps), int(nbatch), _A, _B, _C, _E, _P)
    if status != OK:
        raise IntegrationError(status, t_fail, f"after {steps} steps")
    return out.reshape((t_eval.size,) + y0.shape)
