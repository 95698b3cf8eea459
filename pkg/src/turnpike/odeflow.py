"""Adaptive Dormand-Prince 5(4) integration with dense output.

``integrate`` returns an immutable :class:`Trajectory` that can be evaluated
anywhere in its span; ``integrate_with_variational`` co-integrates the
fundamental matrix of the linearized flow, ``dPhi/dt = Df(z(t)) Phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteDerivative, StateBlowup, StepSizeUnderflow

BLOWUP_NORM = 1e8

# Dormand & Prince (1980); dense output of Shampine (1986).
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
]
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
])


@dataclass
class VectorField:
    """Autonomous vector field ``dz/dt = eval(z)`` on R^dim."""

    dim: int
    eval: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    # optional fused ``z -> (eval(z), jac(z))`` used by the variational flow
    eval_jac: Optional[Callable[[np.ndarray], tuple]] = None

    def __call__(self, z):
        return self.eval(z)

    def jac(self, z):
        if self.jacobian is not None:
            return self.jacobian(z)
        return fd_jacobian(self.eval, z)


def fd_jacobian(fun, z, h=None):
    """Central differences with step ``1e-6 (1 + |z|)``."""
    z = np.asarray(z, dtype=float)
    if h is None:
        h = 1e-6 * (1 + np.abs(z).max(initial=0.0))
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = h
        cols.append((np.asarray(fun(z + e)) - np.asarray(fun(z - e))) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Accepted integration nodes plus per-step quartic interpolants.

    Nodes are strictly monotone in the integration direction; ``t0`` and
    ``t1`` are the first and last node.
    """

    t: np.ndarray
    y: np.ndarray
    coeffs: np.ndarray  # (steps, dim, 4): y(t_i + s h_i) = y_i + h_i * coeffs_i @ [s, s^2, s^3, s^4]
    stats: dict = field(default_factory=dict)

    @property
    def t0(self):
        return float(self.t[0])

    @property
    def t1(self):
        return float(self.t[-1])

    @property
    def dim(self):
        return self.y.shape[1]

    @property
    def direction(self):
        return 1.0 if self.t[-1] >= self.t[0] else -1.0

    def __call__(self, t):
        scalar = np.ndim(t) == 0
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        out = self._eval(tt)
        return out[0] if scalar else out

    def _eval(self, tt):
        d = self.direction
        key = self.t * d
        q = tt * d
        lo, hi = key[0], key[-1]
        span = hi - lo
        if np.any(q < lo - 1e-12 * (1 + abs(span))) or np.any(q > hi + 1e-12 * (1 + abs(span))):
            raise ValueError(f"time outside trajectory span [{self.t0}, {self.t1}]")
        idx = np.clip(np.searchsorted(key, q, side="right") - 1, 0, len(self.t) - 2)
        h = self.t[idx + 1] - self.t[idx]
        s = (tt - self.t[idx]) / h
        powers = np.stack([s, s * s, s ** 3, s ** 4], axis=-1)
        vals = self.y[idx] + h[:, None] * np.einsum("kdj,kj->kd", self.coeffs[idx], powers)
        exact = np.searchsorted(key, q)
        exact = np.clip(exact, 0, len(self.t) - 1)
        hit = key[exact] == q
        vals[hit] = self.y[exact[hit]]
        return vals

    def components(self, sl) -> "Trajectory":
        return Trajectory(self.t, self.y[:, sl], self.coeffs[:, sl, :], dict(self.stats))

    @staticmethod
    def concatenate(parts) -> "Trajectory":
        """Join forward segments; the junction node keeps the later segment's start."""
        parts = list(parts)
        ts = [parts[0].t]
        ys = [parts[0].y]
        cs = [parts[0].coeffs]
        for p in parts[1:]:
            ts[-1] = ts[-1][:-1]
            ys[-1] = ys[-1][:-1]
            ts.append(p.t)
            ys.append(p.y)
            cs.append(p.coeffs)
        stats = {}
        for p in parts:
            for k, v in p.stats.items():
                stats[k] = stats.get(k, 0) + v
        return Trajectory(np.concatenate(ts), np.concatenate(ys), np.concatenate(cs), stats)


def _initial_step(fun, y0, f0, span, max_step, rtol, atol, err_idx):
    # Hairer, Norsett & Wanner, Sec. II.4
    scale = atol + np.abs(y0[err_idx]) * rtol
    d0 = np.sqrt(np.mean((y0[err_idx] / scale) ** 2))
    d1 = np.sqrt(np.mean((f0[err_idx] / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = fun(y0 + h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0)[err_idx] / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, max_step)


def integrate(field: VectorField, x0, t0, t1, rtol=1e-10, atol=1e-12,
              max_step=None, error_components=None) -> Trajectory:
    """Integrate ``field`` from ``x0`` at ``t0`` to ``t1`` (either direction)."""
    if t1 == t0:
        raise ValueError("t1 must differ from t0")
    if rtol <= 0 or atol <= 0:
        raise ValueError("rtol and atol must be positive")
    fun = field.eval
    y = np.array(x0, dtype=float).reshape(-1)
    N = y.size
    err_idx = slice(None) if error_components is None else slice(0, error_components)
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    hmax = span / 10 if max_step is None else min(max_step, span / 10)

    def rhs(z):
        dz = np.asarray(fun(z), dtype=float)
        if not np.isfinite(dz.sum()):
            raise NonFiniteDerivative("vector field returned non-finite values")
        return dz

    f = rhs(y)
    nfev = 1
    h = _initial_step(rhs, y, f, span, hmax, rtol, atol, err_idx)
    nfev += 1
    t = float(t0)
    ts = [t]
    ys = [y.copy()]
    qs = []
    K = np.empty((7, N))
    n_rej = 0
    while direction * (t1 - t) > 0:
        min_step = 10 * np.finfo(float).eps * max(abs(t), 1.0)
        h = min(h, hmax)
        remaining = abs(t1 - t)
        # never leave a sliver shorter than a few min_steps for the next step
        last = h >= remaining - 100 * min_step
        if last:
            h = remaining
        while True:
            if h < min_step:
                raise StepSizeUnderflow(f"step size underflow at t={t:.6g}")
            hs = h * direction
            K[0] = f
            for i in range(1, 6):
                K[i] = rhs(y + hs * (_A[i] @ K[:i]))
            y_new = y + hs * (_B @ K[:6])
            if not np.all(np.isfinite(y_new)):
                h *= 0.2
                last = False
                continue
            f_new = rhs(y_new)
            K[6] = f_new
            nfev += 6
            err = hs * (_E @ K)
            scale = atol + rtol * np.maximum(np.abs(y[err_idx]), np.abs(y_new[err_idx]))
            err_norm = np.max(np.abs(err[err_idx]) / scale)
            if err_norm <= 1.0:
                factor = 10.0 if err_norm == 0 else min(10.0, 0.9 * err_norm ** -0.2)
                break
            n_rej += 1
            h *= max(0.2, 0.9 * err_norm ** -0.2)
            last = False
        qs.append(K.T @ _P)
        t = float(t1) if last else t + hs
        y = y_new
        f = f_new
        ts.append(t)
        ys.append(y.copy())
        if np.abs(y[err_idx]).max() > BLOWUP_NORM:
            raise StateBlowup(f"state norm exceeded {BLOWUP_NORM:.0e} at t={t:.6g}")
        h *= factor
    stats = {"steps": len(qs), "rejected": n_rej, "rhs_evals": nfev}
    return Trajectory(np.array(ts), np.array(ys), np.array(qs), stats)


class FlowSensitivity:
    """``Phi(t)``: derivative of the flow map w.r.t. the initial state."""

    def __init__(self, augmented: Trajectory, dim: int):
        self.augmented = augmented
        self.dim = dim

    def __call__(self, t):
        v = self.augmented(t)
        N = self.dim
        if np.ndim(t) == 0:
            return v[N:].reshape(N, N)
        return v[:, N:].reshape(-1, N, N)

    @property
    def final(self):
        N = self.dim
        return self.augmented.y[-1, N:].reshape(N, N)


def variational_field(field: VectorField) -> VectorField:
    N = field.dim
    fused = field.eval_jac
    out = np.empty(N + N * N)

    def aug(y):
        z = y[:N]
        if fused is not None:
            f, J = fused(z)
        else:
            f, J = field.eval(z), field.jac(z)
        res = out.copy()
        res[:N] = f
        res[N:] = (J @ y[N:].reshape(N, N)).reshape(-1)
        return res

    return VectorField(N + N * N, aug)


def integrate_with_variational(field: VectorField, x0, t0, t1, rtol=1e-10, atol=1e-12,
                               max_step=None):
    """Integrate the state together with ``Phi``; ``Phi(t0) = I``.

    Step-size control acts on the state components only.
    """
    N = field.dim
    y0 = np.concatenate([np.asarray(x0, dtype=float).reshape(-1), np.eye(N).reshape(-1)])
    aug = integrate(variational_field(field), y0, t0, t1, rtol, atol, max_step,
                    error_components=N)
    return aug.components(slice(0, N)), FlowSensitivity(aug, N)
