"""Shooting solvers for the Hamiltonian two-point boundary-value problems.

The unknown initial costate ``p0`` is found by Newton iteration.  Long
horizons make the single-shooting map exponentially ill-conditioned (the
equilibrium is a saddle), so the horizon is split into segments and the
interior node states are carried as extra unknowns (multiple shooting).
The Jacobian is assembled from the variational flow of every segment.

``solve_with_continuation`` chains such solves along a homotopy in
``(T, x0, xf, z)``; ``verify_p_condition`` checks that the converged
trajectory is embedded in a field of extremals (``det D_{x0} x(t) != 0``).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla

from . import linham
from .errors import (
    ContinuationStalled, IntegrationBlowup, IntegrationError, LinearAlgebraError,
    NewtonDivergence, SingularShootingJacobian,
)
from .model import OCP1, HamiltonianField, SteadyOptimum, build_hamiltonian_field
from .odeflow import Trajectory, integrate, integrate_with_variational

log = logging.getLogger(__name__)

MAX_NEWTON = 50
LAMBDA_MIN = 1e-8
STALL_WINDOW = 6  # give up when the residual has not halved over this many steps
COND_LIMIT = 1e12
SEGMENT_GROWTH = 50.0  # split a segment when its flow Jacobian exceeds this norm
MAX_SEGMENTS = 400
COARSE_RTOL = 1e-7


@dataclass(frozen=True)
class CostateZero:
    """Free endpoint: ``p(T) = 0``."""


@dataclass(frozen=True)
class StateTarget:
    """Fixed endpoint ``x(T) = xf``.

    Components listed in ``free`` are released instead: for those the
    transversality condition ``p_i(T) = 0`` replaces ``x_i(T) = xf_i`` (and
    the corresponding entries of ``xf`` are ignored).  Releasing a component
    that is hard to steer and pinning it afterwards at the value it attains
    is a useful continuation device.
    """

    xf: np.ndarray
    free: tuple = ()

    def __post_init__(self):
        xf = np.asarray(self.xf, dtype=float).reshape(-1)
        free = tuple(sorted({int(i) for i in self.free}))
        if any(i < 0 or i >= xf.size for i in free):
            raise ValueError(f"free indices {free} out of range for a state of length {xf.size}")
        object.__setattr__(self, "xf", xf)
        object.__setattr__(self, "free", free)

    @property
    def fixed(self):
        return np.array([i not in self.free for i in range(self.xf.size)])


Terminal = Union[CostateZero, StateTarget]


@dataclass(frozen=True, eq=False)
class BvpSpec:
    """Boundary-value problem ``x(0) = x0`` plus a terminal condition.

    ``guess`` optionally supplies a trajectory (any callable ``t -> 2n-vector``
    on ``[0, T]``) used to initialise the multiple-shooting nodes.
    """

    field: HamiltonianField
    T: float
    x0: np.ndarray
    terminal: Terminal
    p0_guess: Optional[np.ndarray] = None
    guess: Optional[object] = None
    steady: Optional[SteadyOptimum] = None

    def __post_init__(self):
        n = self.field.n
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(n))
        kind = self.field.problem.kind
        if kind == OCP1 and not isinstance(self.terminal, CostateZero):
            raise ValueError("OCP1 problems need a CostateZero terminal condition")
        if kind != OCP1:
            if not isinstance(self.terminal, StateTarget):
                raise ValueError("OCP2 problems need a StateTarget terminal condition")
            if self.terminal.xf.shape != (n,):
                raise ValueError(f"terminal state must have length {n}")
        if self.p0_guess is not None:
            object.__setattr__(self, "p0_guess", np.asarray(self.p0_guess, dtype=float).reshape(n))

    @property
    def n(self):
        return self.field.n

    @property
    def data_scale(self):
        xf = self.terminal.xf[self.terminal.fixed] if isinstance(self.terminal, StateTarget) else 0.0
        return 1.0 + np.abs(self.x0).max() + np.abs(xf).max(initial=0.0)

    def replace(self, **changes) -> "BvpSpec":
        return dataclasses.replace(self, **changes)


def spec_for(problem, T, steady=None, free=(), **kw) -> BvpSpec:
    """Build the ``BvpSpec`` of ``problem`` at horizon ``T``.

    ``free`` lists terminal state components released from ``xf`` (fixed
    endpoint problems only; see :class:`StateTarget`).
    """
    if problem.kind == OCP1:
        if free:
            raise ValueError("free terminal components only apply to fixed-endpoint problems")
        terminal = CostateZero()
    else:
        terminal = StateTarget(problem.xf, free)
    return BvpSpec(field=build_hamiltonian_field(problem), T=T, x0=problem.x0,
                   terminal=terminal, steady=steady, **kw)


@dataclass(frozen=True, eq=False)
class _Segment:
    t0: float
    t1: float
    traj: Trajectory
    sens: object  # FlowSensitivity or None


@dataclass(frozen=True, eq=False)
class BvpSolution:
    spec: BvpSpec
    trajectory: Trajectory
    p0: np.ndarray
    residual: float
    newton_iters: int
    mesh: np.ndarray
    nodes: np.ndarray
    continuation_path: list = field(default_factory=list)
    segments: list = field(default_factory=list, repr=False)
    jacobian: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def T(self):
        return self.spec.T

    @property
    def n(self):
        return self.spec.n

    def state(self, t):
        return self.trajectory(t)

    def control(self, t):
        """``u(t) = -g(x(t))^T p(t)``; ``t`` may be an array."""
        fld = self.spec.field
        y = self.trajectory(t)
        if np.ndim(t) == 0:
            return fld.control(y)
        return np.array([fld.control(row) for row in y])

    def hamiltonian(self, t):
        y = np.atleast_2d(self.trajectory(np.atleast_1d(t)))
        return np.array([self.spec.field.hamiltonian(row) for row in y])


# --------------------------------------------------------------------------
# Multiple-shooting system

def _boundary_map(spec):
    """``(dB, target)`` with the terminal condition ``dB y(T) = target``."""
    n = spec.n
    if isinstance(spec.terminal, CostateZero):
        return np.hstack([np.zeros((n, n)), np.eye(n)]), np.zeros(n)
    fixed = spec.terminal.fixed
    dB = np.zeros((n, 2 * n))
    idx = np.arange(n)
    dB[idx[fixed], idx[fixed]] = 1.0
    dB[idx[~fixed], n + idx[~fixed]] = 1.0
    return dB, np.where(fixed, spec.terminal.xf, 0.0)


def _boundary(spec, yT):
    dB, target = _boundary_map(spec)
    return dB @ yT - target, dB


def _unpack(spec, Z, K):
    n = spec.n
    y0 = np.concatenate([spec.x0, Z[:n]])
    return [y0] + [Z[n + 2 * n * k: n + 2 * n * (k + 1)] for k in range(K - 1)]


def _pack(nodes):
    n = nodes[0].size // 2
    return np.concatenate([nodes[0][n:]] + [y for y in nodes[1:]])


class _System:
    """Residual and Jacobian of the multiple-shooting equations on a fixed mesh."""

    def __init__(self, spec, mesh, rtol, atol):
        self.spec = spec
        self.mesh = np.asarray(mesh, dtype=float)
        self.K = len(mesh) - 1
        self.rtol = rtol
        self.atol = atol

    def residual(self, Z, jac=False):
        spec, n, K = self.spec, self.spec.n, self.K
        nodes = _unpack(spec, Z, K)
        F = np.empty(Z.size)
        J = np.zeros((Z.size, Z.size)) if jac else None
        segs = []
        for k in range(K):
            a, b = self.mesh[k], self.mesh[k + 1]
            try:
                if jac:
                    traj, sens = integrate_with_variational(spec.field, nodes[k], a, b,
                                                            self.rtol, self.atol)
                    Phi = sens.final
                else:
                    traj, sens = integrate(spec.field, nodes[k], a, b, self.rtol, self.atol), None
            except IntegrationError as exc:
                raise IntegrationBlowup(
                    f"segment [{a:.4g}, {b:.4g}] failed: {exc}", segment=k) from exc
            segs.append(_Segment(a, b, traj, sens))
            end = traj.y[-1]
            row = 2 * n * k
            if k < K - 1:
                F[row: row + 2 * n] = end - nodes[k + 1]
                if jac:
                    col = n + 2 * n * k
                    J[row: row + 2 * n, col: col + 2 * n] = -np.eye(2 * n)
            else:
                F[row:], dB = _boundary(spec, end)
            if jac:
                rows = slice(row, row + 2 * n) if k < K - 1 else slice(row, None)
                D = Phi if k < K - 1 else dB @ Phi
                if k == 0:
                    J[rows, :n] = D[:, n:]
                else:
                    col = n + 2 * n * (k - 1)
                    J[rows, col: col + 2 * n] = D
        return F, J, segs


def _uniform_mesh(T, segments):
    return np.linspace(0.0, T, segments + 1)


def default_segments(spec: BvpSpec) -> int:
    """One segment per unit of the fastest linear time scale, at least one."""
    rate = 1.0
    if spec.steady is not None and spec.steady.hyperbolic:
        rate = float(np.abs(spec.steady.eigenvalues.real).max())
    return int(min(MAX_SEGMENTS, max(1, math.ceil(spec.T * rate / 1.5))))


def linearized_guess(spec: BvpSpec, opt: SteadyOptimum):
    """Solution of the BVP linearized at the steady optimum, as ``t -> y(t)``.

    Uses the Riccati block-diagonalization ``y - y_bar = T_s (v, w)`` with a
    decaying stable coordinate ``v(t) = e^{A_c t} a`` and an unstable one
    anchored at the end, ``w(t) = e^{A_c^T (T - t)} b``; both stay bounded
    for any ``T``.
    """
    n = spec.n
    sol = linham.solve_care(opt.A_z, opt.B_z @ opt.B_z.T, opt.Q_z)
    P, L, Ac = sol.P, sol.L, sol.A_c
    I = np.eye(n)
    T = spec.T
    EsT = sla.expm(Ac * T)
    EuT = sla.expm(Ac.T * T)
    dx0 = spec.x0 - opt.x_bar
    dB, target = _boundary_map(spec)
    M = np.block([[I, L @ EuT], [dB @ np.block([[EsT, L], [P @ EsT, P @ L + I]])]])
    rhs = np.concatenate([dx0, target - dB @ opt.state])
    ab = np.linalg.lstsq(M, rhs, rcond=None)[0]
    a, b = ab[:n], ab[n:]
    ybar = opt.state

    def guess(t):
        v = sla.expm(Ac * t) @ a
        w = sla.expm(Ac.T * (T - t)) @ b
        return ybar + np.concatenate([v + L @ w, P @ v + (P @ L + I) @ w])

    return guess


def _initial_nodes(spec, mesh):
    n = spec.n
    if spec.guess is not None:
        nodes = [np.asarray(spec.guess(t), dtype=float).copy() for t in mesh[:-1]]
    elif spec.steady is not None:
        try:
            g = linearized_guess(spec, spec.steady)
            nodes = [g(t) for t in mesh[:-1]]
        except LinearAlgebraError:
            nodes = [np.concatenate([spec.x0, spec.steady.p_bar])] + [
                spec.steady.state.copy() for _ in mesh[1:-1]]
    else:
        nodes = [np.concatenate([spec.x0, np.zeros(n)]) for _ in mesh[:-1]]
    nodes[0] = nodes[0].copy()
    nodes[0][:n] = spec.x0
    if spec.p0_guess is not None:
        nodes[0][n:] = spec.p0_guess
    return nodes


def _refine(system, Z, segs):
    """Split segments whose flow Jacobian is large; returns ``(mesh, Z)`` or ``None``."""
    mesh = list(system.mesh)
    spec = system.spec
    nodes = _unpack(spec, Z, system.K)
    new_mesh = [mesh[0]]
    new_nodes = [nodes[0]]
    changed = False
    for k, seg in enumerate(segs):
        norm = np.abs(seg.sens.final).max() if seg.sens is not None else 0.0
        pieces = 1
        if norm > SEGMENT_GROWTH:
            pieces = min(8, int(math.ceil(math.log(norm) / math.log(SEGMENT_GROWTH))) + 1)
        for j in range(1, pieces):
            t = seg.t0 + (seg.t1 - seg.t0) * j / pieces
            new_mesh.append(t)
            new_nodes.append(seg.traj(t))
            changed = True
        new_mesh.append(seg.t1)
        if k < len(segs) - 1:
            new_nodes.append(nodes[k + 1])
    if not changed or len(new_mesh) - 1 > MAX_SEGMENTS:
        return None
    return np.array(new_mesh), _pack(new_nodes)


def equilibrated_cond(J, sweeps=10):
    """2-norm condition number of ``J`` after Ruiz row/column equilibration.

    Multiple-shooting unknowns live on very different scales (a costate can
    grow like ``e^t`` along the horizon), and the plain condition number
    reports that scaling rather than near-singularity.  Diagonal scaling does
    not change the Newton step, so the scaled number is the meaningful one.
    """
    A = np.array(J, dtype=float)
    for _ in range(sweeps):
        r = np.sqrt(np.abs(A).max(axis=1))
        c = np.sqrt(np.abs(A).max(axis=0))
        if np.any(r == 0) or np.any(c == 0):
            return np.inf
        A = A / r[:, None] / c[None, :]
    return float(np.linalg.cond(A))


def _check_cond(J):
    cond = equilibrated_cond(J)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularShootingJacobian(
            f"shooting Jacobian condition number {cond:.3e} exceeds {COND_LIMIT:.0e}")


def _newton(system, Z, tol, max_iter):
    """Damped Newton with the natural monotonicity test.

    A trial ``Z + lam dZ`` is accepted when the simplified correction
    ``J^{-1} F(Z + lam dZ)`` (same factorization) is shorter than
    ``(1 - lam/4) |dZ|``.  The test is affine invariant, which lets the
    iteration take long steps through the curved valleys typical of
    multiple shooting where a residual-based test would crawl.  Damping
    factors follow Deuflhard's prediction.
    """
    F, J, segs = system.residual(Z, jac=True)
    fn = np.abs(F).max()
    best = (fn, Z.copy())
    history = [fn]
    corrections = []
    lam = 1.0
    for it in range(max_iter + 1):
        if fn <= tol:
            return Z, F, J, segs, it, history
        if it == max_iter:
            break
        _check_cond(J)
        lu = sla.lu_factor(J)
        dZ = -sla.lu_solve(lu, F)
        ndz = np.linalg.norm(dZ)
        corrections.append(ndz)
        if len(corrections) > STALL_WINDOW and ndz > 0.5 * corrections[-1 - STALL_WINDOW]:
            raise NewtonDivergence(
                f"Newton stalled at residual {fn:.3e} after {it} iterations",
                best=best[1], diagnostics={"residual": best[0], "history": history,
                                           "iterations": it})
        lam = min(1.0, 4.0 * lam)
        while True:
            trial = Z + lam * dZ
            try:
                Ft, _, _ = system.residual(trial)
                dbar = -sla.lu_solve(lu, Ft)
                theta = np.linalg.norm(dbar) / ndz
                ok = np.isfinite(theta) and theta < 1.0 - 0.25 * lam
            except IntegrationBlowup:
                ok, dbar = False, None
            if ok:
                break
            if dbar is not None and np.all(np.isfinite(dbar)):
                pred = lam * lam * ndz / (2.0 * np.linalg.norm(dbar - (1.0 - lam) * dZ))
                lam = min(0.5 * lam, max(pred, 0.1 * lam))
            else:
                lam *= 0.25
            if lam < LAMBDA_MIN:
                raise NewtonDivergence(
                    f"damping factor fell below {LAMBDA_MIN:g} (residual {fn:.3e})",
                    best=best[1], diagnostics={"residual": best[0], "history": history,
                                               "iterations": it})
        Z = trial
        F, J, segs = system.residual(Z, jac=True)
        fn = np.abs(F).max()
        log.debug("newton T=%g K=%d it=%d lambda=%.3g |dZ|=%.3e residual=%.3e",
                  system.spec.T, system.K, it + 1, lam, ndz, fn)
        history.append(fn)
        if fn < best[0]:
            best = (fn, Z.copy())
    raise NewtonDivergence(
        f"no convergence in {max_iter} Newton iterations (residual {best[0]:.3e})",
        best=best[1], diagnostics={"residual": best[0], "history": history,
                                   "iterations": max_iter})


def _split_segment(spec, mesh, Z, k):
    nodes = _unpack(spec, Z, len(mesh) - 1)
    t_mid = 0.5 * (mesh[k] + mesh[k + 1])
    y_mid = nodes[k] if k + 1 >= len(nodes) else 0.5 * (nodes[k] + nodes[k + 1])
    nodes.insert(k + 1, y_mid)
    return np.insert(mesh, k + 1, t_mid), _pack(nodes)


def _adaptive_newton(spec, mesh, Z, rtol, atol, tol, max_iter, passes=8):
    """Newton on a mesh that is refined until no segment's flow grows too much."""
    total = 0
    for attempt in range(passes + 1):
        system = _System(spec, mesh, rtol, atol)
        try:
            F, J, segs = system.residual(Z, jac=True)
        except IntegrationBlowup as exc:
            if len(mesh) > MAX_SEGMENTS or exc.segment is None or attempt == passes:
                raise
            mesh, Z = _split_segment(spec, mesh, Z, exc.segment)
            continue
        refined = _refine(system, Z, segs) if attempt < passes else None
        if refined is not None:
            mesh, Z = refined
            continue
        Z, F, J, segs, iters, _ = _newton(system, Z, tol, max_iter)
        total += iters
        refined = _refine(system, Z, segs) if attempt < passes else None
        if refined is None:
            return system, Z, F, J, segs, total
        mesh, Z = refined
    raise AssertionError("unreachable")


def solve_bvp(spec: BvpSpec, rtol=1e-10, atol=1e-12, segments=None, max_iter=MAX_NEWTON,
              mesh=None, start_nodes=None, polish=True) -> BvpSolution:
    """Solve ``spec`` by damped Newton multiple shooting.

    Parameters
    ----------
    spec : BvpSpec
    rtol, atol : float
        Integrator tolerances.
    segments : int, optional
        Number of shooting segments; defaults to :func:`default_segments`.
        Segments whose flow Jacobian grows beyond ``SEGMENT_GROWTH`` are split
        and the solve is repeated on the refined mesh.
    mesh : array, optional
        Explicit node times ``0 = t_0 < ... < t_K = T`` (overrides ``segments``).
    start_nodes : array, optional
        ``(K, 2n)`` initial node states on ``mesh`` (the ``x`` part of the
        first node is replaced by ``spec.x0``).
    polish : bool
        When false, stop after the loose phase (``rtol = 1e-7``, residual
        ``1e-6 (1 + data scale)``); continuation uses this for intermediate
        problems.

    Returns
    -------
    BvpSolution
        ``residual`` is the max-norm of all continuity defects and the
        terminal condition.

    Raises
    ------
    NewtonDivergence, IntegrationBlowup, SingularShootingJacobian
    """
    if mesh is None:
        mesh = _uniform_mesh(spec.T, segments or default_segments(spec))
    mesh = np.asarray(mesh, dtype=float)
    if abs(mesh[0]) > 0 or abs(mesh[-1] - spec.T) > 1e-12 * spec.T or np.any(np.diff(mesh) <= 0):
        raise ValueError("mesh must increase strictly from 0 to T")
    mesh[-1] = spec.T
    if start_nodes is not None:
        nodes = [np.array(y, dtype=float) for y in start_nodes]
        if len(nodes) != len(mesh) - 1:
            raise ValueError("start_nodes must have one row per segment")
        nodes[0][: spec.n] = spec.x0
        Z = _pack(nodes)
    else:
        Z = _pack(_initial_nodes(spec, mesh))
    phases = [(rtol, atol, 1e-10 * spec.data_scale)]
    if rtol < COARSE_RTOL:
        # cheap iterations at a loose tolerance first, then polish
        coarse = (COARSE_RTOL, max(atol, 100 * COARSE_RTOL * atol / rtol), 1e-6 * spec.data_scale)
        phases = [coarse] + phases if polish else [coarse]
    total_iters = 0
    for prt, pat, ptol in phases:
        system, Z, F, J, segs, iters = _adaptive_newton(spec, mesh, Z, prt, pat, ptol, max_iter)
        mesh = system.mesh
        total_iters += iters
    nodes = np.array(_unpack(spec, Z, system.K))
    traj = Trajectory.concatenate([s.traj for s in segs])
    return BvpSolution(
        spec=spec, trajectory=traj, p0=nodes[0][spec.n:].copy(),
        residual=float(np.abs(F).max()), newton_iters=total_iters,
        mesh=system.mesh.copy(), nodes=nodes, segments=segs, jacobian=J,
    )


def shooting_jacobian(spec: BvpSpec, p0, rtol=1e-10, atol=1e-12):
    """Single-shooting residual and its Jacobian w.r.t. ``p0`` at ``p0``."""
    system = _System(spec, _uniform_mesh(spec.T, 1), rtol, atol)
    F, J, _ = system.residual(np.asarray(p0, dtype=float), jac=True)
    return F, J


def shooting_residual(spec: BvpSpec, p0, rtol=1e-10, atol=1e-12):
    system = _System(spec, _uniform_mesh(spec.T, 1), rtol, atol)
    return system.residual(np.asarray(p0, dtype=float))[0]


# --------------------------------------------------------------------------
# Continuation

_HOMOTOPY_KEYS = ("T", "x0", "xf", "z")


@dataclass(frozen=True)
class ContinuationPlan:
    """Finite list of homotopy targets; each step is a dict over ``T, x0, xf, z``.

    The last step should describe the problem of interest; steps are visited
    in order, each warm-started from the previous solution.
    """

    steps: tuple = ()
    max_bisections: int = 10

    def __post_init__(self):
        steps = tuple(dict(s) for s in self.steps)
        for s in steps:
            bad = set(s) - set(_HOMOTOPY_KEYS)
            if bad:
                raise ValueError(f"unknown continuation keys {sorted(bad)}")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def ramp(cls, key, start, stop, count, geometric=False, **kw):
        """``count`` values of ``key`` from ``start`` to ``stop``.

        Values are equally spaced, or spaced by a constant ratio along the ray
        ``start -> stop`` when ``geometric`` (useful when the difficulty grows
        with the size of the data, as for large initial states).
        """
        start = np.asarray(start, dtype=float)
        stop = np.asarray(stop, dtype=float)
        if geometric:
            if np.any(start * stop <= 0) or not np.allclose(
                    stop / start, (stop / start).flat[0]):
                raise ValueError("a geometric ramp needs stop to be a positive multiple of start")
            r = float((stop / start).flat[0])
            vals = [start * r ** s for s in np.linspace(0, 1, count)]
        else:
            vals = [start + (stop - start) * s for s in np.linspace(0, 1, count)]
        return cls(tuple({key: (float(v) if v.ndim == 0 else v)} for v in vals), **kw)

    def __add__(self, other):
        return ContinuationPlan(self.steps + other.steps, max(self.max_bisections,
                                                               other.max_bisections))


def _params_of(spec):
    prob = spec.field.problem
    out = {"T": spec.T, "x0": spec.x0.copy()}
    if isinstance(spec.terminal, StateTarget):
        out["xf"] = spec.terminal.xf.copy()
    else:
        out["z"] = prob.z.copy()
    return out


def _apply(spec, params, guess=None):
    prob = spec.field.problem
    fld = spec.field
    if "z" in params and not np.array_equal(np.asarray(params["z"], float), prob.z):
        fld = build_hamiltonian_field(prob.replace(z=np.asarray(params["z"], dtype=float)))
    terminal = spec.terminal
    if "xf" in params:
        terminal = StateTarget(params["xf"], spec.terminal.free)
    return spec.replace(field=fld, T=float(params.get("T", spec.T)),
                        x0=np.asarray(params.get("x0", spec.x0), dtype=float),
                        terminal=terminal, guess=guess, p0_guess=None)


def _interp(a, b, s):
    return {k: (1 - s) * np.asarray(a[k], dtype=float) + s * np.asarray(b[k], dtype=float)
            for k in b}


def _stretched(sol: BvpSolution, T_new, x0_new):
    """Warm start for a new horizon by warping time on the slow arcs.

    The old trajectory is re-timed with ``d tau/dt = 1 + c w(t)``, where
    ``w`` is close to one where the phase speed is small (near equilibria)
    and close to zero in the boundary layers, and ``c`` makes the new span
    equal ``T_new``.  Lengthening a turnpike then lengthens every stay near
    an equilibrium in proportion, leaving the transients intact.  The
    initial state is replaced by ``x0_new``.
    """
    T_old = sol.T
    traj = sol.trajectory
    fld = sol.spec.field
    n = sol.n
    tt = np.linspace(0.0, T_old, 801)
    speed = np.array([np.linalg.norm(fld.eval(y)) for y in traj(tt)])
    delta = 0.05 * speed.max() if speed.max() > 0 else 1.0
    w = 1.0 / (1.0 + (speed / delta) ** 4)
    # cumulative integral of w (trapezoid)
    W = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(tt))])
    if W[-1] < 1e-3 * T_old:
        w = np.ones_like(tt)
        W = tt.copy()
    c = (T_new - T_old) / W[-1]
    if c <= -1.0:
        c = -0.9 * T_old / W[-1] if W[-1] >= T_old else -0.9
    tau = tt + c * W
    tau *= T_new / tau[-1]

    def guess(t):
        t_old = float(np.interp(t, tau, tt))
        y = np.array(traj(min(max(t_old, 0.0), T_old)))
        if t == 0.0:
            y[:n] = x0_new
        return y

    return guess


def _predict(sol: BvpSolution, params):
    """Euler predictor along the solution branch: ``(mesh, nodes)`` for ``params``.

    The mesh is scaled with ``T`` (fixed relative node times) and the nodes
    are moved by ``dZ = -J^{-1} (dF/dparams) dparams``, where ``dF/dT`` is the
    segment vector field times the relative segment length and ``dF/dx0``
    comes from the first segment's flow Jacobian.  Returns ``None`` when the
    target ``z`` changes (the field itself changes; no predictor).
    """
    spec = sol.spec
    n = spec.n
    old = _params_of(spec)
    if "z" in params and not np.allclose(params["z"], old.get("z", params["z"])):
        return None
    J = sol.jacobian
    K = len(sol.segments)
    tau = sol.mesh / spec.T
    dT = float(params.get("T", spec.T)) - spec.T
    dx0 = np.asarray(params.get("x0", spec.x0), dtype=float) - spec.x0
    dB = _boundary(spec, sol.segments[-1].traj.y[-1])[1]
    dF = np.zeros(J.shape[0])
    for k, seg in enumerate(sol.segments):
        v = (tau[k + 1] - tau[k]) * dT * spec.field.eval(seg.traj.y[-1])
        if k < K - 1:
            dF[2 * n * k: 2 * n * (k + 1)] += v
        else:
            dF[2 * n * k:] += dB @ v
    Phi0 = sol.segments[0].sens.final[:, :n] @ dx0
    if K > 1:
        dF[: 2 * n] += Phi0
    else:
        dF[:] += dB @ Phi0
    if isinstance(spec.terminal, StateTarget) and "xf" in params:
        dxf = np.asarray(params["xf"], dtype=float) - spec.terminal.xf
        dF[-n:] -= np.where(spec.terminal.fixed, dxf, 0.0)
    Z = _pack(list(sol.nodes)) - np.linalg.solve(J, dF)
    mesh = tau * float(params.get("T", spec.T))
    nodes = _unpack(spec.replace(x0=spec.x0 + dx0), Z, K)
    return mesh, np.array(nodes)


def _continue_to(spec, sol, params, rtol, atol, polish=True):
    target = _apply(spec, params)
    pred = _predict(sol, params)
    if pred is not None:
        mesh, nodes = pred
        return solve_bvp(target, rtol, atol, mesh=mesh, start_nodes=nodes, polish=polish)
    return solve_bvp(target.replace(guess=_stretched(sol, params["T"], params["x0"])),
                     rtol, atol, polish=polish)


def solve_with_continuation(spec: BvpSpec, plan: ContinuationPlan, rtol=1e-10, atol=1e-12,
                            start: Optional[BvpSolution] = None) -> BvpSolution:
    """Chain ``solve_bvp`` calls along ``plan``, ending at ``spec``'s data.

    ``spec`` fixes the field and any data the plan does not vary.  When a
    step fails it is bisected (up to ``plan.max_bisections`` times); each
    accepted intermediate problem is recorded in ``continuation_path`` as a
    ``(params, p0)`` pair.
    """
    target = _params_of(spec)
    steps = [dict(s) for s in plan.steps]
    if not steps or any(not np.array_equal(np.asarray(steps[-1].get(k, target[k])),
                                           np.asarray(target[k])) for k in target):
        steps.append(dict(target))
    path = []
    if start is None:
        first = _apply(spec, {**target, **steps[0]})
        first = first.replace(p0_guess=spec.p0_guess, guess=spec.guess)
        sol = solve_bvp(first, rtol, atol, polish=len(steps) == 1)
        current = {**target, **steps[0]}
        steps = steps[1:]
    else:
        sol = start
        current = _params_of(start.spec)
    path.append((dict(current), sol.p0.copy()))
    for step in steps:
        goal = {**current, **step}
        s_done = 0.0
        h = 1.0
        halvings = 0
        while s_done < 1.0:
            s_try = min(1.0, s_done + h)
            params = _interp(current, goal, s_try)
            params["T"] = float(params["T"])
            # intermediate problems only feed the next predictor: skip polishing
            polish = s_try == 1.0 and step is steps[-1]
            try:
                nxt = _continue_to(spec, sol, params, rtol, atol, polish)
            except (NewtonDivergence, IntegrationBlowup, SingularShootingJacobian) as exc:
                log.info("continuation step to %s failed: %s", _fmt(params), exc)
                halvings += 1
                if halvings > plan.max_bisections:
                    raise ContinuationStalled(
                        f"continuation stalled towards {_fmt(goal)}: {exc}",
                        last=sol) from exc
                h *= 0.5
                continue
            log.info("continuation reached %s (residual %.2e, %d segments)",
                     _fmt(params), nxt.residual, len(nxt.mesh) - 1)
            sol = nxt
            s_done = s_try
            path.append((dict(params), sol.p0.copy()))
            h = min(1.0 - s_done, 2 * h) if s_done < 1.0 else h
        current = goal
    return dataclasses.replace(sol, spec=dataclasses.replace(sol.spec, guess=None),
                               continuation_path=path)


def _fmt(params):
    return ", ".join(f"{k}={np.round(np.asarray(v), 6).tolist()}" for k, v in params.items())


# --------------------------------------------------------------------------
# Field-of-extremals condition

@dataclass(frozen=True)
class PCondition:
    ok: bool
    min_abs_det: float
    min_rel_sv: float
    dets: list
    times: list

    def to_dict(self):
        return {"ok": self.ok, "min_abs_det": self.min_abs_det, "min_rel_sv": self.min_rel_sv,
                "samples": len(self.dets)}


def node_sensitivities(sol: BvpSolution):
    """``d y_k / d x0`` for every shooting node (implicit function theorem)."""
    n = sol.n
    J = sol.jacobian
    _check_cond(J)
    # dF/dx0 only involves the first segment
    dF = np.zeros((J.shape[0], n))
    Phi0 = sol.segments[0].sens.final
    if len(sol.segments) > 1:
        dF[: 2 * n] = Phi0[:, :n]
    else:
        _, dB = _boundary(sol.spec, sol.segments[0].traj.y[-1])
        dF[:] = dB @ Phi0[:, :n]
    dZ = np.linalg.solve(J, -dF)
    out = [np.vstack([np.eye(n), dZ[:n]])]
    for k in range(len(sol.segments) - 1):
        out.append(dZ[n + 2 * n * k: n + 2 * n * (k + 1)])
    return out


def verify_p_condition(sol: BvpSolution, samples=200) -> PCondition:
    """Sample ``det D_{x0} x(t)`` along the solution.

    ``D_{x0} x(t) = Phi_xx(t) + Phi_xp(t) dp0/dx0`` is propagated node by node
    from the implicit-function derivative of the converged shooting system.
    ``ok`` requires ``D`` to be numerically nonsingular at every sample --
    smallest singular value above ``1e-10`` times the largest -- and the
    determinant not to change sign between consecutive samples.  A relative
    test is used because along a turnpike ``det D`` decays like
    ``exp(t tr A_c)`` without ever vanishing.

    When any terminal component is fixed, ``x_i(T) = xf_i`` does not depend
    on ``x0`` and ``D(T)`` is singular by construction, so the samples cover
    ``[0, T)`` there.
    """
    if samples < 2:
        raise ValueError("samples must be at least 2")
    n = sol.n
    dY = node_sensitivities(sol)
    term = sol.spec.terminal
    fixed_end = isinstance(term, StateTarget) and len(set(term.free)) < n
    times = np.linspace(0.0, sol.T, samples + 1 if fixed_end else samples)
    if fixed_end:
        times = times[:-1]
    bounds = np.array([s.t1 for s in sol.segments])
    dets = []
    rel = []
    for t in times:
        k = min(int(np.searchsorted(bounds, t, side="left")), len(bounds) - 1)
        seg = sol.segments[k]
        Phi = np.eye(2 * n) if t == seg.t0 else seg.sens(t)
        D = (Phi @ dY[k])[:n]
        sv = np.linalg.svd(D, compute_uv=False)
        rel.append(float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0)
        dets.append(float(np.linalg.det(D)))
    dets_a = np.array(dets)
    ok = bool(min(rel) > 1e-10 and np.all(np.sign(dets_a[1:]) == np.sign(dets_a[:-1])))
    return PCondition(ok=ok, min_abs_det=float(np.abs(dets_a).min()), min_rel_sv=min(rel),
                      dets=dets, times=times.tolist())


def verify_residual(sol: BvpSolution, rtol=1e-11, atol=1e-13):
    """Re-integrate every segment from its node at tighter tolerance.

    Returns the max-norm of the re-computed continuity defects and terminal
    condition.
    """
    spec = sol.spec
    out = 0.0
    K = len(sol.mesh) - 1
    for k in range(K):
        end = integrate(spec.field, sol.nodes[k], sol.mesh[k], sol.mesh[k + 1], rtol, atol).y[-1]
        if k < K - 1:
            d = end - sol.nodes[k + 1]
        else:
            d = _boundary(spec, end)[0]
        out = max(out, float(np.abs(d).max()))
    return out


# --------------------------------------------------------------------------
# Horizon sweeps

def default_ramp(T, start=4.0):
    """Horizons ``start, 2 start, ...`` below ``T``, then ``T`` itself."""
    out = []
    t = min(start, T / 2)
    while t < T:
        out.append(t)
        t *= 2
    return out + [T]


def solve_horizon(problem, opt, T, rtol=1e-10, atol=1e-12, plan=None, free=()) -> BvpSolution:
    """Solve ``problem`` at horizon ``T``: directly, else by a T-ramp.

    With an explicit ``plan`` the continuation is used straight away.
    """
    spec = spec_for(problem, T, steady=opt, free=free)
    if plan is not None and plan.steps:
        return solve_with_continuation(spec, plan, rtol, atol)
    try:
        return solve_bvp(spec, rtol, atol)
    except (NewtonDivergence, IntegrationBlowup, SingularShootingJacobian) as exc:
        log.info("direct solve at T=%g failed (%s); ramping the horizon", T, exc)
    plan = ContinuationPlan(tuple({"T": t} for t in default_ramp(T)))
    return solve_with_continuation(spec, plan, rtol, atol)


def solve_horizon_sweep(problem, opt, horizons=None, rtol=1e-10, atol=1e-12, plan=None,
                        free=()):
    """Solutions for every horizon, each warm-started from the previous one."""
    horizons = list(problem.horizons if horizons is None else horizons)
    if not horizons:
        raise ValueError("no horizons to solve")
    sols = [solve_horizon(problem, opt, horizons[0], rtol, atol, plan, free)]
    for T in horizons[1:]:
        spec = spec_for(problem, T, steady=opt, free=free)
        sols.append(solve_with_continuation(spec, ContinuationPlan(), rtol, atol, start=sols[-1]))
    return sols
