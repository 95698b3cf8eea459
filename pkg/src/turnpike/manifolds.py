"""Stable and unstable manifolds of hyperbolic Hamiltonian equilibria.

* :func:`tangent_spaces` -- tangent spaces from the Riccati data
  ``T S = span [I; P]``, ``T U = span [L; PL + I]``, cross-checked against an
  ordered Schur basis of the linearization.
* :func:`verify_affine_unstable` -- for plants ``dx1 = A1 x1 + A2(x1, x2) x1``,
  ``dx2 = A3 x2 + B2 u`` the unstable manifold is the affine set
  ``{x1 = 0, (I + S3 P3)(x2 - x20) - S3 (p2 - p20) = 0}``; points of a
  candidate set are flowed forward and their drift off the set measured.
* :func:`grow_manifold_2d` -- the four branches of a saddle in the phase
  plane (``n = 1``), and :func:`trace_closed_orbit` for the periodic orbits
  around a center.
* :func:`estimate_rho` -- radius of the ball around a point of the stable
  manifold whose orbits obey a given exponential bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from . import linham
from .errors import IntegrationError, InvalidBaseline, ManifoldError
from .model import SteadyOptimum
from .odeflow import VectorField, integrate

STABLE = "stable"
UNSTABLE = "unstable"
ANGLE_TOL = 1e-8


@dataclass(frozen=True)
class AffineSet:
    """``{base + V c}`` with orthonormal ``V`` (columns span the direction space)."""

    base: np.ndarray
    span: np.ndarray

    def distance(self, y):
        d = np.asarray(y, dtype=float) - self.base
        return float(np.linalg.norm(d - self.span @ (self.span.T @ d)))

    def to_dict(self):
        return {"base": self.base.tolist(), "span": self.span.tolist()}


@dataclass(frozen=True, eq=False)
class InvariantManifoldChart:
    """Local description of ``S`` or ``U`` at a Hamiltonian equilibrium."""

    equilibrium: np.ndarray
    kind: str
    tangent_basis: np.ndarray
    samples: list = field(default_factory=list)
    affine: Optional[AffineSet] = None


@dataclass(frozen=True)
class AffineStructure:
    """Index split for plants ``dx1 = A1 x1 + A2(x1, x2) x1``, ``dx2 = A3 x2 + B2 u``.

    With ``A2(0, x2) = 0`` the unstable manifold of the Hamiltonian
    equilibrium is an affine subspace; the blocks ``A3``, ``B2`` and the
    ``x2`` cost weight are read off the linearization at the equilibrium.
    """

    x1_idx: tuple
    x2_idx: tuple


def principal_angles(U, V):
    """Principal angles (radians) between the column spans of ``U`` and ``V``."""
    return sla.subspace_angles(np.asarray(U, dtype=float), np.asarray(V, dtype=float))


def _orth(M):
    q, _ = np.linalg.qr(M)
    return q


def _schur_bases(H):
    n = H.shape[0] // 2
    _, Zs, _ = sla.schur(H, output="real", sort="lhp")
    _, Zu, _ = sla.schur(H, output="real", sort="rhp")
    return Zs[:, :n], Zu[:, :n]


def _tangent_samples(eq, basis, radius):
    return [eq + s * radius * basis[:, j] for j in range(basis.shape[1]) for s in (1.0, -1.0)]


def tangent_spaces(opt: SteadyOptimum, sample_radius=1e-4):
    """Stable and unstable tangent spaces at ``opt`` as charts.

    The Riccati data come from the linearization ``(A_z, B_z B_z^T, Q_z)``;
    ``Q_z = H_xx`` reduces to ``C^T C`` when ``p_bar = 0`` or the plant is
    linear, and includes the curvature term otherwise.

    Parameters
    ----------
    opt : SteadyOptimum
        Hyperbolic Hamiltonian equilibrium.
    sample_radius : float
        Distance of the tangent samples from the equilibrium.

    Returns
    -------
    (InvariantManifoldChart, InvariantManifoldChart)
        Stable and unstable charts with orthonormal tangent bases.

    Raises
    ------
    ManifoldError
        If the Riccati bases and the ordered Schur bases disagree by a
        principal angle of more than ``1e-8``.
    """
    n = opt.x_bar.size
    Q = opt.Q_z
    sol = linham.solve_care(opt.A_z, opt.B_z @ opt.B_z.T, Q)
    I = np.eye(n)
    Ts = _orth(np.vstack([I, sol.P]))
    Tu = _orth(np.vstack([sol.L, sol.P @ sol.L + I]))
    H = linham.hamiltonian_matrix(opt.A_z, opt.B_z @ opt.B_z.T, Q)
    Es, Eu = _schur_bases(H)
    worst = max(principal_angles(Ts, Es).max(), principal_angles(Tu, Eu).max())
    if worst > ANGLE_TOL:
        raise ManifoldError(
            f"Riccati and Schur tangent bases disagree (principal angle {worst:.2e})")
    eq = opt.state
    return (
        InvariantManifoldChart(eq, STABLE, Ts, _tangent_samples(eq, Ts, sample_radius)),
        InvariantManifoldChart(eq, UNSTABLE, Tu, _tangent_samples(eq, Tu, sample_radius)),
    )


def linear_rate(opt: SteadyOptimum) -> float:
    """Smallest ``|Re lambda|`` of the linearized Hamiltonian."""
    return float(np.abs(np.linalg.eigvals(opt.linearization).real).min())


def check_samples(field: VectorField, chart: InvariantManifoldChart, rate, factor=10.0,
                  rtol=1e-10, atol=1e-12):
    """Contraction test of the chart samples.

    Each sample is integrated for time ``5 / rate`` forward (stable charts) or
    backward (unstable charts); returns the worst ratio of final to initial
    distance from the equilibrium, which should be at most ``1 / factor``.
    """
    sign = 1.0 if chart.kind == STABLE else -1.0
    horizon = sign * 5.0 / rate
    worst = 0.0
    for s in chart.samples:
        d0 = np.linalg.norm(s - chart.equilibrium)
        end = integrate(field, s, 0.0, horizon, rtol, atol).y[-1]
        worst = max(worst, np.linalg.norm(end - chart.equilibrium) / d0)
    return worst, worst <= 1.0 / factor


# --------------------------------------------------------------------------
# Affine unstable manifold

@dataclass(frozen=True)
class AffineCheck:
    is_affine: bool
    max_drift: float
    description: dict

    def to_dict(self):
        return {"is_affine": self.is_affine, "max_drift": self.max_drift,
                "description": self.description}


def affine_unstable_set(opt: SteadyOptimum, structure: AffineStructure) -> AffineSet:
    """The affine unstable manifold of a plant with the given block structure.

    With ``P3`` the stabilizing Riccati solution for ``(A3, B2 B2^T, Q22)``
    and ``S3`` the solution of ``A_c3 S3 + S3 A_c3^T = B2 B2^T``
    (``A_c3 = A3 - B2 B2^T P3``), the set is
    ``{x1 = 0, (I + S3 P3)(x2 - x20) - S3 (p2 - p20) = 0}``; ``p1`` is free.
    ``S3`` is negative semidefinite.
    """
    n = opt.x_bar.size
    i1 = list(structure.x1_idx)
    i2 = list(structure.x2_idx)
    if sorted(i1 + i2) != list(range(n)):
        raise ValueError("x1_idx and x2_idx must partition the state indices")
    if np.abs(opt.x_bar[i1]).max(initial=0.0) > 1e-10:
        raise ManifoldError("equilibrium does not lie on x1 = 0")
    A3 = opt.A_z[np.ix_(i2, i2)]
    B2 = opt.B_z[i2]
    Q22 = opt.Q_z[np.ix_(i2, i2)]
    sol = linham.solve_care(A3, B2 @ B2.T, Q22)
    P3, S3 = sol.P, sol.L
    n2 = len(i2)
    V = np.zeros((2 * n, len(i1) + n2))
    for j, i in enumerate(i1):
        V[n + i, j] = 1.0  # p1 direction
    V[np.ix_(i2, range(len(i1), len(i1) + n2))] = S3
    V[np.ix_([n + i for i in i2], range(len(i1), len(i1) + n2))] = np.eye(n2) + P3 @ S3
    return AffineSet(opt.state.copy(), _orth(V))


def verify_affine_unstable(field: VectorField, opt: SteadyOptimum,
                           structure: Optional[AffineStructure] = None,
                           candidate: Optional[AffineSet] = None, points=50, radius=2.0,
                           t_flow=1.0, seed=0, rtol=1e-12, atol=1e-14) -> AffineCheck:
    """Flow points of an affine candidate set forward and measure their drift.

    ``points`` random points of the set within ``radius`` of the equilibrium
    are integrated for ``t_flow``; ``max_drift`` is the largest Euclidean
    distance of an end point from the set and ``is_affine`` holds when
    ``max_drift <= 1e-6 (1 + radius)``.  The candidate defaults to
    :func:`affine_unstable_set` of ``structure``.
    """
    if candidate is None:
        if structure is None:
            raise ValueError("need a block structure or a candidate affine set")
        candidate = affine_unstable_set(opt, structure)
    rng = np.random.default_rng(seed)
    k = candidate.span.shape[1]
    drift = 0.0
    for _ in range(points):
        c = rng.standard_normal(k)
        c *= radius * rng.uniform() ** (1.0 / k) / np.linalg.norm(c)
        y0 = candidate.base + candidate.span @ c
        try:
            end = integrate(field, y0, 0.0, t_flow, rtol, atol).y[-1]
        except IntegrationError:
            drift = np.inf
            break
        drift = max(drift, candidate.distance(end))
    desc = candidate.to_dict()
    if structure is not None:
        desc["structure"] = {"x1_idx": list(structure.x1_idx), "x2_idx": list(structure.x2_idx)}
    return AffineCheck(bool(drift <= 1e-6 * (1 + radius)), float(drift), desc)


# --------------------------------------------------------------------------
# Phase plane

@dataclass(frozen=True)
class Branch:
    """One invariant branch of a saddle: polyline points ``(x, p)``."""

    kind: str
    sign: int
    points: np.ndarray
    arc_length: float
    stop: str


def _window_box(eq, window):
    if window is None:
        return np.array([[eq[0] - 2.0, eq[0] + 2.0], [eq[1] - 2.0, eq[1] + 2.0]])
    return np.asarray(window, dtype=float).reshape(2, 2)


def _inside(box, y):
    return box[0, 0] <= y[0] <= box[0, 1] and box[1, 0] <= y[1] <= box[1, 1]


def _dense_points(traj, spacing):
    """Dense-output samples with consecutive spacing at most ``spacing``."""
    pts = [traj.y[0]]
    for i in range(len(traj.t) - 1):
        a, b = traj.t[i], traj.t[i + 1]
        seg = np.linalg.norm(traj.y[i + 1] - traj.y[i])
        pieces = max(1, int(np.ceil(2.0 * seg / spacing)))
        ts = np.linspace(a, b, pieces + 1)[1:]
        pts.extend(traj(ts))
    return np.array(pts)


def _grow(field, start, direction, box, arc_budget, spacing, max_time, rtol, atol):
    pts = [np.asarray(start, dtype=float)]
    arc = 0.0
    t = 0.0
    chunk = 1.0
    y = pts[0]
    while True:
        try:
            traj = integrate(field, y, 0.0, direction * chunk, rtol, atol)
        except IntegrationError:
            # finite-time escape inside the chunk: shorter chunks let the
            # window test stop the branch before the blow-up
            chunk *= 0.5
            if chunk < 1e-6:
                return np.array(pts), arc, "escape"
            continue
        new = _dense_points(traj, spacing)[1:]
        for q in new:
            arc += float(np.linalg.norm(q - pts[-1]))
            pts.append(q)
            if not _inside(box, q):
                return np.array(pts), arc, "window"
            if arc >= arc_budget:
                return np.array(pts), arc, "arc_budget"
        t += chunk
        y = traj.y[-1]
        if t >= max_time:
            return np.array(pts), arc, "max_time"


def grow_manifold_2d(field: VectorField, eq, arc_budget=10.0, window=None, eps=None,
                     max_time=60.0, rtol=1e-11, atol=1e-13):
    """Grow the four invariant branches of a saddle of a planar field.

    Parameters
    ----------
    field : VectorField
        Planar vector field (the Hamiltonian field of an ``n = 1`` problem).
    eq : array of 2
        Hyperbolic saddle equilibrium.
    arc_budget : float
        Stop a branch once its arc length reaches this value.
    window : ((xmin, xmax), (pmin, pmax)), optional
        Stop a branch when it leaves this box (default ``eq`` +/- 2).
    eps : float, optional
        Seed offset along the eigenvectors; default ``1e-6`` times the window
        size.
    max_time : float
        Integration time cap per branch (branches approaching another
        equilibrium slow down indefinitely).

    Returns
    -------
    list of Branch
        Unstable branches (grown forward) then stable ones (grown backward),
        each with signs ``+1, -1``; polyline spacing is at most ``0.01``
        times the window size.  ``Branch.stop`` records why growth ended:
        ``"window"``, ``"arc_budget"``, ``"max_time"`` or ``"escape"``
        (finite-time blow-up).
    """
    if field.dim != 2:
        raise ValueError("grow_manifold_2d needs a planar field (n = 1)")
    eq = np.asarray(eq, dtype=float)
    box = _window_box(eq, window)
    size = float(max(box[:, 1] - box[:, 0]))
    eps = 1e-6 * size if eps is None else eps
    lam, vecs = np.linalg.eig(field.jac(eq))
    if np.any(np.abs(lam.imag) > 0) or not (lam.real.min() < 0 < lam.real.max()):
        raise ManifoldError(f"equilibrium {eq.tolist()} is not a saddle (eigenvalues {lam})")
    order = np.argsort(lam.real)
    v_s = vecs[:, order[0]].real
    v_u = vecs[:, order[1]].real
    branches = []
    for kind, v, direction in ((UNSTABLE, v_u, 1.0), (STABLE, v_s, -1.0)):
        v = v / np.linalg.norm(v)
        for sign in (1, -1):
            pts, arc, stop = _grow(field, eq + sign * eps * v, direction, box, arc_budget,
                                   0.01 * size, max_time, rtol, atol)
            branches.append(Branch(kind, sign, np.vstack([eq, pts]), arc, stop))
    return branches


@dataclass(frozen=True)
class ClosedOrbit:
    points: np.ndarray
    period: float
    closure: float
    hamiltonian_drift: float


def trace_closed_orbit(field: VectorField, seed, center, max_time=100.0, spacing=None,
                       hamiltonian=None, rtol=1e-11, atol=1e-13) -> ClosedOrbit:
    """Integrate from ``seed`` until the orbit winds once around ``center``.

    The return is located on the ray from ``center`` through ``seed`` (angle
    ``2 pi`` reached, refined on the dense output by root finding).
    ``closure`` is the distance between the return point and ``seed``.

    Raises
    ------
    ManifoldError
        If no return happens within ``max_time``.
    """
    seed = np.asarray(seed, dtype=float)
    center = np.asarray(center, dtype=float)
    r0 = seed - center
    base = np.arctan2(r0[1], r0[0])

    def angle(y):
        r = y - center
        return np.arctan2(r[1], r[0])

    spacing = 0.01 * np.linalg.norm(r0) if spacing is None else spacing
    pts = [seed]
    total = 0.0  # unwrapped winding angle
    y = seed
    t = 0.0
    chunk = 0.5
    while t < max_time:
        traj = integrate(field, y, t, t + chunk, rtol, atol)
        prev_y, prev_a = y, 0.0
        for i in range(1, len(traj.t)):
            d = angle(traj.y[i]) - angle(traj.y[i - 1])
            d = (d + np.pi) % (2 * np.pi) - np.pi
            if abs(total + d) >= 2 * np.pi:
                target = np.sign(total + d) * 2 * np.pi

                def g(s, i=i, tot=total):
                    q = traj(s)
                    dd = angle(q) - angle(traj.y[i - 1])
                    dd = (dd + np.pi) % (2 * np.pi) - np.pi
                    return tot + dd - target

                t_ret = brentq(g, traj.t[i - 1], traj.t[i], xtol=1e-14, rtol=1e-15)
                y_ret = traj(t_ret)
                pts.extend(_dense_points(traj, spacing)[1:])
                drift = 0.0
                if hamiltonian is not None:
                    drift = abs(hamiltonian(y_ret) - hamiltonian(seed))
                return ClosedOrbit(np.array(pts), float(t_ret),
                                   float(np.linalg.norm(y_ret - seed)), float(drift))
            total += d
        pts.extend(_dense_points(traj, spacing)[1:])
        y = traj.y[-1]
        t += chunk
    raise ManifoldError(f"orbit from {seed.tolist()} did not close within t={max_time}")


# --------------------------------------------------------------------------
# Proposition-style radius estimate

def _directions(dim, count, seed):
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((count, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _obeys(field, y, eq, T, K, mu, grid, rtol, atol):
    ts = np.linspace(0.0, T, grid)
    try:
        traj = integrate(field, y, 0.0, T, rtol, atol)
    except IntegrationError:
        return False
    dist = np.linalg.norm(traj(ts) - eq, axis=1)
    return bool(np.all(dist <= K * np.exp(-mu * ts) * (1 + 1e-12) + 1e-14))


def estimate_rho(field: VectorField, chart: InvariantManifoldChart, z0, T, K, mu,
                 samples=32, grid=100, seed=0, tol=1e-9, rho_max=1e3,
                 rtol=1e-11, atol=1e-13) -> float:
    """Largest ``rho`` such that orbits from the sphere ``|y - z0| = rho`` obey the bound.

    The bound is ``|phi(t, y) - eq| <= K exp(-mu t)`` on a ``grid``-point
    uniform grid of ``[0, T]``; the sphere is represented by ``samples``
    seeded random directions (both directions in one dimension).  ``rho`` is
    found by doubling then bisection to absolute tolerance ``tol``.

    Raises
    ------
    InvalidBaseline
        If the orbit of ``z0`` itself violates the bound.
    """
    eq = np.asarray(chart.equilibrium, dtype=float)
    z0 = np.asarray(z0, dtype=float)
    if not _obeys(field, z0, eq, T, K, mu, grid, rtol, atol):
        raise InvalidBaseline("the orbit of z0 violates |phi(t, z0) - eq| <= K exp(-mu t)")
    dirs = _directions(z0.size, samples, seed)

    def ok(rho):
        return all(_obeys(field, z0 + rho * d, eq, T, K, mu, grid, rtol, atol) for d in dirs)

    lo, hi = 0.0, min(1.0, rho_max)
    while ok(hi):
        lo, hi = hi, 2 * hi
        if hi > rho_max:
            return float(lo)
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return float(lo)


def rho_profile(field, chart, z0, horizons: Sequence[float], K, mu, grid=100, **kw):
    """``estimate_rho`` over increasing horizons; returns ``(rhos, non_increasing)``.

    Every horizon is sampled with the grid spacing of the shortest one
    (``grid`` points on ``[0, min T]``), so the time grids are nested and
    the constraint sets grow with ``T`` as they do in continuous time.
    """
    horizons = [float(T) for T in horizons]
    h = min(horizons) / (grid - 1)
    rhos = [estimate_rho(field, chart, z0, T, K, mu, grid=int(round(T / h)) + 1, **kw)
            for T in horizons]
    tol = kw.get("tol", 1e-9)
    mono = all(b <= a + 2 * tol * max(1.0, a) for a, b in zip(rhos, rhos[1:]))
    return rhos, bool(mono)
