"""Control-affine plants, the two quadratic OCP shapes, and their Hamiltonian systems.

For ``dx/dt = f(x) + g(x) u`` and running cost ``(|Cx - z|^2 + |u|^2) / 2``
the Hamiltonian is

    H(x, p) = p^T f(x) - |g(x)^T p|^2 / 2 + |Cx - z|^2 / 2

and the optimal control is recovered as ``u = -g(x)^T p``.  The fixed-endpoint
problem uses the same Hamiltonian with ``z = 0``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import linham
from .errors import InconsistentDerivative, LinearAlgebraError, ModelError, NoConvergence
from .odeflow import VectorField, fd_jacobian

OCP1 = "OCP1"
OCP2 = "OCP2"
HYPERBOLIC_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class ControlAffineSystem:
    """``dx/dt = f(x) + g(x) u``.

    ``dg(x)`` has shape ``(m, n, n)`` with ``dg[k][i, j] = d g_ik / d x_j``.
    The optional second derivatives are ``d2f[i, j, l]`` and
    ``d2g[k, i, j, l]``; when absent they are replaced by finite differences.
    """

    n: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    dg: Callable[[np.ndarray], np.ndarray]
    name: str = "system"
    d2f: Optional[Callable[[np.ndarray], np.ndarray]] = None
    d2g: Optional[Callable[[np.ndarray], np.ndarray]] = None
    constant_g: bool = False  # g does not depend on x (dg = 0); enables a fast path

    def validate(self, seed=0, points=10):
        """Check ``f(0) = 0`` and the derivatives against finite differences."""
        f0 = np.asarray(self.f(np.zeros(self.n)), dtype=float)
        if f0.shape != (self.n,):
            raise ModelError(f"{self.name}: f must return an {self.n}-vector")
        if np.abs(f0).max() > 1e-12:
            raise ModelError(f"{self.name}: f(0) = {f0} is not zero")
        if np.shape(self.g(np.zeros(self.n))) != (self.n, self.m):
            raise ModelError(f"{self.name}: g must return an {self.n}x{self.m} matrix")
        rng = np.random.default_rng(seed)
        for _ in range(points):
            v = rng.normal(size=self.n)
            x = v / np.linalg.norm(v) * rng.uniform() ** (1 / self.n)
            if self.constant_g and np.abs(self.g(x) - self.g(np.zeros(self.n))).max() > 0:
                raise ModelError(f"{self.name}: g is flagged constant but varies with x")
            checks = [
                ("df", self.df(x), fd_jacobian(self.f, x)),
                ("dg", self.dg(x), np.moveaxis(fd_jacobian(self.g, x), 1, 0)),
            ]
            if self.d2f is not None:
                checks.append(("d2f", self.d2f(x), fd_jacobian(self.df, x)))
            if self.d2g is not None:
                checks.append(("d2g", self.d2g(x), fd_jacobian(self.dg, x)))
            for label, exact, approx in checks:
                exact = np.asarray(exact, dtype=float)
                if exact.shape != approx.shape:
                    raise InconsistentDerivative(
                        f"{self.name}: {label} has shape {exact.shape}, expected {approx.shape}")
                err = np.abs(exact - approx).max(initial=0.0)
                if err > 1e-5 * (1 + np.abs(exact).max(initial=0.0)):
                    raise InconsistentDerivative(
                        f"{self.name}: {label} disagrees with finite differences by {err:.2e} at x={x}")
        return self


def linear_system(A, B, name="lqr") -> ControlAffineSystem:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    m = B.shape[1]
    return ControlAffineSystem(
        n=n, m=m,
        f=lambda x: A @ x,
        g=lambda x: B,
        df=lambda x: A,
        dg=lambda x: np.zeros((m, n, n)),
        name=name,
        d2f=lambda x: np.zeros((n, n, n)),
        d2g=lambda x: np.zeros((m, n, n, n)),
        constant_g=True,
    )


@dataclass(frozen=True, eq=False)
class OcpProblem:
    """``OCP1``: free endpoint, target ``z``.  ``OCP2``: ``x(T) = xf``, cost on ``Cx``."""

    system: ControlAffineSystem
    kind: str
    C: np.ndarray
    x0: np.ndarray
    z: Optional[np.ndarray] = None
    xf: Optional[np.ndarray] = None
    horizons: Sequence[float] = ()

    def __post_init__(self):
        n = self.system.n
        if self.kind not in (OCP1, OCP2):
            raise ModelError(f"unknown problem kind {self.kind!r}")
        C = np.asarray(self.C, dtype=float).reshape(-1, n)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(n))
        if self.kind == OCP1:
            if self.xf is not None:
                raise ModelError("OCP1 problems take no terminal state xf")
            z = np.zeros(C.shape[0]) if self.z is None else np.asarray(self.z, dtype=float)
            if z.shape != (C.shape[0],):
                raise ModelError(f"target z must have length {C.shape[0]}")
            object.__setattr__(self, "z", z)
        else:
            if self.z is not None:
                raise ModelError("OCP2 problems take no target z")
            if self.xf is None:
                raise ModelError("OCP2 problems need a terminal state xf")
            object.__setattr__(self, "xf", np.asarray(self.xf, dtype=float).reshape(n))
        hs = [float(T) for T in self.horizons]
        if any(T <= 0 for T in hs) or any(b <= a for a, b in zip(hs, hs[1:])):
            raise ModelError("horizons must be positive and strictly increasing")
        object.__setattr__(self, "horizons", tuple(hs))

    @property
    def n(self):
        return self.system.n

    @property
    def m(self):
        return self.system.m

    @property
    def target(self):
        return self.z if self.kind == OCP1 else np.zeros(self.C.shape[0])

    def replace(self, **changes) -> "OcpProblem":
        return dataclasses.replace(self, **changes)

    def running_cost(self, x, u):
        return 0.5 * (np.sum((self.C @ x - self.target) ** 2) + np.sum(np.asarray(u) ** 2))


class HamiltonianField(VectorField):
    """Characteristic system ``dx/dt = H_p``, ``dp/dt = -H_x`` on R^{2n}."""

    def __init__(self, problem: OcpProblem):
        self.problem = problem
        self.system = problem.system
        self.n = problem.n
        self._C = problem.C
        self._CtC = problem.C.T @ problem.C
        self._Ctz = problem.C.T @ problem.target
        self._z = problem.target
        if self.system.constant_g:
            self._G = np.asarray(self.system.g(np.zeros(self.n)), dtype=float)
            self._R = self._G @ self._G.T
        super().__init__(dim=2 * self.n, eval=self._eval, jacobian=self._jacobian)
        self.eval_jac = self._eval_jac

    def split(self, y):
        y = np.asarray(y, dtype=float)
        return y[..., : self.n], y[..., self.n:]

    def hamiltonian(self, y):
        x, p = self.split(y)
        s = self.system
        w = s.g(x).T @ p
        r = self._C @ x - self._z
        return float(p @ s.f(x) - 0.5 * w @ w + 0.5 * r @ r)

    def control(self, y):
        x, p = self.split(y)
        return -self.system.g(x).T @ p

    def grad_x(self, x, p):
        s = self.system
        w = s.g(x).T @ p
        a = p @ s.dg(x)
        return s.df(x).T @ p - a.T @ w + self._CtC @ x - self._Ctz

    def _eval(self, y, Df=None):
        n = self.n
        x = y[:n]
        p = y[n:]
        s = self.system
        if Df is None:
            Df = s.df(x)
        out = np.empty(2 * n)
        if s.constant_g:
            out[:n] = s.f(x) - self._R @ p
            out[n:] = -(Df.T @ p) - self._CtC @ x + self._Ctz
            return out
        G = s.g(x)
        w = G.T @ p
        a = p @ s.dg(x)
        out[:n] = s.f(x) - G @ w
        out[n:] = a.T @ w - Df.T @ p - self._CtC @ x + self._Ctz
        return out

    def blocks(self, x, p, Df=None):
        """Return ``(H_px, G G^T, H_xx)`` at ``(x, p)``."""
        s = self.system
        if Df is None:
            Df = s.df(x)
        if s.constant_g:
            Hpx = Df
            R = self._R
            if s.d2f is not None:
                Hxx = np.tensordot(p, s.d2f(x), axes=1) + self._CtC
            else:
                Hxx = fd_jacobian(lambda xx: self.grad_x(xx, p), x)
            return Hpx, R, 0.5 * (Hxx + Hxx.T)
        G = s.g(x)
        DG = s.dg(x)
        w = G.T @ p
        a = p @ DG
        Hpx = Df - G @ a - np.tensordot(w, DG, axes=1)
        if s.d2f is not None and s.d2g is not None:
            Hxx = (np.tensordot(p, s.d2f(x), axes=1) - a.T @ a
                   - np.tensordot(w, np.tensordot(p, s.d2g(x), axes=(0, 1)), axes=1) + self._CtC)
        else:
            Hxx = fd_jacobian(lambda xx: self.grad_x(xx, p), x)
        return Hpx, G @ G.T, 0.5 * (Hxx + Hxx.T)

    def _jacobian(self, y, Df=None):
        n = self.n
        Hpx, R, Hxx = self.blocks(y[:n], y[n:], Df)
        J = np.empty((2 * n, 2 * n))
        J[:n, :n] = Hpx
        J[:n, n:] = -R
        J[n:, :n] = -Hxx
        J[n:, n:] = -Hpx.T
        return J

    def _eval_jac(self, y):
        Df = self.system.df(y[: self.n])
        return self._eval(y, Df), self._jacobian(y, Df)


def build_hamiltonian_field(problem: OcpProblem) -> HamiltonianField:
    return HamiltonianField(problem)


@dataclass(frozen=True, eq=False)
class SteadyOptimum:
    x_bar: np.ndarray
    u_bar: np.ndarray
    p_bar: np.ndarray
    A_z: np.ndarray
    B_z: np.ndarray
    Q_z: np.ndarray  # H_xx at the equilibrium; equals C^T C when p_bar = 0 or f, g are linear
    J_s: float
    eigenvalues: np.ndarray
    hyperbolic: bool
    stable_dim: int

    @property
    def state(self):
        return np.concatenate([self.x_bar, self.p_bar])

    @property
    def linearization(self):
        return linham.hamiltonian_matrix(self.A_z, self.B_z @ self.B_z.T, self.Q_z)

    def to_dict(self):
        return {
            "x_bar": self.x_bar.tolist(),
            "u_bar": self.u_bar.tolist(),
            "p_bar": self.p_bar.tolist(),
            "J_s": self.J_s,
            "hyperbolic": self.hyperbolic,
            "stable_dim": self.stable_dim,
        }


def steady_optimum_at(field: HamiltonianField, y) -> SteadyOptimum:
    """Package an equilibrium ``y = (x_bar, p_bar)`` of ``field``."""
    problem = field.problem
    x, p = field.split(np.asarray(y, dtype=float))
    Hpx, R, Hxx = field.blocks(x, p)
    u = field.control(np.concatenate([x, p]))
    lin = np.block([[Hpx, -R], [-Hxx, -Hpx.T]])
    eigs = np.linalg.eigvals(lin)
    scale = max(1.0, np.linalg.norm(lin, 2))
    hyperbolic = bool(np.all(np.abs(eigs.real) > HYPERBOLIC_TOL * scale))
    return SteadyOptimum(
        x_bar=x.copy(), u_bar=u, p_bar=p.copy(),
        A_z=Hpx, B_z=np.asarray(problem.system.g(x), dtype=float), Q_z=Hxx,
        J_s=float(problem.running_cost(x, u)),
        eigenvalues=eigs,
        hyperbolic=hyperbolic,
        stable_dim=int(np.count_nonzero(eigs.real < 0)),
    )


def _newton_equilibrium(field, y0, max_iter=200, max_halvings=40):
    n = field.n
    y = np.asarray(y0, dtype=float).copy()
    F = field.eval(y)
    fn = np.linalg.norm(F)
    for _ in range(max_iter):
        if fn <= 1e-11 * (1 + np.abs(y[:n]).sum() + np.abs(y[n:]).sum()):
            return _polish(field, y, fn)
        J = field.jac(y)
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -F, rcond=None)[0]
        lam = 1.0
        for _ in range(max_halvings + 1):
            trial = y + lam * step
            Ft = field.eval(trial)
            ftn = np.linalg.norm(Ft)
            if np.isfinite(ftn) and ftn < fn:
                break
            lam *= 0.5
        else:
            raise NoConvergence(f"line search failed from seed {y0}")
        y, F, fn = trial, Ft, ftn
    raise NoConvergence(f"no convergence after {max_iter} iterations from seed {y0}")


def _polish(field, y, fn, steps=3):
    for _ in range(steps):
        try:
            trial = y + np.linalg.solve(field.jac(y), -field.eval(y))
        except np.linalg.LinAlgError:
            break
        tn = np.linalg.norm(field.eval(trial))
        if not tn < fn:
            break
        y, fn = trial, tn
    return y


def solve_sop(problem: OcpProblem, seeds, dedup_radius=1e-6, failures=None):
    """Steady optima as equilibria of the Hamiltonian field.

    Seeds may be n-vectors (costate seeded at zero) or 2n-vectors.  Failed
    seeds are appended to ``failures`` when a list is given.  Roots are
    deduplicated and returned sorted by steady cost, then lexicographically.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("solve_sop needs at least one seed")
    field = build_hamiltonian_field(problem)
    n = problem.n
    roots = []
    for s in seeds:
        s = np.asarray(s, dtype=float).reshape(-1)
        y0 = np.concatenate([s, np.zeros(n)]) if s.size == n else s
        if y0.size != 2 * n:
            raise ValueError(f"seed {s} must have length {n} or {2 * n}")
        try:
            roots.append(_newton_equilibrium(field, y0))
        except NoConvergence as exc:
            if failures is not None:
                failures.append((s, str(exc)))
    roots.sort(key=tuple)
    kept = []
    for r in roots:
        if all(np.linalg.norm(r - k) > dedup_radius for k in kept):
            kept.append(r)
    opts = [steady_optimum_at(field, r) for r in kept]
    opts.sort(key=lambda o: (round(o.J_s, 12), tuple(o.state)))
    return opts


@dataclass
class HypothesisReport:
    stabilizable: bool
    detectable: bool
    hyperbolic: bool
    transversal: Optional[bool] = None
    pl_min_sv: Optional[float] = None
    riccati_error: Optional[str] = None
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return bool(self.stabilizable and self.detectable and self.hyperbolic and self.transversal)

    def to_dict(self):
        return {
            "stabilizable": self.stabilizable,
            "detectable": self.detectable,
            "hyperbolic": self.hyperbolic,
            "transversal": self.transversal,
            "pl_min_sv": self.pl_min_sv,
            "riccati_error": self.riccati_error,
            "passed": self.passed,
            "notes": list(self.notes),
        }


def check_hypotheses(opt: SteadyOptimum, problem: OcpProblem) -> HypothesisReport:
    """PBH tests on ``(C, A_z, B_z)``, hyperbolicity, and transversality of ``U`` to ``{p = 0}``."""
    C = problem.C
    rep = HypothesisReport(
        stabilizable=linham.pbh_stabilizable(opt.A_z, opt.B_z),
        detectable=linham.pbh_detectable(C, opt.A_z),
        hyperbolic=opt.hyperbolic,
    )
    if not rep.stabilizable:
        rep.notes.append("(A_z, B_z) fails the PBH stabilizability test")
    if not rep.detectable:
        rep.notes.append("(C, A_z) fails the PBH detectability test")
    try:
        sol = linham.solve_care(opt.A_z, opt.B_z @ opt.B_z.T, opt.Q_z)
    except LinearAlgebraError as exc:
        rep.riccati_error = f"{type(exc).__name__}: {exc}"
        rep.transversal = False
        return rep
    chk = linham.check_pl_plus_i(sol.P, sol.L)
    rep.transversal = bool(chk.nonsingular)
    rep.pl_min_sv = chk.min_sv
    return rep
