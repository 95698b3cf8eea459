"""Dense linear algebra for linear Hamiltonian systems.

Algebraic Riccati and Lyapunov solvers, the symplectic block-diagonalization
of ``Ham = [[A, -R], [-Q, -A^T]]``, PBH rank tests, and the nonsingularity
checks on ``PL + I`` and on the (1,1) block of ``exp(t Ham)``.

All functions are pure; matrices are plain ``numpy`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import NotDetectable, NotHurwitz, NotStabilizable, NumericalFailure

IMAG_AXIS_TOL = 1e-8
KRONECKER_MAX_N = 32


def _as_square(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


@dataclass(frozen=True)
class LinearTriple:
    """Output/state/input matrices ``(C, A, B)`` of a linear plant."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = _as_square(self.A, "A")
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        C = np.asarray(self.C, dtype=float).reshape(-1, n)
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(C))):
            raise ValueError("B and C must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def R(self):
        return self.B @ self.B.T

    @property
    def Q(self):
        return self.C.T @ self.C


@dataclass(frozen=True)
class RiccatiSolution:
    P: np.ndarray
    L: np.ndarray
    A_c: np.ndarray
    T_sympl: np.ndarray
    stable_eigs: np.ndarray
    unstable_eigs: np.ndarray
    residual: float

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def T_inv(self):
        """Closed-form inverse ``[[LP + I, -L], [-P, I]]``."""
        n = self.n
        I = np.eye(n)
        return np.block([[self.L @ self.P + I, -self.L], [-self.P, I]])


def hamiltonian_matrix(A, R, Q):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return np.block([[A, -np.atleast_2d(R)], [-np.atleast_2d(Q), -A.T]])


def riccati_residual(P, A, R, Q):
    return P @ A + A.T @ P - P @ R @ P + Q


def symplectic_form(n):
    I = np.eye(n)
    Z = np.zeros((n, n))
    return np.block([[Z, I], [-I, Z]])


def solve_lyapunov(M, W):
    """Solve ``X M^T + M X = W`` for Hurwitz ``M``.

    Uses a Kronecker-product linear solve up to n = 32 and Bartels-Stewart
    beyond that.
    """
    M = _as_square(M, "M")
    W = _as_square(W, "W")
    n = M.shape[0]
    if W.shape != (n, n):
        raise ValueError("M and W must have the same shape")
    eigs = np.linalg.eigvals(M)
    if np.any(eigs.real >= -1e-10):
        raise NotHurwitz(f"matrix is not Hurwitz (spectral abscissa {eigs.real.max():.3e})")
    if n <= KRONECKER_MAX_N:
        I = np.eye(n)
        K = np.kron(M, I) + np.kron(I, M)
        X = np.linalg.solve(K, W.reshape(-1)).reshape(n, n)
    else:
        X = sla.solve_continuous_lyapunov(M, W)
    if np.allclose(W, W.T, rtol=0, atol=1e-14 * (1 + np.abs(W).max())):
        X = 0.5 * (X + X.T)
    return X


def pbh_stabilizable(A, B):
    """PBH test: ``rank [A - lam I, B] = n`` for every eigenvalue with Re >= -1e-9."""
    A = _as_square(A, "A")
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    tol = 1e-9 * np.linalg.norm(A, 2)
    for lam in np.linalg.eigvals(A):
        if lam.real < -1e-9:
            continue
        M = np.hstack([A - lam * np.eye(n), B.astype(complex)])
        s = np.linalg.svd(M, compute_uv=False)
        if np.count_nonzero(s > tol) < n:
            return False
    return True


def pbh_detectable(C, A):
    A = _as_square(A, "A")
    C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
    return pbh_stabilizable(A.T, C.T)


def _diagnose(A, R, Q, why):
    if not pbh_stabilizable(A, R):
        raise NotStabilizable(f"(A, R) is not stabilizable: {why}")
    if not pbh_detectable(Q, A):
        raise NotDetectable(f"(Q, A) is not detectable: {why}")
    raise NumericalFailure(why)


def solve_care(A, R, Q) -> RiccatiSolution:
    """Stabilizing solution of ``PA + A^T P - PRP + Q = 0``.

    The stable invariant subspace of ``Ham`` is taken from an ordered real
    Schur form, ``P = U21 U11^{-1}``, followed by one Newton (Kleinman) step.
    """
    A = _as_square(A, "A")
    n = A.shape[0]
    R = _as_square(R, "R")
    Q = _as_square(Q, "Q")
    if R.shape != (n, n) or Q.shape != (n, n):
        raise ValueError("A, R, Q must share the same shape")

    H = hamiltonian_matrix(A, R, Q)
    scale = max(1.0, np.linalg.norm(H, 2))
    eigs = np.linalg.eigvals(H)
    if np.any(np.abs(eigs.real) < IMAG_AXIS_TOL * scale):
        _diagnose(A, R, Q, "Hamiltonian matrix has eigenvalues on the imaginary axis")

    _, Z, sdim = sla.schur(H, output="real", sort="lhp")
    if sdim != n:
        _diagnose(A, R, Q, f"stable subspace has dimension {sdim}, expected {n}")
    U11 = Z[:n, :n]
    U21 = Z[n:, :n]
    if np.linalg.svd(U11, compute_uv=False).min() < 1e-12:
        _diagnose(A, R, Q, "stable subspace is not a graph over the state space")
    P = np.linalg.solve(U11.T, U21.T).T
    P = 0.5 * (P + P.T)

    res = np.linalg.norm(riccati_residual(P, A, R, Q))
    try:
        Ac = A - R @ P
        P_new = solve_lyapunov(Ac.T, -(Q + P @ R @ P))
        res_new = np.linalg.norm(riccati_residual(P_new, A, R, Q))
        if res_new < res:
            P, res = P_new, res_new
    except NotHurwitz:
        pass

    Ac = A - R @ P
    stable = np.linalg.eigvals(Ac)
    if np.any(stable.real >= 0):
        raise NumericalFailure("closed-loop matrix A - RP is not Hurwitz")
    if res > 1e-9 * (1 + np.linalg.norm(P, 2) ** 2):
        raise NumericalFailure(f"Riccati residual {res:.3e} above tolerance")

    L = solve_lyapunov(Ac, R)
    I = np.eye(n)
    T = np.block([[I, L], [P, P @ L + I]])
    return RiccatiSolution(
        P=P, L=L, A_c=Ac, T_sympl=T,
        stable_eigs=np.sort_complex(stable),
        unstable_eigs=np.sort_complex(-stable.conj()),
        residual=float(res),
    )


def block_diagonalize(A, R, Q):
    """Return ``(T, A_c)`` with ``Ham T = T diag(A_c, -A_c^T)``."""
    sol = solve_care(A, R, Q)
    return sol.T_sympl, sol.A_c


class PLCheck(NamedTuple):
    nonsingular: bool
    min_sv: float


def check_pl_plus_i(P, L) -> PLCheck:
    P = np.atleast_2d(P)
    L = np.atleast_2d(L)
    PL = P @ L
    s = np.linalg.svd(PL + np.eye(P.shape[0]), compute_uv=False)
    min_sv = float(s.min())
    return PLCheck(bool(min_sv > 1e-10 * (1 + np.linalg.norm(PL, 2))), min_sv)


def phi11_dets(sol: RiccatiSolution, t_grid: Sequence[float]):
    """``det Phi_11(t)``, the upper-left block of ``exp(t Ham)``.

    From the block diagonalization, ``Phi_11(t) = exp(t A_c) (I + Lt(t) P)``
    with ``Lt(t) = L - exp(-t A_c) L exp(-t A_c^T)``.  Forming ``exp(-t A_c)``
    directly loses the slow growing directions to round-off once the fast
    ones dominate, so when ``P`` is invertible the equivalent form

        det Phi_11(t) = exp(-t tr A_c) det(P) det(F (P^{-1} + L) F^T - L),

    with the decaying ``F = exp(t A_c)``, is used instead; it involves no
    growing exponentials.  Determinants are accumulated in log space.
    """
    n = sol.n
    trace = float(np.trace(sol.A_c))
    P, L = sol.P, sol.L
    use_inverse = np.linalg.cond(P) < 1e8
    if use_inverse:
        Pinv = np.linalg.inv(P)
        Pinv = (Pinv + Pinv.T) / 2
        sP, lP = np.linalg.slogdet(P)
    out = []
    for t in t_grid:
        t = float(t)
        if t < 0:
            raise ValueError("t_grid must be non-negative")
        if use_inverse:
            F = sla.expm(t * sol.A_c)
            sign, logdet = np.linalg.slogdet(F @ (Pinv + L) @ F.T - L)
            out.append(float(sP * sign * np.exp(lP + logdet - t * trace)))
        else:
            E = sla.expm(-t * sol.A_c)
            Lt = L - E @ L @ E.T
            sign, logdet = np.linalg.slogdet(np.eye(n) + Lt @ P)
            out.append(float(sign * np.exp(logdet + t * trace)))
    return out


def phi11_nonsingular(A, R, Q, t_grid):
    return phi11_dets(solve_care(A, R, Q), t_grid)
