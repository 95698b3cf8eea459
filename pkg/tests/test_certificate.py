import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from turnpike.certificate import (CERTIFIED, INCONCLUSIVE, MU_FLOOR, MU_SPREAD, Profile, certify,
                                  control_profile, distance_profile, envelope_valid, fit_envelope,
                                  residence_measure, summarize)
from turnpike.cli.registry import lookup
from turnpike.errors import DegenerateProfile, InsufficientHorizons
from turnpike.model import OCP1, OCP2, solve_sop
from turnpike.shooting import solve_bvp, solve_horizon_sweep, spec_for


class StubSolution:
    """Minimal stand-in for a BVP solution with a prescribed trajectory."""

    def __init__(self, T, n, traj, ctrl):
        self.T, self.n = T, n
        self._traj, self._ctrl = traj, ctrl

    def trajectory(self, t):
        return self._traj(np.asarray(t, dtype=float))

    def control(self, t):
        return self._ctrl(np.asarray(t, dtype=float))


class StubOpt:
    def __init__(self, x_bar, u_bar):
        self.x_bar = np.asarray(x_bar, dtype=float)
        self.u_bar = np.asarray(u_bar, dtype=float)


def model_profile(K, mu, T, grid=2001):
    t = np.linspace(0.0, T, grid)
    return Profile(t, K * (np.exp(-mu * t) + np.exp(-mu * (T - t))))


# ---------------------------------------------------------------- distance profile

def test_distance_profile_zero_trajectory():
    problem = lookup("lqr").problem(OCP2, x0=[0.0, 0.0], xf=[0.0, 0.0])
    opt = solve_sop(problem, [[0.0, 0.0]])[0]
    sol = solve_bvp(spec_for(problem, 4.0, steady=opt))
    prof = distance_profile(sol, opt, 101)
    assert np.abs(prof.d).max() <= 1e-12
    assert prof.T == 4.0


def test_distance_profile_synthetic_decay():
    xbar = np.array([1.0, -2.0])
    v = np.array([3.0, 4.0])
    sol = StubSolution(5.0, 2, lambda t: np.column_stack([xbar + np.exp(-t)[:, None] * v,
                                                          np.zeros((len(t), 2))]),
                       lambda t: np.zeros((len(t), 1)))
    prof = distance_profile(sol, StubOpt(xbar, [0.0]), 51)
    assert prof.d == pytest.approx(5.0 * np.exp(-prof.t), rel=1e-14)


def test_distance_profile_includes_control():
    sol = StubSolution(1.0, 1, lambda t: np.zeros((len(t), 2)),
                       lambda t: np.full((len(t), 1), 2.0))
    prof = distance_profile(sol, StubOpt([0.0], [0.5]), 11)
    assert prof.d == pytest.approx(np.full(11, 1.5))
    assert control_profile(sol, StubOpt([0.0], [0.5]), 11).d == pytest.approx(np.full(11, 1.5))


def test_byrnes_profile_shape(byrnes_ocp1, byrnes_sweep):
    _, opt = byrnes_ocp1
    sol = [s for s in byrnes_sweep if s.T == 15.0][0]
    prof = distance_profile(sol, opt)
    mid = (prof.t > 0.3 * 15) & (prof.t < 0.7 * 15)
    assert prof.d[mid].min() < 0.05
    assert prof.d[0] > 0.05
    # the terminal layer lives in p1 alone (p1(T) = 0, p1_bar = -1), which d does not see
    assert prof.d[-1] < 0.05
    p1 = sol.trajectory(np.array([0.5 * 15, 15.0]))[:, 2]
    assert p1[0] == pytest.approx(opt.p_bar[0], abs=0.05) and abs(p1[1]) < 1e-8


# ---------------------------------------------------------------- residence

def test_residence_zero_profile():
    prof = Profile(np.linspace(0, 10, 101), np.zeros(101))
    assert residence_measure(prof, [1e-3, 0.5]) == {1e-3: 0.0, 0.5: 0.0}


def test_residence_closed_form():
    T = 20.0
    eps = np.exp(-2.0)
    prof = model_profile(1.0, 1.0, T, grid=4001)
    f = lambda t: np.exp(-t) + np.exp(-(T - t)) - eps
    t1 = brentq(f, 0.0, T / 2)
    want = 2 * t1
    got = residence_measure(prof, [eps])[eps]
    assert got == pytest.approx(want, abs=1e-4)
    assert got == pytest.approx(4.0, abs=1e-3)


def test_residence_above_max_is_zero():
    prof = model_profile(1.0, 1.0, 10.0)
    assert residence_measure(prof, [10.0])[10.0] == 0.0


def test_residence_accepts_pairs():
    prof = model_profile(1.0, 1.0, 10.0, grid=101)
    pairs = list(prof)
    assert residence_measure(pairs, [0.1]) == residence_measure(prof, [0.1])


@given(K=st.floats(0.1, 10), mu=st.floats(0.2, 3), T=st.floats(2, 30),
       eps=st.lists(st.floats(1e-4, 5), min_size=2, max_size=6))
@settings(max_examples=50, deadline=None)
def test_residence_non_increasing(K, mu, T, eps):
    prof = model_profile(K, mu, T, grid=501)
    eps = sorted(eps)
    res = residence_measure(prof, eps)
    vals = [res[e] for e in eps]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("grid", [201, 1001])
def test_residence_grid_refinement(grid):
    T = 15.0
    t = np.linspace(0.0, T, grid)
    t2 = np.linspace(0.0, T, 2 * grid - 1)
    d = lambda s: np.exp(-0.7 * s) * (1 + 0.3 * np.sin(3 * s)) + np.exp(-1.3 * (T - s))
    for eps in (0.5, 0.1, 0.02):
        a = residence_measure(Profile(t, d(t)), [eps])[eps]
        b = residence_measure(Profile(t2, d(t2)), [eps])[eps]
        assert abs(a - b) <= 2 * T / grid


# ---------------------------------------------------------------- envelope fit

@pytest.mark.parametrize("K", [0.5, 2.0, 10.0])
@pytest.mark.parametrize("mu", [0.2, 1.0, 3.0])
def test_fit_recovers_model(K, mu):
    Kf, muf, res = fit_envelope(model_profile(K, mu, 10.0))
    assert Kf == pytest.approx(K, rel=0.01)
    assert muf == pytest.approx(mu, rel=0.01)
    assert res <= 1e-9


def test_fit_example_k2_mu1_5():
    Kf, muf, _ = fit_envelope(model_profile(2.0, 1.5, 10.0))
    assert Kf == pytest.approx(2.0, rel=0.01) and muf == pytest.approx(1.5, rel=0.01)


@pytest.mark.parametrize("a,b", [(10.0, 0.1), (1.0, 1e-8), (0.05, 3.0)])
def test_fit_unequal_layers(a, b):
    """Different amplitudes at the two ends do not bias the rate."""
    T, mu = 15.0, 0.8
    t = np.linspace(0.0, T, 2001)
    d = a * np.exp(-mu * t) + b * np.exp(-mu * (T - t))
    K, muf, res = fit_envelope(Profile(t, d))
    assert muf == pytest.approx(mu, rel=1e-6)
    # d / e_mu is a weighted mean of a and b, largest at the end of the bigger layer
    e = np.exp(-mu * T)
    assert K == pytest.approx((max(a, b) + min(a, b) * e) / (1 + e), rel=1e-6)
    assert envelope_valid(Profile(t, d), K, muf) and res <= 1e-9


def test_fit_oscillating_profile_rate_is_stable_in_T():
    """A damped oscillation (complex closed-loop pair) stays within the spread gate."""
    mu, w = 0.866, 0.5
    rates = []
    for T in (10.0, 15.0, 20.0):
        t = np.linspace(0.0, T, 2001)
        d = 3.0 * np.exp(-mu * t) * (1.2 + np.cos(w * t)) + 0.4 * np.exp(-mu * (T - t))
        rates.append(fit_envelope(Profile(t, d))[1])
    # the amplitude swings by a factor 11 over a period comparable to T (spread 0.197)
    assert (max(rates) - min(rates)) / max(rates) <= MU_SPREAD
    assert all(abs(r - mu) / mu <= 0.35 for r in rates)


def test_fit_constant_profile_has_no_decay():
    prof = Profile(np.linspace(0, 10, 501), np.full(501, 0.3))
    K, mu, _ = fit_envelope(prof)
    assert mu <= MU_FLOOR
    assert envelope_valid(prof, K, mu)


def test_fit_zero_profile_degenerate():
    with pytest.raises(DegenerateProfile):
        fit_envelope(Profile(np.linspace(0, 1, 11), np.zeros(11)))


@given(c=st.floats(1e-3, 1e3), K=st.floats(0.5, 5), mu=st.floats(0.3, 2.5))
@settings(max_examples=25, deadline=None)
def test_fit_scale_equivariance(c, K, mu):
    T = 12.0
    t = np.linspace(0.0, T, 801)
    d = K * np.exp(-mu * t) * (1 + 0.2 * np.cos(t)) + 0.5 * K * np.exp(-1.7 * mu * (T - t))
    K1, mu1, _ = fit_envelope(Profile(t, d))
    K2, mu2, _ = fit_envelope(Profile(t, c * d))
    assert mu2 == pytest.approx(mu1, rel=1e-6)
    assert K2 == pytest.approx(c * K1, rel=1e-6)


@given(K=st.floats(0.5, 5), mu=st.floats(0.3, 2.5), noise=st.floats(0, 0.5))
@settings(max_examples=25, deadline=None)
def test_fit_is_always_valid(K, mu, noise):
    T = 10.0
    t = np.linspace(0.0, T, 601)
    d = K * (np.exp(-mu * t) + np.exp(-mu * (T - t))) * (1 + noise * np.sin(5 * t) ** 2)
    prof = Profile(t, d)
    Kf, muf, _ = fit_envelope(prof)
    assert envelope_valid(prof, Kf, muf)


def test_fit_ignores_tiny_values_but_checks_them():
    t = np.linspace(0.0, 10.0, 201)
    d = np.exp(-t) + np.exp(-(10 - t))
    d[100] = 1e-15
    Kf, muf, _ = fit_envelope(Profile(t, d))
    assert muf == pytest.approx(1.0, rel=0.01)
    assert envelope_valid(Profile(t, d), Kf, muf)


# ---------------------------------------------------------------- certify

def check_certificate_invariants(cert, opt, sols, grid=2001):
    if cert.certified:
        assert cert.mu > 0
        for s in sols:
            prof = distance_profile(s, opt, grid)
            env = cert.K * (np.exp(-cert.mu * prof.t) + np.exp(-cert.mu * (s.T - prof.t)))
            assert np.all(prof.d <= env + 1e-9)
    eps = sorted(cert.residence)
    vals = [cert.residence[e] for e in eps]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_certify_byrnes(byrnes_ocp1, byrnes_sweep):
    problem, opt = byrnes_ocp1
    cert = certify(problem, opt, byrnes_sweep)
    assert cert.verdict == CERTIFIED, cert.reasons
    assert cert.horizons_used == [5.0, 10.0, 15.0, 20.0]
    mus = [mu for _, _, mu in cert.per_horizon_constants]
    assert (max(mus) - min(mus)) / max(mus) <= 0.25
    check_certificate_invariants(cert, opt, byrnes_sweep)
    # residence measure is T-independent at the top of the sweep
    r = [residence_measure(distance_profile(s, opt), [0.05])[0.05] for s in byrnes_sweep[-2:]]
    assert abs(r[0] - r[1]) <= 0.1 * max(r)
    d = cert.to_dict()
    assert set(d) >= {"K", "mu", "fit_residual", "per_horizon", "residence", "verdict"}


def test_certify_linear():
    problem = lookup("lqr").problem(OCP1, x0=[3.0, -1.0], z=[2.0, 0.0])
    opt = solve_sop(problem, [[0.0, 0.0]])[0]
    sols = solve_horizon_sweep(problem, opt, (6.0, 9.0, 12.0))
    cert = certify(problem, opt, sols)
    assert cert.certified, cert.reasons
    check_certificate_invariants(cert, opt, sols)


def test_certify_needs_three_horizons(byrnes_ocp1, byrnes_sweep):
    problem, opt = byrnes_ocp1
    with pytest.raises(InsufficientHorizons):
        certify(problem, opt, byrnes_sweep[:2])


def test_certify_trivial_trajectory():
    problem = lookup("lqr").problem(OCP2, x0=[0.0, 0.0], xf=[0.0, 0.0])
    opt = solve_sop(problem, [[0.0, 0.0]])[0]
    sols = [solve_bvp(spec_for(problem, T, steady=opt)) for T in (2.0, 3.0, 4.0)]
    cert = certify(problem, opt, sols)
    assert cert.certified
    assert cert.K == 0.0


def test_summarize_single_horizon(byrnes_ocp1, byrnes_sweep):
    _, opt = byrnes_ocp1
    cert = summarize(opt, byrnes_sweep[-1:], "only one horizon")
    assert cert.verdict == INCONCLUSIVE
    assert cert.reasons == ["only one horizon"]
    assert len(cert.per_horizon_constants) == 1
    assert cert.mu > 0


def test_bump_case_is_control_turnpike(cubic):
    """Two equilibria: no single state turnpike, but bounded control residence."""
    _, problem = cubic
    problem = problem.replace(x0=np.array([-0.1]), xf=np.array([1.4]))
    opts = solve_sop(problem, [[0.0], [1.0]])
    origin = [o for o in opts if abs(o.x_bar[0]) < 1e-9][0]
    sols = solve_horizon_sweep(problem, origin, (20.0, 25.0, 30.0))
    cert = certify(problem, origin, sols)
    assert cert.verdict == INCONCLUSIVE
    ctrl = [c["measure"] for c in cert.control_residence]
    assert (max(ctrl) - min(ctrl)) / max(ctrl) <= 0.05
