import numpy as np
import pytest

from turnpike.certificate import distance_profile, fit_envelope
from turnpike.cli.registry import lookup
from turnpike.model import OCP1, OCP2, OcpProblem, linear_system, solve_sop
from turnpike.odeflow import integrate
from turnpike.shooting import (BvpSpec, ContinuationPlan, CostateZero, StateTarget,
                               equilibrated_cond, shooting_jacobian, shooting_residual, solve_bvp,
                               solve_horizon, solve_horizon_sweep, solve_with_continuation,
                               spec_for, verify_p_condition, verify_residual)


def longest_run(mask, dt):
    best = cur = 0
    for v in mask:
        cur = cur + 1 if v else 0
        best = max(best, cur)
    return best * dt


def check_solution_invariants(sol, rtol=1e-10, atol=1e-12):
    spec = sol.spec
    scale = spec.data_scale
    assert sol.residual <= 1e-8 * scale
    assert verify_residual(sol, rtol=rtol / 10, atol=atol / 10) <= 1e-8 * scale
    t = np.linspace(0.0, sol.T, 401)
    H = sol.hamiltonian(t)
    assert np.abs(H - H[0]).max() <= 1e3 * (rtol + atol) * (1 + abs(H[0])) * 10
    y = sol.trajectory(t)
    u = sol.control(t)
    g = spec.field.problem.system.g
    n = sol.n
    for row, uk in zip(y[::40], u[::40]):
        assert np.allclose(uk, -g(row[:n]).T @ row[n:], rtol=0, atol=1e-14)
    assert sol.trajectory(0.0)[:n] == pytest.approx(spec.x0, abs=1e-14)


@pytest.fixture(scope="module")
def byrnes_T15(byrnes_ocp1):
    problem, opt = byrnes_ocp1
    return solve_horizon(problem, opt, 15.0)


# ---------------------------------------------------------------- specs

def test_spec_validation(byrnes_ocp1):
    problem, _ = byrnes_ocp1
    spec = spec_for(problem, 5.0)
    assert isinstance(spec.terminal, CostateZero)
    with pytest.raises(ValueError):
        BvpSpec(spec.field, 0.0, problem.x0, CostateZero())
    with pytest.raises(ValueError):
        BvpSpec(spec.field, 5.0, problem.x0, StateTarget([0.0, 0.0]))
    with pytest.raises(ValueError):
        spec_for(problem, 5.0, free=(0,))


def test_state_target_free_indices():
    st = StateTarget([1.0, 2.0, 3.0], free=(2, 0, 2))
    assert st.free == (0, 2)
    assert st.fixed.tolist() == [False, True, False]
    with pytest.raises(ValueError):
        StateTarget([1.0], free=(1,))


def test_ramp_plans():
    plan = ContinuationPlan.ramp("x0", [1.0, 1.0], [8.0, 8.0], 4, geometric=True)
    vals = [s["x0"] for s in plan.steps]
    assert np.allclose([v[0] for v in vals], [1.0, 2.0, 4.0, 8.0])
    lin = ContinuationPlan.ramp("T", 2.0, 10.0, 5)
    assert [s["T"] for s in lin.steps] == pytest.approx([2, 4, 6, 8, 10])
    with pytest.raises(ValueError):
        ContinuationPlan.ramp("x0", [1.0, -1.0], [8.0, 8.0], 3, geometric=True)
    with pytest.raises(ValueError):
        ContinuationPlan(({"C": 1.0},))
    assert len((lin + plan).steps) == 9


def test_equilibrated_cond_ignores_diagonal_scaling():
    rng = np.random.default_rng(0)
    J = rng.normal(size=(6, 6))
    D1 = np.diag(10.0 ** rng.uniform(-6, 6, 6))
    D2 = np.diag(10.0 ** rng.uniform(-6, 6, 6))
    base = equilibrated_cond(J)
    assert np.linalg.cond(D1 @ J @ D2) > 1e6 * np.linalg.cond(J)
    assert equilibrated_cond(D1 @ J @ D2) == pytest.approx(base, rel=1.0)


# ---------------------------------------------------------------- solve_bvp

def test_zero_problem_stays_zero():
    problem = lookup("byrnes").problem(OCP2, x0=[0.0, 0.0], xf=[0.0, 0.0])
    opt = solve_sop(problem, [[0.0, 0.0]])[0]
    for T in (1.0, 7.0):
        sol = solve_bvp(spec_for(problem, T, steady=opt))
        assert np.abs(sol.p0).max() <= 1e-12
        assert np.abs(sol.trajectory(np.linspace(0, T, 50))).max() <= 1e-12


def test_scalar_cubic_prolonged_control(cubic):
    entry, problem = cubic
    problem = problem.replace(x0=np.array([1.5]), xf=np.array([-1.0]))
    opt = solve_sop(problem, [[0.0]])[0]
    sol = solve_horizon(problem, opt, 20.0)
    check_solution_invariants(sol)
    t = np.linspace(0.2 * 20, 0.8 * 20, 1201)
    assert np.abs(sol.control(t)).max() < 0.05
    assert sol.trajectory(20.0)[0] == pytest.approx(-1.0, abs=1e-8)


def test_byrnes_fig2_run(byrnes_ocp1, byrnes_T15):
    problem, opt = byrnes_ocp1
    sol = byrnes_T15
    check_solution_invariants(sol)
    assert np.abs(sol.trajectory(15.0)[2:]).max() <= 1e-8 * sol.spec.data_scale
    t = np.linspace(0, 15, 15001)
    y = sol.trajectory(t)
    dx = np.linalg.norm(y[:, :2] - opt.x_bar, axis=1)
    assert longest_run(dx < 0.05, t[1]) >= 0.7 * 15


@pytest.mark.xfail(strict=True, reason=(
    "the costate p1 has a terminal layer of rate 1 (p1(T) = 0 while p1_bar = -1), so the "
    "(x, p) distance exceeds 0.05 for t > T - ln(20); measured longest sub-interval 0.516 T"))
def test_byrnes_fig2_phase_space_residence(byrnes_ocp1, byrnes_T15):
    _, opt = byrnes_ocp1
    t = np.linspace(0, 15, 15001)
    d = np.linalg.norm(byrnes_T15.trajectory(t) - opt.state, axis=1)
    assert longest_run(d < 0.05, t[1]) >= 0.7 * 15


def test_newton_iteration_count_reported(byrnes_T15):
    assert 0 < byrnes_T15.newton_iters <= 200
    assert len(byrnes_T15.mesh) == len(byrnes_T15.nodes) + 1


# ---------------------------------------------------------------- shooting Jacobian

@pytest.mark.parametrize("name,kind,T", [("byrnes", OCP1, 2.0), ("byrnes", OCP2, 1.5),
                                          ("scalar_cubic", OCP2, 2.0), ("lqr", OCP1, 3.0)])
def test_shooting_jacobian_matches_finite_differences(name, kind, T):
    problem = lookup(name).problem(kind)
    if kind == OCP2:
        problem = problem.replace(x0=np.full(problem.n, 0.5), xf=np.full(problem.n, -0.3))
    spec = spec_for(problem, T)
    rng = np.random.default_rng(5)
    p0 = rng.uniform(-0.5, 0.5, size=problem.n)
    F, J = shooting_jacobian(spec, p0)
    assert F == pytest.approx(shooting_residual(spec, p0), abs=1e-14)
    h = 1e-6
    fd = np.column_stack([
        (shooting_residual(spec, p0 + h * e) - shooting_residual(spec, p0 - h * e)) / (2 * h)
        for e in np.eye(problem.n)])
    assert np.abs(J - fd).max() <= 1e-4 * np.abs(J).max()


# ---------------------------------------------------------------- continuation

def test_horizon_ramp_matches_direct_solve(byrnes_ocp1):
    problem, opt = byrnes_ocp1
    spec = spec_for(problem, 10.0, steady=opt)
    direct = solve_bvp(spec)
    plan = ContinuationPlan(tuple({"T": T} for T in (2.0, 4.0, 6.0, 8.0, 10.0)))
    ramped = solve_with_continuation(spec, plan)
    assert np.abs(direct.p0 - ramped.p0).max() <= 1e-6
    assert [p["T"] for p, _ in ramped.continuation_path] == [2.0, 4.0, 6.0, 8.0, 10.0]
    check_solution_invariants(ramped)


def test_empty_plan_is_plain_solve(byrnes_ocp1):
    problem, opt = byrnes_ocp1
    spec = spec_for(problem, 6.0, steady=opt)
    a = solve_bvp(spec)
    b = solve_with_continuation(spec, ContinuationPlan())
    assert np.array_equal(a.p0, b.p0)
    assert len(b.continuation_path) == 1


def test_x0_ramp_reaches_target(byrnes_ocp1):
    problem, opt = byrnes_ocp1
    problem = problem.replace(x0=np.array([1.5, 1.0]))
    spec = spec_for(problem, 8.0, steady=opt)
    plan = ContinuationPlan.ramp("x0", [1.0, 0.2], [1.5, 1.0], 4)
    sol = solve_with_continuation(spec, plan)
    assert sol.trajectory(0.0)[:2] == pytest.approx([1.5, 1.0], abs=1e-14)
    check_solution_invariants(sol)


def test_p0_converges_along_sweep(byrnes_ocp1, byrnes_sweep):
    problem, opt = byrnes_ocp1
    last = solve_with_continuation(spec_for(problem, 25.0, steady=opt), ContinuationPlan(),
                                   start=byrnes_sweep[-1])
    gaps = [np.linalg.norm(s.p0 - last.p0) for s in byrnes_sweep]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_sweep_obeys_fitted_envelope(byrnes_ocp1, byrnes_sweep):
    _, opt = byrnes_ocp1
    for sol in byrnes_sweep:
        check_solution_invariants(sol)
        prof = distance_profile(sol, opt, 801)
        K, mu, _ = fit_envelope(prof)
        env = K * (np.exp(-mu * prof.t) + np.exp(-mu * (sol.T - prof.t)))
        assert np.all(prof.d <= env * (1 + 1e-9) + 1e-12)
        assert mu > 0


def test_sweep_requires_horizons(byrnes_ocp1):
    problem, opt = byrnes_ocp1
    with pytest.raises(ValueError):
        solve_horizon_sweep(problem, opt, [])


# ---------------------------------------------------------------- p-condition

@pytest.mark.parametrize("T", [2.0, 8.0, 20.0])
def test_p_condition_linear(T):
    problem = lookup("lqr").problem(OCP1)
    opt = solve_sop(problem, [[0.0, 0.0]])[0]
    sol = solve_horizon(problem, opt, T)
    pc = verify_p_condition(sol)
    assert pc.ok
    assert len(pc.dets) == 200
    assert pc.dets[0] == pytest.approx(1.0)


def test_p_condition_zero_trajectory():
    # the byrnes origin has an uncontrollable x1 mode, so a controllable plant is used
    problem = lookup("lqr").problem(OCP2, x0=[0.0, 0.0], xf=[0.0, 0.0])
    opt = solve_sop(problem, [[0.0, 0.0]])[0]
    sol = solve_bvp(spec_for(problem, 5.0, steady=opt))
    pc = verify_p_condition(sol, samples=50)
    assert pc.ok
    assert min(pc.dets) > 0
    assert max(pc.times) < 5.0


def test_p_condition_partially_free_end():
    # x2(T) = 0 is fixed, so D(T) has a zero row and only [0, T) is sampled
    problem = lookup("lqr").problem(OCP2, x0=[1.0, 1.0], xf=[0.5, 0.0])
    opt = solve_sop(problem, [[0.0, 0.0]])[0]
    sol = solve_bvp(spec_for(problem, 6.0, steady=opt, free=(0,)))
    pc = verify_p_condition(sol, samples=60)
    assert pc.ok
    assert max(pc.times) < 6.0


def test_p_condition_linear_matches_riccati_flow():
    """For a scalar LQR problem D_x0 x(t) has a closed form."""
    a, b, c, T = 0.5, 1.0, 1.0, 4.0
    problem = OcpProblem(linear_system([[a]], [[b]]), OCP1, [[c]], [1.0], z=[0.0])
    opt = solve_sop(problem, [[0.0]])[0]
    sol = solve_horizon(problem, opt, T)
    pc = verify_p_condition(sol, samples=20)
    # x(t) is linear in x0, so D_x0 x(t) = x(t) / x0
    t = np.array(pc.times)
    assert np.array(pc.dets) == pytest.approx(sol.trajectory(t)[:, 0] / 1.0, rel=1e-7, abs=1e-12)


def test_p_condition_byrnes(byrnes_T15):
    pc = verify_p_condition(byrnes_T15)
    assert pc.ok
    assert pc.to_dict()["samples"] == 200


def test_p_condition_rejects_bad_samples(byrnes_T15):
    with pytest.raises(ValueError):
        verify_p_condition(byrnes_T15, samples=1)


def test_reintegration_is_independent(byrnes_T15):
    """The stored trajectory agrees with a fresh integration from the nodes."""
    sol = byrnes_T15
    k = len(sol.mesh) // 2
    fresh = integrate(sol.spec.field, sol.nodes[k], sol.mesh[k], sol.mesh[k + 1], 1e-12, 1e-14)
    t = np.linspace(sol.mesh[k], sol.mesh[k + 1], 7)
    assert np.abs(fresh(t) - sol.trajectory(t)).max() <= 1e-8
