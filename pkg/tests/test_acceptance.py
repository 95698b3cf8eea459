"""End-to-end acceptance criteria.

Every criterion is one or more tests tagged ``@pytest.mark.criterion(N)``;
the end-of-run summary prints one PASS/FAIL line per criterion together
with the measured values.  Runtime budgets are asserted on wall-clock time
of the computation under test.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import random_triple
from turnpike import linham
from turnpike.certificate import CERTIFIED, _profile, certify, distance_profile, fit_envelope
from turnpike.cli.config import default_seeds
from turnpike.cli.registry import lookup
from turnpike.manifolds import UNSTABLE, grow_manifold_2d, trace_closed_orbit, verify_affine_unstable
from turnpike.model import OCP1, OCP2, build_hamiltonian_field, solve_sop
from turnpike.shooting import (ContinuationPlan, solve_horizon, solve_horizon_sweep,
                               verify_p_condition, verify_residual)

pytestmark = pytest.mark.acceptance


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        return False


def measure_where(t, mask):
    """Lebesgue measure of ``{t : mask}`` for samples on a uniform grid."""
    return float(mask.sum()) * (t[1] - t[0])


def longest_run(t, mask):
    best = cur = 0
    for v in mask:
        cur = cur + 1 if v else 0
        best = max(best, cur)
    return best * (t[1] - t[0])


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1)
def test_linear_hamiltonian_suite(record_property):
    rng = np.random.default_rng(2024)
    worst = dict(riccati=0.0, hurwitz=-np.inf, symplectic=0.0, pl_sv=np.inf, det=np.inf)
    with Clock() as clk:
        for _ in range(50):
            n = int(rng.integers(1, 7))
            A, B, C = random_triple(rng, n)
            R, Q = B @ B.T, C.T @ C
            sol = linham.solve_care(A, R, Q)
            P = sol.P
            res = np.abs(linham.riccati_residual(P, A, R, Q)).max() / (1 + np.linalg.norm(P) ** 2)
            worst["riccati"] = max(worst["riccati"], res)
            worst["hurwitz"] = max(worst["hurwitz"], np.linalg.eigvals(sol.A_c).real.max())
            J = linham.symplectic_form(n)
            T = sol.T_sympl
            worst["symplectic"] = max(worst["symplectic"], np.abs(T.T @ J @ T - J).max())
            sv = np.linalg.svd(P @ sol.L + np.eye(n), compute_uv=False).min()
            worst["pl_sv"] = min(worst["pl_sv"], sv)
            dets = linham.phi11_dets(sol, [0.1, 1.0, 5.0, 10.0])
            assert all(np.isfinite(d) for d in dets)
            worst["det"] = min(worst["det"], min(abs(d) for d in dets))
    for k, v in worst.items():
        record_property(k, f"{v:.3g}")
    record_property("seconds", f"{clk.elapsed:.2f}")
    assert worst["riccati"] <= 1e-9
    assert worst["hurwitz"] < 0
    assert worst["symplectic"] <= 1e-9
    assert worst["pl_sv"] > 1e-10
    assert worst["det"] > 0
    assert clk.elapsed < 10


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2)
def test_steady_optima_exact(record_property):
    with Clock() as clk:
        byrnes = lookup("byrnes").problem(OCP1, z=[1.0, -2.0])
        opts = solve_sop(byrnes, default_seeds(byrnes))
        cubic = lookup("scalar_cubic").problem(OCP2)
        cubic_opts = solve_sop(cubic, default_seeds(cubic))
    err = min(np.abs(o.state - [0.0, -2.0, -1.0, 0.0]).max() for o in opts)
    got = sorted(tuple(o.state) for o in cubic_opts)
    want = [(0.0, 0.0), (0.5, -0.25), (1.0, 0.0)]
    record_property("byrnes_error", f"{err:.2e}")
    record_property("cubic_equilibria", [tuple(round(float(v), 12) for v in g) for g in got])
    record_property("seconds", f"{clk.elapsed:.2f}")
    assert err <= 1e-8
    assert len(got) == 3
    assert np.abs(np.array(got) - np.array(want)).max() <= 1e-10
    assert clk.elapsed < 5


# ---------------------------------------------------------------- 3

def byrnes_field_by_hand(y, z=(1.0, -2.0)):
    """State/costate equations of the tracking problem with u = -p2, written out."""
    x1, x2, p1, p2 = y
    return np.array([
        -x1 + x1 ** 2 * x2,
        -p2,
        -(p1 * (-1.0 + 2.0 * x1 * x2) + (x1 - z[0])),
        -(p1 * x1 ** 2 + (x2 - z[1])),
    ])


@pytest.mark.criterion(3)
def test_hamiltonian_field_matches_hand_coded(record_property):
    field = build_hamiltonian_field(lookup("byrnes").problem(OCP1, z=[1.0, -2.0]))
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        v = rng.standard_normal(4)
        y = 2.0 * rng.uniform() ** 0.25 * v / np.linalg.norm(v)
        worst = max(worst, np.abs(field(y) - byrnes_field_by_hand(y)).max())
    record_property("max_error", f"{worst:.2e}")
    assert worst <= 1e-9


# ---------------------------------------------------------------- 4

@pytest.mark.criterion(4)
def test_byrnes_horizon_sweep(record_property):
    with Clock() as clk:
        problem = lookup("byrnes").problem(OCP1, x0=[1.0, 0.2], z=[1.0, -2.0],
                                           horizons=(5, 10, 15, 20))
        opts = solve_sop(problem, default_seeds(problem))
        opt = [o for o in opts if o.hyperbolic][0]
        sols = solve_horizon_sweep(problem, opt)
        residuals = [verify_residual(s) for s in sols]
        cert = certify(problem, opt, sols)
    mus = [mu for _, _, mu in cert.per_horizon_constants]
    spread = (max(mus) - min(mus)) / max(mus)
    res = {}
    for s in sols:
        if s.T in (15.0, 20.0):
            prof = distance_profile(s, opt, 20001)
            res[s.T] = measure_where(prof.t, prof.d > 0.05)
    res_diff = abs(res[15.0] - res[20.0]) / max(res.values())
    record_property("residual", f"{max(residuals):.2e}")
    record_property("verdict", cert.verdict)
    record_property("mu_T", [round(float(m), 4) for m in mus])
    record_property("residence_0.05", {k: round(float(v), 3) for k, v in res.items()})
    record_property("seconds", f"{clk.elapsed:.1f}")
    assert max(residuals) <= 1e-8
    assert cert.verdict == CERTIFIED
    assert spread <= 0.25
    assert res_diff <= 0.10
    assert clk.elapsed < 60


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5)
def test_scalar_control_residence(record_property):
    base = lookup("scalar_cubic").problem(OCP2)
    measures = {}
    with Clock() as clk:
        for x0, xf in ((1.5, -1.0), (-0.1, 1.4)):
            problem = base.replace(x0=np.array([x0]), xf=np.array([xf]))
            origin = [o for o in solve_sop(problem, [[0.0], [1.0]]) if abs(o.x_bar[0]) < 1e-9][0]
            sols = solve_horizon_sweep(problem, origin, (20.0, 30.0))
            for s in sols:
                assert verify_residual(s) <= 1e-8 * s.spec.data_scale
                t = np.linspace(0.0, s.T, 200001)
                u = s.control(t).reshape(-1)
                measures[(x0, xf, s.T)] = measure_where(t, np.abs(u) > 0.05)
    diffs = {}
    for x0, xf in ((1.5, -1.0), (-0.1, 1.4)):
        a, b = measures[(x0, xf, 20.0)], measures[(x0, xf, 30.0)]
        diffs[(x0, xf)] = abs(a - b) / max(a, b)
    record_property("measures", {f"{k[0]},{k[1]},T={k[2]:g}": round(float(v), 4) for k, v in measures.items()})
    record_property("relative_difference", {f"{k[0]},{k[1]}": round(float(v), 4) for k, v in diffs.items()})
    record_property("seconds", f"{clk.elapsed:.1f}")
    assert all(v <= 0.05 for v in diffs.values())
    assert clk.elapsed < 30


# ---------------------------------------------------------------- 6

@pytest.fixture(scope="module")
def peaking_run():
    """Byrnes fixed-endpoint problem continued along a geometric x0 ramp to (12, 12).

    ``x1 = 0`` is invariant and the x1 mode is uncontrollable, so ``x1(T) = 0``
    cannot be reached; the first terminal component is released (``p1(T) = 0``)
    and ``x2(T) = 5`` is kept.
    """
    problem = lookup("byrnes").problem(OCP2, x0=[12.0, 12.0], xf=[0.0, 5.0])
    with Clock() as clk:
        opt = solve_sop(problem, [[0.0, 0.0]])[0]
        plan = ContinuationPlan.ramp("x0", [1.0, 1.0], [12.0, 12.0], 16, geometric=True)
        sol = solve_horizon(problem, opt, 10.0, plan=plan, free=(0,))
    t = np.linspace(0.0, sol.T, 100001)
    x = sol.trajectory(t)[:, :2]
    return sol, clk.elapsed, t, x


@pytest.mark.criterion(6)
def test_peaking_run(peaking_run, record_property):
    sol, elapsed, t, x = peaking_run
    early = t <= 0.1
    peak = float(np.linalg.norm(x[early], axis=1).max())
    residual = verify_residual(sol)
    reached = sol.continuation_path[-1][0]["x0"]
    record_property("x0_reached", np.round(reached, 6).tolist())
    record_property("residual", f"{residual:.2e}")
    record_property("peak_on_[0,0.1]", f"{peak:.1f}")
    record_property("x1(T)", f"{x[-1, 0]:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert np.allclose(reached, [12.0, 12.0])
    assert residual <= 1e-6
    assert abs(x[-1, 1] - 5.0) <= 1e-8
    # regression baseline from the recorded run: peak ~187 near t = 0.02
    assert peak > 20
    assert elapsed < 120


@pytest.mark.criterion(6)
@pytest.mark.xfail(strict=True, reason="x1 = 0 is invariant under the dynamics, so x1(T) = 0 is "
                   "unreachable from x1(0) = 12; measured x1(T) ~ 6e-5")
def test_peaking_run_reaches_stated_target(peaking_run, record_property):
    sol, _, _, x = peaking_run
    miss = float(np.abs(x[-1] - [0.0, 5.0]).max())
    record_property("terminal_miss", f"{miss:.2e}")
    assert miss <= 1e-6


@pytest.mark.criterion(6)
@pytest.mark.xfail(strict=True, reason="x2(T) = 5 with unit-rate x2 dynamics forces |x2| > 0.05 "
                   "after T - ln(100); measured near-origin time 0.19 T")
def test_peaking_run_near_origin(peaking_run, record_property):
    sol, _, t, x = peaking_run
    near = longest_run(t, np.linalg.norm(x, axis=1) <= 0.05)
    record_property("near_origin_fraction", f"{near / sol.T:.3f}")
    assert near >= 0.7 * sol.T


# ---------------------------------------------------------------- 7

@pytest.mark.criterion(7)
@pytest.mark.parametrize("kind,seed", [(OCP1, [0.0, -2.0]), (OCP2, [0.0, 0.0])])
def test_affine_unstable_manifold(kind, seed, record_property):
    entry = lookup("byrnes")
    problem = entry.problem(kind)
    opt = solve_sop(problem, [seed])[0]
    chk = verify_affine_unstable(build_hamiltonian_field(problem), opt, entry.affine_structure)
    record_property("max_drift", f"{chk.max_drift:.2e}")
    assert chk.is_affine
    assert chk.max_drift <= 1e-7


# ---------------------------------------------------------------- 8

@pytest.mark.criterion(8)
def test_phase_portrait(record_property):
    field = build_hamiltonian_field(lookup("scalar_cubic").problem(OCP2))
    window = ((-1.0, 2.0), (-1.5, 1.5))
    branches = grow_manifold_2d(field, [0.0, 0.0], arc_budget=6.0, window=window)
    best = min(np.linalg.norm(b.points - [1.0, 0.0], axis=1).min()
               for b in branches if b.kind == UNSTABLE)
    closures = []
    for seed in ([0.6, -0.25], [0.5, -0.15], [0.7, -0.25]):
        orbit = trace_closed_orbit(field, seed, [0.5, -0.25], hamiltonian=field.hamiltonian)
        closures.append(orbit.closure)
    record_property("distance_to_(1,0)", f"{best:.2e}")
    record_property("orbit_closure", [f"{c:.1e}" for c in closures])
    assert best <= 1e-3
    assert max(closures) <= 1e-4


# ---------------------------------------------------------------- 9

@pytest.mark.criterion(9)
def test_linear_global_case(record_property):
    entry = lookup("lqr")
    rng = np.random.default_rng(9)
    verdicts, pconds = [], []
    for _ in range(20):
        x0, z = (v * rng.uniform(0, 10) / np.linalg.norm(v) for v in rng.standard_normal((2, 2)))
        problem = entry.problem(OCP1, x0=x0, z=z)
        opt = solve_sop(problem, default_seeds(problem))[0]
        sols = solve_horizon_sweep(problem, opt)
        verdicts.append(certify(problem, opt, sols).verdict)
        pconds += [verify_p_condition(s).ok for s in sols]
    record_property("certified", f"{verdicts.count(CERTIFIED)}/20")
    record_property("p_condition_ok", f"{sum(pconds)}/{len(pconds)}")
    assert verdicts == [CERTIFIED] * 20
    assert all(pconds)


# ---------------------------------------------------------------- 10

@pytest.mark.criterion(10)
def test_envelope_fit_oracle(record_property):
    T = 20.0
    t = np.linspace(0.0, T, 2001)
    worst = 0.0
    for K in (0.5, 2.0, 10.0):
        for mu in (0.2, 1.0, 3.0):
            d = K * (np.exp(-mu * t) + np.exp(-mu * (T - t)))
            K_fit, mu_fit, _ = fit_envelope(_profile(t, d))
            worst = max(worst, abs(K_fit - K) / K, abs(mu_fit - mu) / mu)
    record_property("max_relative_error", f"{worst:.2e}")
    assert worst <= 0.01


# ---------------------------------------------------------------- 11

@pytest.mark.criterion(11)
def test_run_is_byte_identical(tmp_path, record_property):
    cfg = tmp_path / "byrnes.json"
    cfg.write_text(json.dumps({"version": 1, "system": "byrnes", "kind": OCP1, "x0": [1.0, 0.2],
                               "z": [1.0, -2.0], "horizons": [5, 10, 15, 20]}))
    dirs = []
    for name in ("first", "second"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "turnpike", "run", str(cfg), "--out-dir", str(out)],
                              capture_output=True, text=True, timeout=300)
        assert proc.returncode == 0, proc.stderr
        dirs.append(out)
    names = sorted(os.listdir(dirs[0]))
    same = [(dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes() for n in names]
    record_property("files_compared", len(names))
    assert names == sorted(os.listdir(dirs[1]))
    assert all(same)
