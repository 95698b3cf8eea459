"""``turnpike`` command-line tool.

Verbs::

    turnpike run <config>        solve the horizon sweep, certify, write artifacts
    turnpike sop <config>        steady optima and their hypothesis reports
    turnpike portrait <config>   manifold branches and closed orbits (n = 1)
    turnpike riccati --A .. --B .. --C ..   stabilizing Riccati data
    turnpike validate <config>   schema and model checks only

Exit codes: 0 success (``run``: Certified), 2 ``run`` finished Inconclusive,
1 error.  The output directory is ``--out-dir``, else ``$TURNPIKE_OUT``, else
the config's ``output_dir``, else ``./turnpike_out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import linham, manifolds
from ..certificate import (
    CERTIFIED, certify, distance_profile, summarize,
)
from ..errors import ConfigError, TurnpikeError
from ..model import build_hamiltonian_field, check_hypotheses, solve_sop
from ..shooting import solve_horizon_sweep, verify_p_condition
from . import artifacts as art
from .config import ProblemConfig, load_config, resolve_output_dir

log = logging.getLogger("turnpike")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INCONCLUSIVE = 2


class StageError(Exception):
    """An upstream failure tagged with the pipeline stage that raised it."""

    def __init__(self, stage, exc):
        self.stage = stage
        self.exc = exc
        module = getattr(exc, "stage", type(exc).__module__)
        super().__init__(f"stage '{stage}' failed [{module}.{type(exc).__name__}]: {exc}")


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, et, exc, tb):
        if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
            raise StageError(self.name, exc) from exc
        return False


def _apply_overrides(cfg: ProblemConfig, args) -> ProblemConfig:
    changes = {k: getattr(args, k) for k in ("rtol", "atol", "grid")
               if getattr(args, k, None) is not None}
    if "grid" in changes and changes["grid"] < 2:
        raise ConfigError("--grid must be at least 2")
    return dataclasses.replace(cfg, **changes) if changes else cfg


def select_optimum(cfg: ProblemConfig, opts):
    """The configured equilibrium, else the cheapest hyperbolic one."""
    if not opts:
        raise ConfigError("no steady optimum found from the configured seeds")
    if cfg.select is not None:
        if cfg.select >= len(opts):
            raise ConfigError(f"sop.select = {cfg.select} but only {len(opts)} optima were found")
        return opts[cfg.select]
    hyper = [o for o in opts if o.hyperbolic]
    return hyper[0] if hyper else opts[0]


# --------------------------------------------------------------------------
# run

@dataclasses.dataclass
class RunResult:
    exit_code: int
    verdict: str
    out_dir: str
    files: list
    certificate: dict
    solutions: list


def run_pipeline(cfg: ProblemConfig, out_dir, jobs=None) -> RunResult:
    """solve_sop -> check_hypotheses -> sweep -> p-condition -> certify -> artifacts."""
    problem = cfg.problem
    jobs = jobs or os.cpu_count() or 1
    with _Stage("sop"):
        opts = solve_sop(problem, cfg.sop_seeds)
        opt = select_optimum(cfg, opts)
    with _Stage("hypotheses"):
        report = check_hypotheses(opt, problem)
    with _Stage("solve"):
        sols = solve_horizon_sweep(problem, opt, rtol=cfg.rtol, atol=cfg.atol, plan=cfg.plan,
                                   free=cfg.terminal_free)
    with _Stage("p_condition"):
        with ThreadPoolExecutor(max_workers=max(1, min(jobs, len(sols)))) as pool:
            pconds = list(pool.map(verify_p_condition, sols))
    with _Stage("certify"):
        if len(sols) >= 3:
            cert = certify(problem, opt, sols, grid=cfg.grid, epsilons=cfg.epsilons)
        else:
            cert = summarize(opt, sols, f"certification needs at least 3 horizons, "
                             f"got {len(sols)}", grid=cfg.grid, epsilons=cfg.epsilons)
        reasons = list(cert.reasons)
        if not report.passed:
            reasons.append("structural hypotheses not all satisfied at the steady optimum")
        for s, pc in zip(sols, pconds):
            if not pc.ok:
                reasons.append(f"field-of-extremals condition fails at T={s.T:g}")
        verdict = CERTIFIED if cert.verdict == CERTIFIED and not reasons else "Inconclusive"
        payload = cert.to_dict()
        payload.update(
            verdict=verdict,
            reasons=reasons,
            hypothesis_report=report.to_dict(),
            p_condition=[{"T": s.T, **pc.to_dict()} for s, pc in zip(sols, pconds)],
            steady_optimum=opt.to_dict(),
            solves=[{"T": s.T, "residual": s.residual, "newton_iterations": s.newton_iters,
                     "segments": len(s.mesh) - 1,
                     "continuation_steps": len(s.continuation_path)} for s in sols],
            problem={"system": problem.system.name, "kind": problem.kind,
                     "x0": problem.x0, "z": problem.z, "xf": problem.xf,
                     "terminal_free": [i + 1 for i in cfg.terminal_free]},
        )
    with _Stage("artifacts"):
        files = write_run_artifacts(cfg, out_dir, opt, sols, payload)
    code = EXIT_OK if verdict == CERTIFIED else EXIT_INCONCLUSIVE
    return RunResult(code, verdict, out_dir, files, payload, sols)


def write_run_artifacts(cfg, out_dir, opt, sols, payload):
    art.ensure_dir(out_dir)
    files = []
    series = []
    phase = []
    for s in sols:
        tag = art.horizon_tag(s.T)
        header, rows = art.trajectory_table(s, opt, cfg.grid)
        files.append(art.write_csv(os.path.join(out_dir, f"trajectory_{tag}.csv"), header, rows))
        m = s.spec.field.problem.m
        n = s.n
        u_cols = rows[:, 1 + 2 * n: 1 + 2 * n + m]
        files.append(art.write_csv(os.path.join(out_dir, f"control_{tag}.csv"),
                                   ["t"] + [f"u{k + 1}" for k in range(m)],
                                   np.column_stack([rows[:, 0], u_cols])))
        series.append((f"T = {s.T:g}", rows[:, 0], rows[:, -2]))
        if n == 1:
            phase.append((f"T = {s.T:g}", rows[:, 1], rows[:, 2]))
    files.append(art.write_json(os.path.join(out_dir, "certificate.json"), payload))
    if cfg.svg:
        files.append(art.write_text(
            os.path.join(out_dir, "distance.svg"),
            art.line_chart(series, "distance to the steady optimum", "t", "d(t)", log_y=True)))
        if phase:
            files.append(art.write_text(
                os.path.join(out_dir, "phase.svg"),
                art.line_chart(phase, "optimal trajectories", "x", "p",
                               points=[("steady", opt.x_bar[0], opt.p_bar[0])])))
    return files


# --------------------------------------------------------------------------
# sop / portrait / riccati / validate

def sop_report(cfg: ProblemConfig):
    failures = []
    with _Stage("sop"):
        opts = solve_sop(cfg.problem, cfg.sop_seeds, failures=failures)
    with _Stage("hypotheses"):
        items = []
        for o in opts:
            d = o.to_dict()
            d["eigenvalues"] = [[float(e.real), float(e.imag)] for e in
                                sorted(o.eigenvalues, key=lambda e: (round(e.real, 12), e.imag))]
            d["hypotheses"] = check_hypotheses(o, cfg.problem).to_dict()
            items.append(d)
    return {"system": cfg.problem.system.name, "kind": cfg.problem.kind,
            "seeds": len(cfg.sop_seeds), "failed_seeds": len(failures), "optima": items}


def portrait(cfg: ProblemConfig, out_dir):
    problem = cfg.problem
    if problem.n != 1:
        raise ConfigError(f"phase portraits need a scalar system (n = 1), got n = {problem.n}")
    settings = cfg.raw.get("portrait", {})
    field = build_hamiltonian_field(problem)
    with _Stage("sop"):
        opts = solve_sop(problem, cfg.sop_seeds)
    if not opts:
        raise ConfigError("no equilibria found from the configured seeds")
    pts = np.array([o.state for o in opts])
    if "window" in settings:
        w = settings["window"]
        window = ((w[0], w[1]), (w[2], w[3]))
    else:
        lo, hi = pts.min(axis=0) - 1.5, pts.max(axis=0) + 1.5
        window = ((lo[0], hi[0]), (lo[1], hi[1]))
    arc = settings.get("arc_budget", 10.0)
    branches, orbits, files = [], [], []
    art.ensure_dir(out_dir)
    with _Stage("manifolds"):
        for i, o in enumerate(opts):
            if not o.hyperbolic:
                continue
            for b in manifolds.grow_manifold_2d(field, o.state, arc_budget=arc, window=window):
                others = [np.linalg.norm(b.points - q, axis=1).min() for q in pts]
                branches.append({"equilibrium": o.state, "kind": b.kind, "sign": b.sign,
                                 "arc_length": b.arc_length, "stop": b.stop,
                                 "min_distance_to_equilibria": others, "points": b.points})
        centers = [o.state for o in opts if not o.hyperbolic]
        seeds = settings.get("orbit_seeds")
        if seeds is None:
            size = max(window[0][1] - window[0][0], window[1][1] - window[1][0])
            seeds = [c + [0.0, f * size] for c in centers for f in (0.01, 0.02)]
        for sd in seeds:
            sd = np.asarray(sd, float)
            if not centers:
                raise ConfigError("orbit seeds given but no center equilibrium was found")
            c = min(centers, key=lambda q: np.linalg.norm(q - sd))
            orb = manifolds.trace_closed_orbit(field, sd, c, hamiltonian=field.hamiltonian)
            orbits.append({"seed": sd, "center": c, "period": orb.period, "closure": orb.closure,
                           "hamiltonian_drift": orb.hamiltonian_drift, "points": orb.points})
    with _Stage("artifacts"):
        series = []
        for k, b in enumerate(branches):
            name = f"branch_{k}_{b['kind']}.csv"
            pts_k = b.pop("points")
            files.append(art.write_csv(os.path.join(out_dir, name), ["x1", "p1"], pts_k))
            b["file"] = name
            eq = b["equilibrium"]
            series.append((f"{b['kind']} ({eq[0]:.3g}, {eq[1]:.3g})", pts_k[:, 0], pts_k[:, 1]))
        for k, o in enumerate(orbits):
            name = f"orbit_{k}.csv"
            pts_k = o.pop("points")
            files.append(art.write_csv(os.path.join(out_dir, name), ["x1", "p1"], pts_k))
            o["file"] = name
            series.append((f"orbit {k}", pts_k[:, 0], pts_k[:, 1]))
        payload = {"equilibria": [o.to_dict() for o in opts], "window": window,
                   "branches": branches, "orbits": orbits}
        files.append(art.write_json(os.path.join(out_dir, "portrait.json"), payload))
        if cfg.svg and series:
            files.append(art.write_text(
                os.path.join(out_dir, "portrait.svg"),
                art.line_chart(series, "phase portrait", "x", "p",
                               points=[(f"({q[0]:.3g}, {q[1]:.3g})", q[0], q[1]) for q in pts])))
    return payload, files


def parse_matrix(text, name):
    """``"[[0, 1], [0, 0]]"`` (JSON) or ``"0 1; 0 0"`` (rows separated by ``;``)."""
    try:
        M = np.array(json.loads(text), dtype=float)
    except (ValueError, TypeError):
        try:
            M = np.array([[float(v) for v in row.replace(",", " ").split()]
                          for row in text.split(";") if row.strip()])
        except ValueError:
            raise ConfigError(f"--{name}: cannot parse matrix {text!r}") from None
    if M.ndim <= 1:
        M = M.reshape(1, -1)
    if M.ndim != 2 or M.size == 0:
        raise ConfigError(f"--{name}: expected a matrix, got shape {M.shape}")
    return M


def riccati_report(A, B, C):
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
        raise ConfigError(f"incompatible shapes A {A.shape}, B {B.shape}, C {C.shape}")
    with _Stage("riccati"):
        sol = linham.solve_care(A, B @ B.T, C.T @ C)
        pl = linham.check_pl_plus_i(sol.P, sol.L)
    return {
        "P": sol.P, "L": sol.L, "A_c": sol.A_c,
        "closed_loop_eigenvalues": [[float(e.real), float(e.imag)] for e in
                                    sorted(np.linalg.eigvals(sol.A_c),
                                           key=lambda e: (round(e.real, 12), e.imag))],
        "riccati_residual": sol.residual,
        "pl_plus_i_min_sv": pl.min_sv,
        "stabilizable": linham.pbh_stabilizable(A, B),
        "detectable": linham.pbh_detectable(C, A),
    }


# --------------------------------------------------------------------------
# argument parsing

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", help="output directory (overrides $TURNPIKE_OUT and the config)")
    common.add_argument("--rtol", type=float, help="integration relative tolerance")
    common.add_argument("--atol", type=float, help="integration absolute tolerance")
    common.add_argument("--grid", type=int, help="number of uniform output samples per horizon")
    common.add_argument("--jobs", type=int, default=None,
                        help="worker threads for per-horizon checks (default: CPU count)")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="log progress (-vv for debug output)")

    p = argparse.ArgumentParser(prog="turnpike",
                                description="Turnpike analysis of nonlinear optimal control problems.")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")
    for verb, text in (("run", "solve the horizon sweep, certify and write artifacts"),
                       ("sop", "compute steady optima and check the structural hypotheses"),
                       ("portrait", "phase portrait of a scalar problem"),
                       ("validate", "validate a configuration without solving")):
        sp = sub.add_parser(verb, parents=[common], help=text, description=text)
        sp.add_argument("config", help="JSON configuration file")
    sp = sub.add_parser("riccati", parents=[common], help="stabilizing Riccati solution",
                        description="Stabilizing solution of PA + A'P - PBB'P + C'C = 0.")
    sp.add_argument("--A", required=True, help='state matrix, e.g. "[[0,1],[0,0]]" or "0 1; 0 0"')
    sp.add_argument("--B", required=True, help="input matrix")
    sp.add_argument("--C", required=True, help="output matrix")
    return p


def _dump(payload):
    return json.dumps(art.jsonable(payload), indent=2)


def _dispatch(args):
    if args.verb == "riccati":
        A, B, C = (parse_matrix(getattr(args, k), k) for k in ("A", "B", "C"))
        payload = riccati_report(A, B, C)
        print(_dump(payload))
        if args.out_dir:
            art.write_json(os.path.join(art.ensure_dir(args.out_dir), "riccati.json"), payload)
        return EXIT_OK

    with _Stage("config"):
        cfg = _apply_overrides(load_config(args.config), args)
    out_dir = resolve_output_dir(args.out_dir, cfg)

    if args.verb == "validate":
        p = cfg.problem
        print(f"{args.config}: valid ({p.system.name}, {p.kind}, n={p.n}, m={p.m}, "
              f"horizons {list(p.horizons)})")
        return EXIT_OK
    if args.verb == "sop":
        payload = sop_report(cfg)
        art.write_json(os.path.join(art.ensure_dir(out_dir), "sop.json"), payload)
        print(_dump(payload))
        return EXIT_OK
    if args.verb == "portrait":
        payload, files = portrait(cfg, out_dir)
        for b in payload["branches"]:
            print(f"{b['kind']:8s} branch of ({b['equilibrium'][0]:.4g}, {b['equilibrium'][1]:.4g}) "
                  f"sign {b['sign']:+d}: arc {b['arc_length']:.3g}, stop {b['stop']}")
        for o in payload["orbits"]:
            print(f"closed orbit: period {o['period']:.6g}, closure {o['closure']:.2e}")
        print(f"wrote {len(files)} files to {out_dir}")
        return EXIT_OK
    res = run_pipeline(cfg, out_dir, args.jobs)
    cert = res.certificate
    for row in cert["per_horizon"]:
        print(f"T = {row['T']:g}: K_T = {row['K_T']:.4g}, mu_T = {row['mu_T']:.4g}")
    print(f"verdict: {res.verdict}")
    for r in cert["reasons"]:
        print(f"  - {r}")
    print(f"wrote {len(res.files)} files to {out_dir}")
    return res.exit_code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs is not None and args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        return _dispatch(args)
    except StageError as exc:
        print(f"turnpike: {exc}", file=sys.stderr)
    except TurnpikeError as exc:
        print(f"turnpike: {exc.stage}.{type(exc).__name__}: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"turnpike: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
