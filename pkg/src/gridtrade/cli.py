"""Command-line interface.

Subcommands: ``simulate`` (closed-loop run with CSV/JSON outputs),
``validate`` (configuration and optimality-condition checks),
``equilibrium`` (centralized solve with multiplier recovery),
``reduced`` (quasi-steady-state model run).

Exit codes: 0 ok, 1 validation failure, 2 runtime failure,
3 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .engine import ScenarioError, Scenario, run_scenario
from .game import check_price_margin, check_monotonicity, check_penalty_bounds, \
    pseudo_gradient
from .integrate import IntegrationError, IntegratorConfig
from .oracle import solve_vi


def _load(path):
    if not os.path.exists(path):
        print(f"error: scenario file not found: {path}", file=sys.stderr)
        raise SystemExit(1)
    try:
        return Scenario.from_file(path)
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(1)
    except (json.JSONDecodeError, OSError) as e:
        print(f"error: cannot read scenario: {e}", file=sys.stderr)
        raise SystemExit(1)


def _apply_overrides(scn, args):
    integ = scn.integrator
    kwargs = dict(method=integ.method, dt=integ.dt, t_end=integ.t_end,
                  sample_period=integ.sample_period, rtol=integ.rtol,
                  atol=integ.atol)
    if getattr(args, "dt", None) is not None:
        kwargs["dt"] = args.dt
    if getattr(args, "t_end", None) is not None:
        kwargs["t_end"] = args.t_end
    scn.integrator = IntegratorConfig(**kwargs)
    if getattr(args, "eps", None) is not None:
        from .controller import ControllerParams

        scn.controller = ControllerParams(eps_fast=args.eps,
                                          eps_u=scn.controller.eps_u)
    return scn


def _cmd_simulate(args, reduced=False):
    scn = _apply_overrides(_load(args.scenario), args)
    outdir = args.out or os.path.join("out", scn.name + ("-reduced" if reduced
                                                         else ""))
    try:
        _, _, report = run_scenario(scn, outdir=outdir, check=args.check,
                                    reduced=reduced)
    except (ScenarioError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except IntegrationError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    print(f"wrote {outdir}/timeseries.csv and {outdir}/summary.json")
    for c in report.convergence_times:
        seg = c["segment"]
        t = c["time"]
        status = f"converged at t={t:.3f} s" if t is not None \
            else "did not converge"
        print(f"segment [{seg[0]:g}, {seg[1]:g}] s: {status} "
              f"(threshold {report.kkt_threshold:g})")
    if args.check:
        failed = [k for k, v in report.checks.items() if k != "ok" and not v]
        if failed:
            print("checks failed: " + ", ".join(failed))
            return 3
        print("all checks passed")
    return 0


def _cmd_validate(args):
    scn = _load(args.scenario)
    g = scn.game()
    rc = 0
    margin1 = check_price_margin(scn.plant, scn.price.l, scn.price.p_r)
    margins3 = check_monotonicity(scn.weights, scn.price.p_r, scn.plant.V_ref)
    print(f"price margin over peak feasible demand: {margin1:.4f}"
          + ("" if margin1 > 0 else "  [VIOLATED]"))
    print("monotonicity margins per agent: "
          + ", ".join(f"{v:.4f}" for v in margins3))
    if margin1 <= 0 or (margins3 <= 0).any():
        rc = 1
    managed = scn.topo.managed_lines
    sizes = sorted(k for v in managed.values() for k in v)
    part_ok = sizes == list(range(1, scn.topo.m + 1))
    print(f"managed-line partition: {'ok' if part_ok else 'BROKEN'} "
          f"({ {i: list(v) for i, v in managed.items()} })")
    if not part_ok:
        rc = 1
    sol = solve_vi(g)
    print(f"equilibrium solve: {sol.iterations} iterations, "
          f"residual {sol.residual:.2e}")
    slack_V, slack_Il = check_penalty_bounds(g, sol.lambda_star,
                                             sol.gamma_star)
    print("penalty slack (voltage): "
          + ", ".join(f"{v:.2f}" for v in slack_V))
    print("penalty slack (lines):   "
          + ", ".join(f"{v:.2f}" for v in slack_Il))
    if (slack_V < 0).any() or (slack_Il < 0).any():
        print("warning: some penalty weights sit below the multiplier bound")
    rng = np.random.default_rng(args.seed)
    lay = g.layout
    mineigs = []
    for _ in range(10):
        u = rng.uniform(370, 390, g.n)
        x = rng.uniform(-1, 1, 2 * g.n + g.m) * 20
        x[lay.ix_V] = rng.uniform(377, 383, g.n)
        J = np.empty((g.n + lay.size, g.n + lay.size))
        base = pseudo_gradient(g, u, x)
        h = 1e-6
        zi = 0
        for i in range(g.n):
            for du, dx in [(1, None)] + [(None, j) for j in
                                         range(int(lay.dims[i]))]:
                u2 = u.copy(); x2 = x.copy()
                if du:
                    u2[i] += h
                else:
                    x2[int(lay.offsets[i]) + dx] += h
                J[:, zi] = (pseudo_gradient(g, u2, x2) - base) / h
                zi += 1
        mineigs.append(float(np.linalg.eigvalsh(0.5 * (J + J.T)).min()))
    print("min eigenvalue of symmetrised game-map Jacobian over "
          f"{len(mineigs)} random points: {min(mineigs):.4f}")
    if min(mineigs) <= 0:
        rc = 1
    return rc


def _cmd_equilibrium(args):
    scn = _load(args.scenario)
    g = scn.game()
    sol = solve_vi(g)
    rec = sol.recovery
    out = {
        "u_star": sol.u_star.tolist(),
        "x_star": sol.x_star.tolist(),
        "lambda_shared": sol.lambda_star.tolist(),
        "gamma": sol.gamma_star.tolist(),
        "iterations": int(sol.iterations),
        "fixed_point_residual": float(sol.residual),
        "converged": bool(sol.converged),
        "stationarity_residual": float(rec.residual),
        "rank_deficient": bool(rec.rank_deficient),
    }
    if args.format == "json":
        print(json.dumps(out, indent=2))
    else:
        lay = g.layout
        I, V, Il = lay.split(sol.x_star)
        print("u*:      " + ", ".join(f"{v:.6f}" for v in sol.u_star))
        print("I*:      " + ", ".join(f"{v:.6f}" for v in I))
        print("V*:      " + ", ".join(f"{v:.6f}" for v in V))
        print("Il*:     " + ", ".join(f"{v:.6f}" for v in Il))
        print("lambda*: " + ", ".join(f"{v:.4f}" for v in sol.lambda_star))
        print("gamma*:  " + ", ".join(f"{v:.4f}" for v in sol.gamma_star))
        print(f"iterations: {sol.iterations}  residual: {sol.residual:.2e}  "
              f"converged: {sol.converged}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "equilibrium.json"), "w") as f:
            json.dump(out, f, indent=2)
            f.write("\n")
    return 0 if sol.converged else 2


def main(argv=None):
    p = argparse.ArgumentParser(
        prog="gridtrade",
        description="DC microgrid energy-trading control simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sim=False):
        sp.add_argument("scenario", help="scenario JSON file")
        if sim:
            sp.add_argument("--out", default=None, help="output directory")
            sp.add_argument("--dt", type=float, default=None)
            sp.add_argument("--t-end", dest="t_end", type=float, default=None)
            sp.add_argument("--eps", type=float, default=None,
                            help="override the fast-estimator time constant")
            sp.add_argument("--format", choices=("csv", "json"),
                            default="csv")

    sp = sub.add_parser("simulate", help="run the closed loop")
    common(sp, sim=True)
    sp.add_argument("--check", action="store_true",
                    help="exit 3 unless run-level checks pass")
    sp = sub.add_parser("validate", help="check configuration and margins")
    common(sp)
    sp.add_argument("--seed", type=int, default=0,
                    help="seed for randomized spot checks")
    sp = sub.add_parser("equilibrium", help="centralized equilibrium solve")
    common(sp)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--out", default=None)
    sp = sub.add_parser("reduced", help="run the quasi-steady-state model")
    common(sp, sim=True)
    sp.add_argument("--check", action="store_true")

    args = p.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "reduced":
            return _cmd_simulate(args, reduced=True)
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "equilibrium":
            return _cmd_equilibrium(args)
    except SystemExit as e:
        return e.code
    return 2


if __name__ == "__main__":
    sys.exit(main())
