"""Scenario ingestion, closed-loop assembly, simulation runs and reports.

A scenario file is a JSON tree with explicit unit suffixes.  The closed
loop (grid + controller) is affine apart from the box penalties, so the
engine probes the exact system matrix once and propagates with a
compiled RK4 kernel; diagnostics are evaluated on the sampled rows.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .controller import (ControllerParams, ControllerState, consensus_errors,
                         controller_rhs, kkt_residual)
from .game import (GameDefinition, ObjectiveWeights, PenaltyParams,
                   PriceParams, build_game, check_price_margin,
                   check_monotonicity)
from .integrate import IntegrationError, IntegratorConfig, Trajectory, integrate
from .oracle import lyapunov_diagnostics, reduced_model_rhs, solve_vi
from .plant import (DguParams, LineParams, PlantParams, PlantState,
                    apply_load_step, plant_rhs)
from .topology import MicrogridTopology


class ScenarioError(ValueError):
    """Scenario failed validation; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n" + "\n".join(
            f"  - {e}" for e in self.errors))


_UNIT_RE = re.compile(r"^\s*([-+]?[0-9.]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-zµ]*)\s*$")
_BASE_UNITS = ("ohm", "v", "a", "h", "f", "s")
_PREFIXES = {"": 1.0, "m": 1e-3, "u": 1e-6, "µ": 1e-6, "n": 1e-9, "k": 1e3}


def parse_quantity(value) -> float:
    """Number in SI units from a bare number or a string like ``"20 mOhm"``."""
    if isinstance(value, (int, float)):
        return float(value)
    m = _UNIT_RE.match(str(value))
    if not m:
        raise ValueError(f"cannot parse quantity {value!r}")
    num, unit = float(m.group(1)), m.group(2)
    if unit == "":
        return num
    for base in _BASE_UNITS:
        if unit.lower().endswith(base):
            prefix = unit[: len(unit) - len(base)]
            if prefix in _PREFIXES:
                return num * _PREFIXES[prefix]
    raise ValueError(f"unknown unit suffix {unit!r} in {value!r}")


@dataclass
class Event:
    time: float
    d_IL: float
    d_ZL: float


@dataclass
class Scenario:
    """Validated experiment description; build inputs for one run."""

    name: str
    topo: MicrogridTopology
    comm_topo: object
    plant: PlantParams
    price: PriceParams
    weights: ObjectiveWeights
    penalties: PenaltyParams
    controller: ControllerParams
    integrator: IntegratorConfig
    events: list
    initial_plant: object      # "equilibrium" | "zeros" | PlantState
    initial_controller: object  # "zeros" | ControllerState fields dict

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def from_dict(cls, d):
        errors = []

        def grab(path, conv=parse_quantity, default=KeyError):
            node = d
            try:
                for key in path.split("."):
                    node = node[key]
            except (KeyError, TypeError, IndexError):
                if default is KeyError:
                    errors.append(f"missing field {path!r}")
                    return None
                return default
            try:
                return conv(node) if conv else node
            except (ValueError, TypeError) as e:
                errors.append(f"field {path!r}: {e}")
                return None

        name = d.get("name", "scenario")
        topo = comm_topo = None
        tnode = d.get("topology", {})
        try:
            topo = MicrogridTopology(tnode.get("n", 0),
                                     tnode.get("edges", []),
                                     tnode.get("managers", []))
        except (ValueError, TypeError) as e:
            errors.append(f"topology: {e}")
        if topo is not None and tnode.get("comm_edges"):
            try:
                ce = tnode["comm_edges"]
                comm_topo = MicrogridTopology(topo.n, ce, [h for h, _ in ce])
            except (ValueError, TypeError) as e:
                errors.append(f"topology.comm_edges: {e}")

        dgus, lines = [], []
        for i, rec in enumerate(d.get("dgus", []), start=1):
            try:
                dgus.append(DguParams(
                    R=parse_quantity(rec["R"]), L=parse_quantity(rec["L"]),
                    C=parse_quantity(rec["C"]), Z_L=parse_quantity(rec["Z_L"]),
                    I_L=parse_quantity(rec["I_L"]),
                    V_min=parse_quantity(rec["V_min"]),
                    V_max=parse_quantity(rec["V_max"]),
                    V_ref=parse_quantity(rec["V_ref"]),
                    I_ref=parse_quantity(rec.get("I_ref", 0.0)),
                    u_ref=parse_quantity(rec.get("u_ref", 0.0))))
            except (KeyError, ValueError, TypeError) as e:
                errors.append(f"dgus[{i}]: {e!r}")
        for k, rec in enumerate(d.get("lines", []), start=1):
            try:
                lines.append(LineParams(
                    R=parse_quantity(rec["R"]), L=parse_quantity(rec["L"]),
                    Il_min=parse_quantity(rec["Il_min"]),
                    Il_max=parse_quantity(rec["Il_max"]),
                    Il_ref=parse_quantity(rec.get("Il_ref", 0.0))))
            except (KeyError, ValueError, TypeError) as e:
                errors.append(f"lines[{k}]: {e!r}")
        if topo is not None and len(dgus) != topo.n:
            errors.append(f"expected {topo.n} dgu records, got {len(dgus)}")
        if topo is not None and len(lines) != topo.m:
            errors.append(f"expected {topo.m} line records, got {len(lines)}")

        price = weights = penalties = None
        l = grab("price.l")
        p_r = grab("price.p_r")
        if l is not None and p_r is not None:
            try:
                price = PriceParams(l, p_r)
            except ValueError as e:
                errors.append(f"price: {e}")
        wnode = d.get("weights", [])
        if topo is not None and len(wnode) == topo.n:
            try:
                managed = topo.managed_lines
                alpha_Il = []
                for i, rec in enumerate(wnode, start=1):
                    a = rec["alpha_Il"]
                    count = len(managed[i])
                    if isinstance(a, (int, float, str)):
                        alpha_Il.append([parse_quantity(a)] * count)
                    else:
                        alpha_Il.append([parse_quantity(v) for v in a])
                weights = ObjectiveWeights(
                    r=[parse_quantity(rec["r"]) for rec in wnode],
                    alpha_u=[parse_quantity(rec["alpha_u"]) for rec in wnode],
                    alpha_I=[parse_quantity(rec["alpha_I"]) for rec in wnode],
                    alpha_V=[parse_quantity(rec["alpha_V"]) for rec in wnode],
                    alpha_Il=alpha_Il)
            except (KeyError, ValueError, TypeError) as e:
                errors.append(f"weights: {e!r}")
        else:
            errors.append("weights: need one record per agent")
        try:
            penalties = PenaltyParams(
                [parse_quantity(v) for v in d["penalties"]["rho_V"]],
                [parse_quantity(v) for v in d["penalties"]["rho_Il"]])
        except (KeyError, ValueError, TypeError) as e:
            errors.append(f"penalties: {e!r}")

        ctrl = None
        try:
            cnode = d.get("controller", {})
            ctrl = ControllerParams(
                eps_fast=parse_quantity(cnode.get("eps_fast", 0.01)),
                eps_u=parse_quantity(cnode.get("eps_u", 0.1)))
        except ValueError as e:
            errors.append(f"controller: {e}")
        integ = None
        try:
            inode = d.get("integrator", {})
            integ = IntegratorConfig(
                method=inode.get("method", "rk4"),
                dt=parse_quantity(inode.get("dt", 1e-5)),
                t_end=parse_quantity(inode.get("t_end", 10.0)),
                sample_period=parse_quantity(
                    d.get("output", {}).get("sample_period", 1e-3)),
                rtol=parse_quantity(inode.get("rtol", 1e-8)),
                atol=parse_quantity(inode.get("atol", 1e-10)))
        except ValueError as e:
            errors.append(f"integrator: {e}")

        events = []
        last_t = 0.0
        for j, rec in enumerate(d.get("events", []), start=1):
            try:
                ev = Event(parse_quantity(rec["time"]),
                           parse_quantity(rec.get("d_IL", 0.0)),
                           parse_quantity(rec.get("d_ZL", 0.0)))
                if ev.time <= last_t:
                    errors.append(f"events[{j}]: times must be increasing")
                last_t = ev.time
                events.append(ev)
            except (KeyError, ValueError, TypeError) as e:
                errors.append(f"events[{j}]: {e!r}")

        init = d.get("initial", {})
        initial_plant = init.get("plant", "equilibrium")
        initial_controller = init.get("controller", "zeros")
        if isinstance(initial_plant, dict):
            try:
                initial_plant = PlantState(
                    [parse_quantity(v) for v in initial_plant["I"]],
                    [parse_quantity(v) for v in initial_plant["V"]],
                    [parse_quantity(v) for v in initial_plant.get("I_l", [])])
            except (KeyError, ValueError, TypeError) as e:
                errors.append(f"initial.plant: {e!r}")
        elif initial_plant not in ("equilibrium", "zeros"):
            errors.append(f"initial.plant: unknown mode {initial_plant!r}")
        if not isinstance(initial_controller, dict) and \
                initial_controller != "zeros":
            errors.append(
                f"initial.controller: unknown mode {initial_controller!r}")

        plant = None
        if not errors:
            plant = PlantParams(dgus, lines)
            try:
                build_game(topo, plant, price, weights, penalties,
                           comm_topo=comm_topo)
            except ValueError as e:
                errors.append(str(e))
            for ev in events:
                if ev.time > integ.t_end:
                    errors.append(f"event at t={ev.time} beyond t_end")
        if errors:
            raise ScenarioError(errors)
        return cls(name, topo, comm_topo, plant, price, weights, penalties,
                   ctrl, integ, events, initial_plant, initial_controller)

    def game(self, plant_params=None) -> GameDefinition:
        return build_game(self.topo, plant_params or self.plant, self.price,
                          self.weights, self.penalties,
                          comm_topo=self.comm_topo)


class ClosedLoop:
    """Stacked grid + controller system in one flat vector.

    Layout: plant (I, V, I_l) followed by the controller vector.  The
    dynamics are affine in the state except for the penalty branches on
    the decision copies of voltages and line currents, so the system is
    represented as ``M y + c`` plus a sparse piecewise correction, probed
    exactly from the reference right-hand side.
    """

    def __init__(self, g: GameDefinition, cp: ControllerParams,
                 reduced: bool = False):
        self.g = g
        self.cp = cp
        self.reduced = reduced
        n, m = g.n, g.m
        self.n_plant = 2 * n + m
        self._cs_template = ControllerState.zeros(g)
        full = self._cs_template.to_vector().size
        self.n_ctrl = full - (2 * n if reduced else 0)
        self.size = self.n_plant + self.n_ctrl
        lay = g.layout
        base = self.n_plant + (n if reduced else 3 * n)  # xhat offset
        self.ix_xhat_V = base + lay.ix_V
        self.ix_xhat_line = base + lay.ix_line
        if reduced:
            from .topology import laplacian_pinv

            self._lap_pinv = laplacian_pinv(g.comm_topo)
        self._assemble()

    # -- packing ---------------------------------------------------------
    def pack(self, plant: PlantState, cs: ControllerState) -> np.ndarray:
        cv = cs.to_vector()
        if self.reduced:
            cv = cv[2 * self.g.n:]
        return np.concatenate([plant.to_vector(), cv])

    def unpack(self, y):
        n, m = self.g.n, self.g.m
        plant = PlantState.from_vector(y[:self.n_plant], n, m)
        cv = y[self.n_plant:]
        if self.reduced:
            Ihat = cv[n:n + 2 * n + m][self.g.layout.ix_I]
            ups = np.full(n, Ihat.sum())
            nu = self._lap_pinv @ (n * Ihat - ups)
            cv = np.concatenate([ups, nu, cv])
        cs = ControllerState.from_vector(cv, self.g)
        return plant, cs

    # -- reference (readable) dynamics ------------------------------------
    def rhs_reference(self, t, y, ctx=None):
        plant, cs = self.unpack(y)
        d_plant = plant_rhs(plant, cs.u, self.g.plant, self.g.topo)
        if self.reduced:
            _, d_cs = reduced_model_rhs(plant, cs, self.g, self.cp)
            d_vec = d_cs.to_vector()[2 * self.g.n:]
        else:
            d_cs = controller_rhs(cs, plant.I, self.g, self.cp)
            d_vec = d_cs.to_vector()
        return np.concatenate([d_plant.to_vector(), d_vec])

    # -- affine + penalty representation -----------------------------------
    def _penalty_arrays(self):
        g = self.g
        psrc = np.concatenate([self.ix_xhat_V, self.ix_xhat_line]).astype(np.int64)
        plo = np.concatenate([g.plant.V_min, g.plant.Il_min])
        phi = np.concatenate([g.plant.V_max, g.plant.Il_max])
        prho = np.concatenate([g.penalties.rho_V, g.rho_Il_edge])
        pscl = np.concatenate([g.weights.r, g.r_edge])
        return psrc, plo, phi, prho, pscl

    def _penalty_term(self, y):
        dy = np.zeros(self.size)
        v = y[self.psrc]
        sel = np.where(v < self.plo, self.prho * self.pscl, 0.0)
        sel -= np.where(v > self.phi, self.prho * self.pscl, 0.0)
        dy[self.psrc] += sel
        return dy

    def _assemble(self):
        self.psrc, self.plo, self.phi, self.prho, self.pscl = \
            self._penalty_arrays()
        c = self.rhs_reference(0.0, np.zeros(self.size)) \
            - self._penalty_term(np.zeros(self.size))
        M = np.empty((self.size, self.size))
        e = np.zeros(self.size)
        for j in range(self.size):
            e[j] = 1.0
            M[:, j] = (self.rhs_reference(0.0, e) - self._penalty_term(e)) - c
            e[j] = 0.0
        self.M = np.ascontiguousarray(M)
        self.c = c

    def rhs_fast(self, t, y, ctx=None):
        dy = self.M @ y
        dy += self.c
        dy += self._penalty_term(y)
        return dy

    def run_segment(self, y, dt, steps, sample_every, out, use_numba=True):
        return _kernels.rk4_affine(self.M, self.c, y, self.psrc, self.plo,
                                   self.phi, self.prho, self.pscl, dt, steps,
                                   sample_every, out, use_numba=use_numba)


@dataclass
class RunReport:
    """Summary of one simulation run; every number comes from a sample."""

    scenario: str
    kkt_threshold: float
    final_kkt: dict
    consensus: dict
    convergence_times: list
    assumption_margins: dict
    violations: dict
    lyapunov: dict
    conservation: dict
    flags: dict
    checks: dict
    config: dict
    equilibrium: dict = None

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "residuals": self.final_kkt,
            "consensus": self.consensus,
            "convergence_times": self.convergence_times,
            "margins": self.assumption_margins,
            "violations": self.violations,
            "lyapunov": self.lyapunov,
            "conservation": self.conservation,
            "flags": self.flags,
            "checks": self.checks,
            "config": self.config,
            "equilibrium": self.equilibrium or {},
        }


KKT_THRESHOLD = 1e-3
_DIAG_COLUMNS = ("kkt_max", "kkt_line1", "kkt_line2", "kkt_line3", "kkt_line4",
                 "kkt_line5", "kkt_line6", "kkt_line7", "upsilon_spread",
                 "rlambda_spread", "E_b", "E_r", "V_violation", "Il_violation")


def csv_header(g: GameDefinition, reduced=False):
    n, m = g.n, g.m
    cols = ["time"]
    cols += [f"plant.I.{i}" for i in range(1, n + 1)]
    cols += [f"plant.V.{i}" for i in range(1, n + 1)]
    cols += [f"plant.Il.{k}" for k in range(1, m + 1)]
    if not reduced:
        cols += [f"ctrl.upsilon.{i}" for i in range(1, n + 1)]
        cols += [f"ctrl.nu.{i}" for i in range(1, n + 1)]
    cols += [f"ctrl.u.{i}" for i in range(1, n + 1)]
    lay = g.layout
    for i in range(1, n + 1):
        cols += [f"ctrl.xhat.{i}.{j}" for j in range(1, int(lay.dims[i - 1]) + 1)]
    for name in ("lambda", "theta"):
        for i in range(1, n + 1):
            cols += [f"ctrl.{name}.{i}.{j}" for j in range(1, n + m + 1)]
    cols += [f"ctrl.gamma.{i}" for i in range(1, n + 1)]
    cols += [f"diag.{c}" for c in _DIAG_COLUMNS]
    return cols


def _stability_limit(plant: PlantParams):
    # explicit-method bound set by the fastest line time constant
    if plant.m == 0:
        return np.inf
    return 2.0 * float(np.min(plant.L_l / plant.R_l))


def run_scenario(scenario: Scenario, outdir=None, check=False,
                 reduced=False, use_numba=True):
    """Simulate the scenario; returns (trajectory, diagnostics, report).

    Writes ``timeseries.csv`` and ``summary.json`` into ``outdir`` when
    given.  ``reduced=True`` integrates the quasi-steady-state model
    (no consensus-estimator states).
    """
    import os

    cfg = scenario.integrator
    if cfg.method == "rk4":
        limit = _stability_limit(scenario.plant)
        if cfg.dt >= limit:
            raise ScenarioError([
                f"dt={cfg.dt:g} violates the line-dynamics stability bound "
                f"{limit:g}; refusing to start"])

    epochs_params = [scenario.plant]
    for ev in scenario.events:
        epochs_params.append(apply_load_step(epochs_params[-1], ev.d_IL,
                                             ev.d_ZL))
    games = [scenario.game(p) for p in epochs_params]
    cp = scenario.controller
    loops = [ClosedLoop(g, cp, reduced=reduced) for g in games]

    # initial state
    g0 = games[0]
    if scenario.initial_plant == "equilibrium":
        sol = solve_vi(g0, tol=1e-9, recover=False)
        I0, V0, Il0 = g0.layout.split(sol.x_star)
        plant0 = PlantState(I0, V0, Il0)
    elif scenario.initial_plant == "zeros":
        plant0 = PlantState.zeros(g0.n, g0.m)
    else:
        plant0 = scenario.initial_plant
    cs0 = ControllerState.zeros(g0)
    if isinstance(scenario.initial_controller, dict):
        for key, val in scenario.initial_controller.items():
            arr = np.asarray(val, dtype=float)
            if not hasattr(cs0, key):
                raise ScenarioError([f"initial.controller: unknown block {key!r}"])
            shaped = getattr(cs0, key)
            setattr(cs0, key, arr.reshape(shaped.shape))
    if abs(cs0.nu.sum()) > 1e-12:
        raise ScenarioError(["initial.controller: nu must sum to zero"])

    y = loops[0].pack(plant0, cs0)

    if cfg.method == "rk4":
        traj = _run_fixed(loops, scenario, y, use_numba)
    else:
        traj = _run_adaptive(loops, scenario, y)

    diag = _diagnostics(traj, loops)
    report = _build_report(scenario, traj, diag, games, cp, loops[0])
    if outdir is not None:
        report.equilibrium = _equilibrium_export(games)
        os.makedirs(outdir, exist_ok=True)
        write_csv(os.path.join(outdir, "timeseries.csv"), traj, diag,
                  games[0], reduced=reduced)
        with open(os.path.join(outdir, "summary.json"), "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    if check:
        report.checks["ok"] = all(
            v for k, v in report.checks.items() if k != "ok")
    return traj, diag, report


def _run_fixed(loops, scenario, y, use_numba):
    cfg = scenario.integrator
    times = [ev.time for ev in scenario.events]
    for t in times:
        if not (0 < t <= cfg.t_end):
            raise ScenarioError([f"event time {t} outside (0, t_end]"])
        for grid, gname in ((cfg.dt, "step"), (cfg.sample_period, "sample")):
            k = round(t / grid)
            if abs(t - k * grid) > 1e-9 * max(1.0, t):
                raise ScenarioError([f"event time {t} not on the {gname} grid"])
    if abs(cfg.sample_period / cfg.dt
           - round(cfg.sample_period / cfg.dt)) > 1e-9:
        raise ScenarioError(["sample_period must be an integer multiple of dt"])

    rows_t, rows_y, rows_e = [0.0], [y.copy()], [0]
    boundaries = sorted(set(times) | {cfg.t_end}) if cfg.t_end > 0 else []
    per = round(cfg.sample_period / cfg.dt)
    t0 = 0.0
    for epoch, t1 in enumerate(boundaries):
        n_samples = round((t1 - t0) / cfg.sample_period)
        steps = n_samples * per
        out = np.empty((n_samples, loops[0].size))
        ns, finite = loops[epoch].run_segment(y, cfg.dt, steps, per, out,
                                              use_numba=use_numba)
        for s in range(ns):
            rows_t.append(t0 + (s + 1) * cfg.sample_period)
            rows_y.append(out[s].copy())
            rows_e.append(epoch)
        if not finite:
            traj = Trajectory(np.array(rows_t[:-1]), np.array(rows_y[:-1]),
                              np.array(rows_e[:-1], dtype=int))
            raise IntegrationError(
                f"non-finite state at t={rows_t[-1]:.6g}", rows_t[-2],
                rows_y[-2], traj)
        if t1 in times:
            rows_t.append(t1)
            rows_y.append(y.copy())
            rows_e.append(epoch + 1)
        t0 = t1
    return Trajectory(np.array(rows_t), np.array(rows_y),
                      np.array(rows_e, dtype=int))


def _run_adaptive(loops, scenario, y):
    cfg = scenario.integrator
    events = [(ev.time, i + 1) for i, ev in enumerate(scenario.events)]

    state = {"epoch": 0}

    def rhs(t, yv, ctx):
        return loops[state["epoch"]].rhs_fast(t, yv, ctx)

    def on_event(ctx, payload):
        state["epoch"] = payload
        return ctx

    return integrate(rhs, y, cfg, events=events, on_event=on_event,
                     ctx=None)


def _diagnostics(traj: Trajectory, loops):
    rows = np.zeros((traj.n_samples, len(_DIAG_COLUMNS)))
    for k in range(traj.n_samples):
        loop = loops[traj.epoch[k]]
        g, cp = loop.g, loop.cp
        plant, cs = loop.unpack(traj.y[k])
        res = kkt_residual(cs, g, cp)
        ups_spread, lam_spread = consensus_errors(cs, g)
        E_b, E_r = lyapunov_diagnostics(plant, cs, g, cp)
        v_viol = float(np.maximum(g.plant.V_min - plant.V, 0).max()
                       + np.maximum(plant.V - g.plant.V_max, 0).max())
        il_viol = 0.0
        if g.m:
            il_viol = float(np.maximum(g.plant.Il_min - plant.I_l, 0).max()
                            + np.maximum(plant.I_l - g.plant.Il_max, 0).max())
        rows[k] = [res.max, *res.lines, ups_spread, lam_spread, E_b, E_r,
                   v_viol, il_viol]
    return rows


def _equilibrium_export(games):
    """Centralized equilibrium per load-step era, for the summary file."""
    out = {}
    for e, g in enumerate(games):
        try:
            sol = solve_vi(g)
            I, V, Il = g.layout.split(sol.x_star)
            out[f"epoch{e}"] = {
                "u_star": sol.u_star.tolist(),
                "I_star": I.tolist(),
                "V_star": V.tolist(),
                "Il_star": Il.tolist(),
                "lambda_shared": sol.lambda_star.tolist(),
                "gamma": sol.gamma_star.tolist(),
                "converged": bool(sol.converged),
                "residual": float(sol.residual),
            }
        except RuntimeError as err:
            out[f"epoch{e}"] = {"error": str(err)}
    return out


def _convergence_time(t, kkt, threshold):
    """Earliest sample time after which the residual stays below threshold."""
    if len(t) == 0:
        return None
    below = kkt < threshold
    if not below[-1]:
        return None
    idx = len(below) - 1
    while idx > 0 and below[idx - 1]:
        idx -= 1
    return float(t[idx])


def _build_report(scenario, traj, diag, games, cp, loop):
    cfg = scenario.integrator
    seg_bounds = [0.0] + [ev.time for ev in scenario.events] + [cfg.t_end]
    conv = []
    for e in range(len(games)):
        mask = traj.epoch == e
        conv.append({
            "segment": [seg_bounds[e], seg_bounds[e + 1]],
            "time": _convergence_time(traj.t[mask], diag[mask, 0],
                                      KKT_THRESHOLD),
        })
    margins = {}
    for e, g in enumerate(games):
        margins[f"epoch{e}"] = {
            "price_margin": check_price_margin(g.plant, g.price.l, g.price.p_r),
            "monotonicity": list(check_monotonicity(g.weights, g.price.p_r,
                                                   g.plant.V_ref)),
        }
    n, m = games[0].n, games[0].m
    conservation = {"nu_drift": 0.0, "theta_drift": 0.0}
    if traj.n_samples > 1 and not loop.reduced:
        npl = loop.n_plant
        nu_sums = traj.y[:, npl + n:npl + 2 * n].sum(axis=1)
        th_start = npl + 3 * n + (2 * n + m) + n * (n + m)
        th = traj.y[:, th_start:th_start + n * (n + m)]
        th_sums = th.reshape(len(traj.t), n, -1).sum(axis=1)
        tline = np.maximum(traj.t, 1.0)
        conservation["nu_drift"] = float(
            (np.abs(nu_sums - nu_sums[0]) / tline).max())
        conservation["theta_drift"] = float(
            (np.abs(th_sums - th_sums[0]).max(axis=1) / tline).max())
    final = {name: float(v) for name, v in zip(_DIAG_COLUMNS, diag[-1])}
    pre_mask = traj.epoch == 0
    pre_final = {name: float(v)
                 for name, v in zip(_DIAG_COLUMNS, diag[pre_mask][-1])} \
        if pre_mask.any() else {}
    report = RunReport(
        scenario=scenario.name,
        kkt_threshold=KKT_THRESHOLD,
        final_kkt={"final": final, "pre_event_final": pre_final},
        consensus={"upsilon_spread": final["upsilon_spread"],
                   "rlambda_spread": final["rlambda_spread"]},
        convergence_times=conv,
        assumption_margins=margins,
        violations={"V_max": float(diag[:, -2].max()),
                    "Il_max": float(diag[:, -1].max())},
        lyapunov={"E_b_first": float(diag[0, -4]), "E_b_last": float(diag[-1, -4]),
                  "E_r_first": float(diag[0, -3]), "E_r_last": float(diag[-1, -3])},
        conservation=conservation,
        flags={
            "price_parameters": {"l": scenario.price.l, "p_r": scenario.price.p_r,
                                 "note": "base price l, sensitivity p_r"},
            "load_step_semantics":
                "Z_L and I_L reduced by the configured absolute amounts",
            "u_ref_nonzero": bool(np.any(scenario.plant.u_ref != 0.0)),
        },
        checks={},
        config={"dt": cfg.dt, "t_end": cfg.t_end, "method": cfg.method,
                "sample_period": cfg.sample_period,
                "eps_fast": cp.eps_fast, "eps_u": cp.eps_u,
                "events": [[ev.time, ev.d_IL, ev.d_ZL]
                           for ev in scenario.events]},
    )
    checks = report.checks
    checks["converged_all_segments"] = all(
        c["time"] is not None for c in conv)
    checks["boxes_at_equilibria"] = bool(
        pre_final.get("V_violation", 1.0) <= 1e-6
        and pre_final.get("Il_violation", 1.0) <= 1e-6
        and final["V_violation"] <= 1e-6 and final["Il_violation"] <= 1e-6)
    checks["upsilon_consensus"] = final["upsilon_spread"] < 1e-4
    checks["lambda_consensus"] = final["rlambda_spread"] < 1e-4
    checks["conservation"] = (conservation["nu_drift"] < 1e-9
                              and conservation["theta_drift"] < 1e-9)
    return report


def write_csv(path, traj: Trajectory, diag, g: GameDefinition, reduced=False):
    """Deterministic CSV: fixed header, 17-significant-digit floats."""
    cols = csv_header(g, reduced=reduced)
    with open(path, "w", newline="") as f:
        f.write(",".join(cols) + "\n")
        for k in range(traj.n_samples):
            row = np.concatenate([[traj.t[k]], traj.y[k], diag[k]])
            f.write(",".join("%.17g" % v for v in row) + "\n")
