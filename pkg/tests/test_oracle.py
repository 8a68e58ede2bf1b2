import numpy as np
import pytest

import gridtrade as gt
from gridtrade import ControllerParams, affine_kkt_solve, \
    closed_loop_equilibrium, lyapunov_diagnostics, recover_multipliers, \
    reduced_model_rhs, solve_vi
from gridtrade.controller import ControllerState, controller_rhs
from gridtrade.oracle import FeasibleSetProjector, _affine_rows, _box_bounds, \
    boundary_layer_energy_matrix
from gridtrade.plant import PlantState

from conftest import make_single_game

CP = ControllerParams(0.01, 0.1)


def scaled_game(scn, factor):
    w = scn.weights
    weights = gt.ObjectiveWeights(w.r * factor, w.alpha_u, w.alpha_I,
                                  w.alpha_V, [a.copy() for a in w.alpha_Il])
    return gt.build_game(scn.topo, scn.plant, scn.price, weights,
                         scn.penalties, validate=False)


class TestSolveVi:
    def test_single_agent_closed_form(self):
        # one DGU, no lines: on the feasible line x = (I, Z(I-IL)),
        # u = V + R I, the equilibrium current solves a scalar equation.
        Z, IL, R = 2.0, 3.0, 0.5
        aU, aI, aV = 1.3, 2.0, 0.7
        l, p_r = 2.0, 1e-2
        Vr, Ir, ur = 1.5, 0.5, 0.2
        g = make_single_game(Z_L=Z, I_L=IL, R=R, alpha=(aU, aI, aV),
                             l=l, p_r=p_r, refs=(Ir, Vr, ur))
        # dh/dI = aU(Z(I-IL)+RI-ur)(Z+R) + aI(I-Ir) + aV(Z(I-IL)-Vr)Z
        #         - l*Vr + 2 p_r Vr I = 0, linear in I
        coef = aU * (Z + R) ** 2 + aI + aV * Z ** 2 + 2 * p_r * Vr
        const = (-aU * (Z + R) * (Z * IL + ur) * -1.0  # expanded below
                 )
        # assemble constants explicitly
        const = (aU * (Z + R) * (-Z * IL - ur) + aI * (-Ir)
                 + aV * Z * (-Z * IL - Vr) - l * Vr)
        I_star = -const / coef
        V_star = Z * (I_star - IL)
        u_star = V_star + R * I_star
        sol = solve_vi(g, tol=1e-12)
        assert sol.converged
        assert sol.u_star[0] == pytest.approx(u_star, abs=1e-8)
        assert sol.x_star[0] == pytest.approx(I_star, abs=1e-8)
        assert sol.x_star[1] == pytest.approx(V_star, abs=1e-8)

    def test_wide_boxes_match_direct_solve(self, wide_box_game):
        sol = solve_vi(wide_box_game)
        u, x, lam, gamma, _ = affine_kkt_solve(wide_box_game)
        assert np.abs(sol.u_star - u).max() < 1e-8
        assert np.abs(sol.x_star - x).max() < 1e-8
        assert np.abs(sol.lambda_star - lam).max() < 1e-6

    def test_wide_boxes_match_hand_assembled_kkt(self, wide_box_game):
        """Independent dense assembly of the stationarity system."""
        g = wide_box_game
        lay = g.layout
        w = g.weights
        p = g.plant
        n, m = g.n, g.m
        nz = n + lay.size
        # z agent-major: (u_i, I_i, V_i, lines...); build G, g0 by hand
        G = np.zeros((nz, nz))
        g0 = np.zeros(nz)
        zu = []
        zx = np.zeros(lay.size, dtype=int)
        pos = 0
        for i in range(n):
            zu.append(pos)
            pos += 1
            for j in range(int(lay.dims[i])):
                zx[int(lay.offsets[i]) + j] = pos
                pos += 1
        zu = np.array(zu)
        for i in range(n):
            G[zu[i], zu[i]] = w.r[i] * w.alpha_u[i]
            g0[zu[i]] = -w.r[i] * w.alpha_u[i] * p.u_ref[i]
        for i in range(n):
            for j in range(n):
                G[zx[lay.ix_I[i]], zx[lay.ix_I[j]]] = \
                    w.r[i] * g.price.p_r * p.V_ref[i]
            G[zx[lay.ix_I[i]], zx[lay.ix_I[i]]] += \
                w.r[i] * (w.alpha_I[i] + g.price.p_r * p.V_ref[i])
            g0[zx[lay.ix_I[i]]] = w.r[i] * (-w.alpha_I[i] * p.I_ref[i]
                                            - p.V_ref[i] * g.price.l)
            G[zx[lay.ix_V[i]], zx[lay.ix_V[i]]] = w.r[i] * w.alpha_V[i]
            g0[zx[lay.ix_V[i]]] = -w.r[i] * w.alpha_V[i] * p.V_ref[i]
        for k in range(m):
            pos_k = zx[lay.ix_line[k]]
            G[pos_k, pos_k] = g.r_edge[k] * g.alpha_Il_edge[k]
            g0[pos_k] = -g.r_edge[k] * g.alpha_Il_edge[k] * p.Il_ref[k]
        Mc = np.zeros((n + m + n, nz))
        Mc[:n + m, zx] = g.constraints.A_full
        for i in range(n):
            Mc[n + m + i, zx[lay.block(i + 1)]] = g.constraints.D[i]
            Mc[n + m + i, zu[i]] = -1.0
        cc = np.concatenate([g.constraints.s_A_full, np.zeros(n)])
        k = Mc.shape[0]
        K = np.block([[G, Mc.T], [Mc, np.zeros((k, k))]])
        sol_lin = np.linalg.solve(K, np.concatenate([-g0, cc]))
        z = sol_lin[:nz]
        sol = solve_vi(g)
        assert np.abs(sol.u_star - z[zu]).max() < 1e-8
        assert np.abs(sol.x_star - z[zx]).max() < 1e-8

    def test_reference_scenario_boxes(self, ref_solution, ref_game):
        lay = ref_game.layout
        I, V, Il = lay.split(ref_solution.x_star)
        assert (V >= 377.0 - 1e-9).all() and (V <= 383.0 + 1e-9).all()
        assert (np.abs(Il) <= 20.0 + 1e-9).all()
        assert V[0] == pytest.approx(377.0, abs=1e-9)  # lower bound active
        assert V[1] > 377.0 + 1e-3                     # others interior

    def test_post_step_boxes(self, ref_post_game):
        sol = solve_vi(ref_post_game)
        lay = ref_post_game.layout
        I, V, Il = lay.split(sol.x_star)
        assert sol.converged
        assert (V >= 377.0 - 1e-9).all() and (V <= 383.0 + 1e-9).all()
        assert (np.abs(Il) <= 20.0 + 1e-9).all()

    def test_deterministic(self, ref_game):
        a = solve_vi(ref_game)
        b = solve_vi(ref_game)
        assert np.array_equal(a.u_star, b.u_star)
        assert np.array_equal(a.x_star, b.x_star)
        assert a.iterations == b.iterations

    def test_iteration_budget_flag(self, ref_game):
        sol = solve_vi(ref_game, tol=1e-300, max_iter=5, recover=False)
        assert not sol.converged
        assert sol.iterations == 5
        assert np.isfinite(sol.u_star).all()

    def test_uniform_weight_scaling_invariance(self, ref_scenario,
                                               ref_solution):
        g3 = scaled_game(ref_scenario, 3.0)
        sol3 = solve_vi(g3)
        assert np.abs(sol3.u_star - ref_solution.u_star).max() < 1e-6
        assert np.abs(sol3.x_star - ref_solution.x_star).max() < 1e-6
        ratio = sol3.lambda_star / ref_solution.lambda_star
        assert np.allclose(ratio, 3.0, rtol=1e-6)

    def test_residual_history_monotone_after_burn_in(self, ref_game):
        sol = solve_vi(ref_game, return_history=True)
        hist = np.array(sol.history[10:])
        assert ((hist[1:] - hist[:-1]) <= 1e-12 + 1e-6 * hist[:-1]).all()

    def test_empty_feasible_set_diagnosed(self, ref_scenario):
        # disjoint voltage windows force line currents beyond their box
        scn = ref_scenario
        dgus = list(scn.plant.dgus)
        from dataclasses import replace

        dgus[1] = replace(dgus[1], V_min=500.0, V_max=510.0, V_ref=505.0)
        plant = gt.PlantParams(dgus, scn.plant.lines)
        g = gt.build_game(scn.topo, plant, scn.price, scn.weights,
                          scn.penalties, validate=False)
        with pytest.raises(RuntimeError, match="empty"):
            solve_vi(g)


class TestProjector:
    def test_idempotent_on_feasible_point(self, ref_game, ref_solution):
        g = ref_game
        zl, M, c = _affine_rows(g)
        lo, hi = _box_bounds(g, zl)
        proj = FeasibleSetProjector(M, c, lo, hi)
        z = zl.join(ref_solution.u_star, ref_solution.x_star)
        assert np.abs(proj.project(z) - z).max() < 1e-10

    def test_projection_feasible(self, ref_game):
        g = ref_game
        zl, M, c = _affine_rows(g)
        lo, hi = _box_bounds(g, zl)
        proj = FeasibleSetProjector(M, c, lo, hi)
        rng = np.random.default_rng(9)
        z = proj.project(rng.normal(scale=500, size=zl.size))
        assert (z >= lo - 1e-9).all() and (z <= hi + 1e-9).all()
        assert np.abs(M @ z - c).max() < 1e-8


class TestRecoverMultipliers:
    def test_interior_exact(self, wide_box_game):
        sol = solve_vi(wide_box_game)
        rec = sol.recovery
        assert rec.residual < 1e-8
        assert not rec.rank_deficient
        assert rec.box_forces.size == 0

    def test_gamma_formula(self, ref_solution, ref_game):
        w = ref_game.weights
        expected = -w.r * w.alpha_u * (ref_solution.u_star
                                       - ref_game.plant.u_ref)
        assert np.abs(ref_solution.gamma_star - expected).max() < 1e-8

    def test_degenerate_game_zero_multipliers(self):
        # references feasible and no trading term: nothing to price
        R, Z, IL = 0.5, 1.0, 2.0
        g = make_single_game(Z_L=Z, I_L=IL, R=R, alpha=(1.0, 1.0, 1.0),
                             l=1.0, p_r=1e-3,
                             refs=(IL, 0.0, R * IL))  # V_ref=0 kills trading
        sol = solve_vi(g, tol=1e-12)
        assert np.abs(sol.lambda_star).max() < 1e-7
        assert np.abs(sol.gamma_star).max() < 1e-7

    def test_reference_scenario_rank_and_force(self, ref_solution,
                                               ref_game):
        rec = ref_solution.recovery
        assert rec.rank == ref_game.n + ref_game.m
        assert not rec.rank_deficient
        assert rec.residual < 1e-8
        # the single active bound needs more force than the penalty offers
        assert rec.box_forces.size == 1
        cap = ref_game.weights.r[0] * ref_game.penalties.rho_V[0]
        assert rec.box_forces[0] > cap


class TestClosedLoopEquilibrium:
    def test_reference_regimes(self, ref_attractor, ref_game):
        eq = ref_attractor
        assert eq.regimes == ("saturated", "interior", "interior", "kink")
        lay = ref_game.layout
        V = eq.x_star[lay.ix_V]
        assert V[0] < 377.0          # saturated penalty cannot hold the box
        assert V[3] == 377.0
        force = eq.kink_forces[4]
        cap = ref_game.weights.r[3] * ref_game.penalties.rho_V[3]
        assert -cap <= force <= 0.0

    def test_matches_oracle_when_penalties_suffice(self, ref_scenario,
                                                   ref_solution):
        # raising the voltage penalty above the required force restores
        # the projected-equilibrium / penalized-flow equivalence
        scn = ref_scenario
        pen = gt.PenaltyParams([2500.0] * 4, scn.penalties.rho_Il)
        g = gt.build_game(scn.topo, scn.plant, scn.price, scn.weights, pen)
        eq = closed_loop_equilibrium(g, CP)
        assert "saturated" not in eq.regimes
        gap_u = np.abs(eq.u_star - ref_solution.u_star).max()
        gap_x = np.abs(eq.x_star - ref_solution.x_star).max()
        # residual gap stems only from the measured-current coupling eps_u
        assert gap_u < 0.05
        assert gap_x < 0.15

    def test_plant_state_consistency(self, ref_attractor, ref_scenario):
        eq = ref_attractor
        d = gt.plant_rhs(eq.plant, eq.u_star, ref_scenario.plant,
                         ref_scenario.topo)
        p = ref_scenario.plant
        balance = np.concatenate([d.I * p.L, d.V * p.C, d.I_l * p.L_l])
        assert np.abs(balance).max() < 1e-8


class TestReducedModel:
    def test_zero_at_interior_attractor(self, wide_box_game):
        eq = closed_loop_equilibrium(wide_box_game, CP)
        d_plant, d_cs = reduced_model_rhs(eq.plant, eq.controller,
                                          wide_box_game, CP)
        assert np.abs(d_plant.to_vector()).max() < 1e-7
        assert np.abs(d_cs.to_vector()).max() < 1e-7

    def test_substitution_identity(self, ref_game):
        """Reduced slow rows equal the full rows with the estimator at QSS."""
        rng = np.random.default_rng(12)
        cs = ControllerState.from_vector(
            rng.normal(scale=100, size=ControllerState.zeros(ref_game).size),
            ref_game)
        plant = PlantState(*np.split(rng.normal(scale=100, size=12), [4, 8]))
        _, d_red = reduced_model_rhs(plant, cs, ref_game, CP)
        qss = cs.copy()
        qss.upsilon = np.full(4, cs.xhat[ref_game.layout.ix_I].sum())
        d_full = controller_rhs(qss, plant.I, ref_game, CP)
        for name in ("u", "xhat", "lam", "theta", "gamma"):
            assert np.array_equal(getattr(d_red, name), getattr(d_full, name))
        assert np.array_equal(d_red.upsilon, np.zeros(4))


class TestLyapunovDiagnostics:
    def test_zero_at_interior_attractor(self, wide_box_game):
        eq = closed_loop_equilibrium(wide_box_game, CP)
        E_b, E_r = lyapunov_diagnostics(eq.plant, eq.controller,
                                        wide_box_game, CP)
        assert E_b == pytest.approx(0.0, abs=1e-9)
        assert E_r == pytest.approx(0.0, abs=1e-9)

    def test_energy_matrix_psd(self, ref_game):
        Q = boundary_layer_energy_matrix(ref_game)
        assert np.linalg.eigvalsh(Q).min() > -1e-12

    def test_nonnegative_on_random_states(self, ref_game):
        rng = np.random.default_rng(14)
        Q = boundary_layer_energy_matrix(ref_game)
        for _ in range(50):
            s = rng.normal(scale=100, size=8)
            assert s @ Q @ s >= -1e-9
