import pytest
from dataclasses import replace

import gridtrade as gt
from gridtrade.scenarios import ring4


@pytest.fixture(scope="session")
def ref_scenario():
    return ring4()


@pytest.fixture(scope="session")
def ref_game(ref_scenario):
    return ref_scenario.game()


@pytest.fixture(scope="session")
def ref_cp(ref_scenario):
    return ref_scenario.controller


@pytest.fixture(scope="session")
def ref_post_game(ref_scenario):
    stepped = gt.apply_load_step(ref_scenario.plant, 3.0, 3.0)
    return ref_scenario.game(stepped)


@pytest.fixture(scope="session")
def ref_solution(ref_game):
    sol = gt.solve_vi(ref_game)
    assert sol.converged
    return sol


@pytest.fixture(scope="session")
def ref_attractor(ref_game, ref_cp):
    return gt.closed_loop_equilibrium(ref_game, ref_cp)


@pytest.fixture(scope="session")
def wide_box_game(ref_scenario):
    """Reference parameters with the boxes opened wide: interior equilibrium."""
    scn = ref_scenario
    dgus = [replace(d, V_min=-1e5, V_max=1e5) for d in scn.plant.dgus]
    lines = [replace(l, Il_min=-1e5, Il_max=1e5) for l in scn.plant.lines]
    return gt.build_game(scn.topo, gt.PlantParams(dgus, lines), scn.price,
                         scn.weights, scn.penalties, validate=False)


@pytest.fixture(scope="session")
def ref_run(tmp_path_factory):
    """One full default run of the reference scenario, shared read-only."""
    import time

    outdir = tmp_path_factory.mktemp("ref_run")
    scn = ring4()
    t0 = time.monotonic()
    traj, diag, report = gt.run_scenario(scn, outdir=str(outdir))
    runtime = time.monotonic() - t0
    return {"traj": traj, "diag": diag, "report": report,
            "outdir": outdir, "scenario": scn, "runtime": runtime}


def make_single_game(Z_L=1.0, I_L=2.0, R=1.0, alpha=(1.0, 1.0, 1.0),
                     l=1.0, p_r=1e-3, refs=(0.0, 0.0, 0.0),
                     V_box=(-1e4, 1e4), rho=100.0, r=1.0):
    """One DGU, no lines: closed-form comparisons stay hand-checkable."""
    topo = gt.MicrogridTopology(1, [], [])
    dgu = gt.DguParams(R=R, L=1.0, C=1.0, Z_L=Z_L, I_L=I_L,
                       V_min=V_box[0], V_max=V_box[1],
                       V_ref=refs[1], I_ref=refs[0], u_ref=refs[2])
    plant = gt.PlantParams([dgu], [])
    price = gt.PriceParams(l, p_r)
    weights = gt.ObjectiveWeights([r], [alpha[0]], [alpha[1]], [alpha[2]],
                                  [[]])
    pen = gt.PenaltyParams([rho], [])
    return gt.build_game(topo, plant, price, weights, pen, validate=False)


def make_pair_game(V_ref=0.0, I_L=(2.0, 3.0), Z_L=(1.0, 1.0),
                   alpha_I=2.0, alpha_V=1.0, alpha_u=1.0, alpha_Il=1.0,
                   r=(1.0, 1.0), l=1.0, p_r=0.01, rho_V=50.0, rho_Il=40.0,
                   V_box=(-1.0, 1.0), Il_box=(-5.0, 5.0)):
    """Two DGUs, one line managed by agent 1; zero references by default."""
    topo = gt.MicrogridTopology(2, [(1, 2)], [1])
    dgus = [gt.DguParams(R=0.1, L=1.0, C=1.0, Z_L=Z_L[i], I_L=I_L[i],
                         V_min=V_box[0], V_max=V_box[1], V_ref=V_ref)
            for i in range(2)]
    lines = [gt.LineParams(R=0.2, L=1e-3, Il_min=Il_box[0], Il_max=Il_box[1])]
    plant = gt.PlantParams(dgus, lines)
    weights = gt.ObjectiveWeights(list(r), [alpha_u] * 2, [alpha_I] * 2,
                                  [alpha_V] * 2, [[alpha_Il], []])
    pen = gt.PenaltyParams([rho_V] * 2, [rho_Il])
    return gt.build_game(topo, plant, gt.PriceParams(l, p_r), weights, pen,
                         validate=False)


@pytest.fixture
def pair_game():
    return make_pair_game()
