"""Distributed controller dynamics.

Per agent: a fast consensus estimator tracking the total generated
current, an integrator-style control voltage fed by the grid current, a
decision copy of the agent's physical block descending its penalized
cost, coupling-constraint multipliers driven toward weighted consensus,
auxiliary consensus multipliers and a local-equality multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .game import GameDefinition, local_gradient, local_gradient_interval
from .topology import laplacian, laplacian_pinv


@dataclass(frozen=True)
class ControllerParams:
    """Time-scale constants: eps_fast scales the consensus estimator,
    eps_u couples the measured grid current into the voltage dynamics."""

    eps_fast: float = 0.01
    eps_u: float = 0.1

    def __post_init__(self):
        if self.eps_fast <= 0.0 or self.eps_u <= 0.0:
            raise ValueError("controller time-scale constants must be > 0")


@dataclass
class ControllerState:
    """Stacked controller state.

    upsilon, nu, u, gamma: (n,); xhat: agent-major (2n+m,);
    lam, theta: (n, n+m) with row i belonging to agent i.
    """

    upsilon: np.ndarray
    nu: np.ndarray
    u: np.ndarray
    xhat: np.ndarray
    lam: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("upsilon", "nu", "u", "xhat", "gamma"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.lam = np.asarray(self.lam, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)

    @classmethod
    def zeros(cls, g: GameDefinition):
        n, m = g.n, g.m
        return cls(np.zeros(n), np.zeros(n), np.zeros(n),
                   np.zeros(2 * n + m), np.zeros((n, n + m)),
                   np.zeros((n, n + m)), np.zeros(n))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.upsilon, self.nu, self.u, self.xhat,
                               self.lam.ravel(), self.theta.ravel(), self.gamma])

    @classmethod
    def from_vector(cls, y, g: GameDefinition):
        n, m = g.n, g.m
        sizes = [n, n, n, 2 * n + m, n * (n + m), n * (n + m), n]
        parts = np.split(np.asarray(y, dtype=float), np.cumsum(sizes)[:-1])
        return cls(parts[0], parts[1], parts[2], parts[3],
                   parts[4].reshape(n, n + m), parts[5].reshape(n, n + m),
                   parts[6])

    def copy(self):
        return ControllerState(self.upsilon.copy(), self.nu.copy(),
                               self.u.copy(), self.xhat.copy(),
                               self.lam.copy(), self.theta.copy(),
                               self.gamma.copy())

    @property
    def size(self):
        return self.to_vector().size


def controller_rhs(cs: ControllerState, plant_I, g: GameDefinition,
                   cp: ControllerParams) -> ControllerState:
    """Time derivative of the controller state.

    ``plant_I`` is the measured generated-current vector of the grid;
    the decision copy's own current estimate drives the consensus
    estimator.
    """
    plant_I = np.asarray(plant_I, dtype=float)
    n, m = g.n, g.m
    lay = g.layout
    w = g.weights
    con = g.constraints
    Lap = laplacian(g.comm_topo)
    Ihat = cs.xhat[lay.ix_I]

    d_ups = (-cs.upsilon - Lap @ cs.upsilon - Lap @ cs.nu + n * Ihat) / cp.eps_fast
    d_nu = (Lap @ cs.upsilon) / cp.eps_fast
    d_u = -w.alpha_u * cs.u + cs.gamma - cp.eps_u * plant_I

    Fbar = local_gradient(g, cs.xhat, cs.upsilon)
    r_row = w.r[lay.agent_of_pos]
    AtLam = con.AT_stack @ cs.lam.ravel()
    d_xhat = -r_row * Fbar - r_row * AtLam - cs.gamma[lay.agent_of_pos] * con.D_stack

    W = w.r[:, None] * cs.lam + cs.theta
    consensus = Lap @ W
    feas = (con.A_stack @ cs.xhat).reshape(n, n + m) - con.s_blocks_arr
    d_lam = w.r[:, None] * (feas - consensus)
    d_theta = Lap @ (w.r[:, None] * cs.lam)
    d_gamma = -cs.u + g.plant.R * Ihat + cs.xhat[lay.ix_V]
    return ControllerState(d_ups, d_nu, d_u, d_xhat, d_lam, d_theta, d_gamma)


def fast_equilibrium(Ihat, topo):
    """Quasi-steady state of the consensus estimator.

    Every agent's estimate equals the sum of the inputs; the auxiliary
    state solves ``L nu = n Ihat - upsilon`` on the zero-mean subspace,
    which zeroes the estimator dynamics.
    """
    Ihat = np.asarray(Ihat, dtype=float)
    n = topo.n
    ups = np.full(n, Ihat.sum())
    nu = laplacian_pinv(topo) @ (n * Ihat - ups)
    return ups, nu


@dataclass
class KktResidual:
    """Per-equation residual norms of the distributed optimality system."""

    lines: np.ndarray        # 7 entries, inf-norm over agents/components

    @property
    def max(self) -> float:
        return float(self.lines.max())


def kkt_residual(cs: ControllerState, g: GameDefinition,
                 cp: ControllerParams) -> KktResidual:
    """Distance of a controller state from the distributed optimality system.

    Lines 1-2: consensus-estimator stationarity; 3: voltage-dynamics
    stationarity (the current measurement replaced by the decision
    copy's, which coincides with it at any closed-loop equilibrium);
    4: penalized cost stationarity, measured as the distance from zero
    to the subdifferential interval; 5: local voltage balance; 6-7:
    multiplier feasibility and weighted consensus.
    """
    n, m = g.n, g.m
    lay = g.layout
    w = g.weights
    con = g.constraints
    Lap = laplacian(g.comm_topo)
    Ihat = cs.xhat[lay.ix_I]

    l1 = -cs.upsilon - Lap @ cs.upsilon - Lap @ cs.nu + n * Ihat
    l2 = Lap @ cs.upsilon
    l3 = -w.alpha_u * cs.u + cs.gamma - cp.eps_u * Ihat

    lo, hi = local_gradient_interval(g, cs.xhat, cs.upsilon)
    r_row = w.r[lay.agent_of_pos]
    AtLam = con.AT_stack @ cs.lam.ravel()
    shift = r_row * AtLam + cs.gamma[lay.agent_of_pos] * con.D_stack
    set_lo = r_row * lo + shift
    set_hi = r_row * hi + shift
    l4 = np.where(set_lo > 0.0, set_lo, np.where(set_hi < 0.0, -set_hi, 0.0))

    l5 = g.plant.R * Ihat + cs.xhat[lay.ix_V] - cs.u
    W = w.r[:, None] * cs.lam + cs.theta
    consensus = Lap @ W
    feas = (con.A_stack @ cs.xhat).reshape(n, n + m) - con.s_blocks_arr
    l6 = w.r[:, None] * (feas - consensus)
    l7 = Lap @ (w.r[:, None] * cs.lam)

    lines = np.array([
        np.abs(l1).max(), np.abs(l2).max(), np.abs(l3).max(),
        np.abs(l4).max(), np.abs(l5).max(), np.abs(l6).max(),
        np.abs(l7).max(),
    ])
    return KktResidual(lines)


def consensus_errors(cs: ControllerState, g: GameDefinition):
    """(estimate spread, weighted multiplier spread), both inf-norms."""
    ups_spread = float(cs.upsilon.max() - cs.upsilon.min())
    rl = g.weights.r[:, None] * cs.lam
    lam_spread = 0.0
    for i in range(g.n):
        for j in range(i + 1, g.n):
            lam_spread = max(lam_spread, float(np.abs(rl[i] - rl[j]).max()))
    return ups_spread, lam_spread
