"""Deterministic ODE integration with parameter-swap events.

Fixed-step classic RK4 and adaptive Dormand-Prince RK45.  Samples and
events always land on step boundaries, so sampling never perturbs the
integration and repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class IntegrationError(RuntimeError):
    """Integration aborted; carries the last good sample."""

    def __init__(self, message, t_last=None, y_last=None, trajectory=None):
        super().__init__(message)
        self.t_last = t_last
        self.y_last = y_last
        self.trajectory = trajectory


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"          # "rk4" | "rk45"
    dt: float = 1e-5             # fixed step (rk4) / initial step (rk45)
    t_end: float = 10.0
    sample_period: float = 1e-3
    rtol: float = 1e-8
    atol: float = 1e-10

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.dt <= 0 or self.sample_period <= 0:
            raise ValueError("dt and sample_period must be > 0")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")


@dataclass
class Trajectory:
    """Sampled states; ``epoch[k]`` indexes the parameter era of row k.

    At an event time two rows are emitted with the same state, the first
    belonging to the old era and the second to the new one.
    """

    t: np.ndarray
    y: np.ndarray
    epoch: np.ndarray

    @property
    def n_samples(self):
        return len(self.t)


def _is_multiple(a, b, rel=1e-9):
    k = round(a / b)
    return abs(a - k * b) <= rel * max(1.0, abs(a))


def rk4_step(rhs, t, y, dt, ctx):
    k1 = rhs(t, y, ctx)
    k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1, ctx)
    k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2, ctx)
    k4 = rhs(t + dt, y + dt * k3, ctx)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Dormand-Prince 5(4) tableau
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
          187 / 2100, 1 / 40)


def _rk45_step(rhs, t, y, dt, ctx):
    k = []
    for i in range(7):
        yi = y.copy()
        for j, a in enumerate(_DP_A[i]):
            yi += dt * a * k[j]
        k.append(rhs(t + _DP_C[i] * dt, yi, ctx))
    y5 = y + dt * sum(b * ki for b, ki in zip(_DP_B5, k))
    y4 = y + dt * sum(b * ki for b, ki in zip(_DP_B4, k))
    return y5, y5 - y4


def integrate(rhs, y0, config: IntegratorConfig, events=(), ctx=None,
              on_event=None):
    """Integrate ``dy/dt = rhs(t, y, ctx)`` with sampled output.

    ``events`` is a sequence of (time, payload) with strictly increasing
    times inside (0, t_end]; at each event the context is replaced by
    ``on_event(ctx, payload)`` with the state left continuous.  For the
    fixed-step method, sample times and event times must sit on the step
    grid and events on the sample grid.  Returns a :class:`Trajectory`
    whose rows are step boundaries at multiples of ``sample_period``
    (plus duplicated event rows).
    """
    y = np.asarray(y0, dtype=float).copy()
    cfg = config
    times = [e[0] for e in events]
    if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
        raise ValueError("event times must be strictly increasing")
    if any(not (0.0 < t <= cfg.t_end) for t in times):
        raise ValueError("event times must lie in (0, t_end]")
    for t in times:
        if not _is_multiple(t, cfg.sample_period):
            raise ValueError(f"event time {t} not on the sample grid")
    if cfg.method == "rk4":
        if not _is_multiple(cfg.sample_period, cfg.dt):
            raise ValueError("sample_period must be an integer multiple of dt")
        for t in times:
            if not _is_multiple(t, cfg.dt):
                raise ValueError(f"event time {t} not on the step grid")

    rows_t = [0.0]
    rows_y = [y.copy()]
    rows_e = [0]
    if not np.isfinite(y).all():
        raise IntegrationError("initial state is not finite", 0.0, y)
    if cfg.t_end == 0.0:
        return Trajectory(np.array(rows_t), np.array(rows_y), np.array(rows_e))

    boundaries = sorted(set(times) | {cfg.t_end})
    epoch = 0
    t0 = 0.0
    ev_iter = list(events)
    traj_err = None
    for t1 in boundaries:
        seg = t1 - t0
        n_samples = round(seg / cfg.sample_period)
        if cfg.method == "rk4":
            per = round(cfg.sample_period / cfg.dt)
            for s in range(n_samples):
                base = t0 + s * cfg.sample_period
                for k in range(per):
                    y = rk4_step(rhs, base + k * cfg.dt, y, cfg.dt, ctx)
                ts = t0 + (s + 1) * cfg.sample_period
                if not np.isfinite(y).all():
                    traj_err = ts
                    break
                rows_t.append(ts)
                rows_y.append(y.copy())
                rows_e.append(epoch)
            if traj_err is not None:
                break
        else:
            dt = cfg.dt
            for s in range(n_samples):
                ts_target = t0 + (s + 1) * cfg.sample_period
                t = t0 + s * cfg.sample_period
                while t < ts_target - 1e-15 * max(1.0, ts_target):
                    h = min(dt, ts_target - t)
                    y_new, err = _rk45_step(rhs, t, y, h, ctx)
                    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y),
                                                             np.abs(y_new))
                    enorm = float(np.sqrt(np.mean((err / scale) ** 2)))
                    if enorm <= 1.0 or h < 1e-14:
                        y = y_new
                        t += h
                    fac = 0.9 * (enorm ** -0.2) if enorm > 0 else 5.0
                    dt = h * min(5.0, max(0.2, fac))
                if not np.isfinite(y).all():
                    traj_err = ts_target
                    break
                rows_t.append(ts_target)
                rows_y.append(y.copy())
                rows_e.append(epoch)
            if traj_err is not None:
                break
        # era swap at the boundary (state continuous)
        if t1 in times:
            payload = ev_iter[times.index(t1)][1]
            if on_event is not None:
                ctx = on_event(ctx, payload)
            epoch += 1
            rows_t.append(t1)
            rows_y.append(y.copy())
            rows_e.append(epoch)
        t0 = t1
    traj = Trajectory(np.array(rows_t), np.array(rows_y),
                      np.array(rows_e, dtype=int))
    if traj_err is not None:
        raise IntegrationError(
            f"non-finite state at t={traj_err:.6g}; last good sample at "
            f"t={rows_t[-1]:.6g}", rows_t[-1], rows_y[-1], traj)
    return traj
