"""Per-mode quadratic tracking costs.

Running cost density within mode i is

    l_i(x, u) = (x - ref_i)' Q_i (x - ref_i) + u' R_i u

and every mode carries its own terminal cost

    Phi_i(x) = (x - ref_i)' Qf_i (x - ref_i)

evaluated at the mode's exit state before any reset.  Discrete knot costs are
the density times the knot's physical duration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hyddp.modes import ModeSchedule, Trajectory


def _check_symmetric(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class ModeQuadraticCost:
    """Weights and references, one entry per schedule mode."""

    Q: tuple[np.ndarray, ...]
    R: tuple[np.ndarray, ...]
    Qf: tuple[np.ndarray, ...]
    x_ref: tuple[np.ndarray, ...]

    def __post_init__(self):
        n = len(self.Q)
        if not (len(self.R) == len(self.Qf) == len(self.x_ref) == n):
            raise ValueError("per-mode weight lists must have equal length")
        object.__setattr__(self, "Q", tuple(_check_symmetric(M, "Q") for M in self.Q))
        object.__setattr__(self, "Qf", tuple(_check_symmetric(M, "Qf") for M in self.Qf))
        Rs = []
        for M in self.R:
            M = _check_symmetric(M, "R")
            if np.linalg.eigvalsh(M).min() <= 0.0:
                raise ValueError("R must be positive definite")
            Rs.append(M)
        object.__setattr__(self, "R", tuple(Rs))
        object.__setattr__(self, "x_ref",
                           tuple(np.asarray(r, dtype=float) for r in self.x_ref))

    @property
    def n_modes(self) -> int:
        return len(self.Q)

    def running(self, i: int, x, u) -> float:
        e = np.asarray(x, float) - self.x_ref[i]
        u = np.asarray(u, float)
        return float(e @ self.Q[i] @ e + u @ self.R[i] @ u)

    def running_expansion(self, i: int, x, u):
        e = np.asarray(x, float) - self.x_ref[i]
        u = np.asarray(u, float)
        val = float(e @ self.Q[i] @ e + u @ self.R[i] @ u)
        lx = 2.0 * self.Q[i] @ e
        lu = 2.0 * self.R[i] @ u
        return val, lx, lu, 2.0 * self.Q[i], 2.0 * self.R[i]

    def terminal(self, i: int, x) -> float:
        e = np.asarray(x, float) - self.x_ref[i]
        return float(e @ self.Qf[i] @ e)

    def terminal_expansion(self, i: int, x):
        e = np.asarray(x, float) - self.x_ref[i]
        return float(e @ self.Qf[i] @ e), 2.0 * self.Qf[i] @ e, 2.0 * self.Qf[i]


def uniform_cost(schedule_len: int, Q, R, Qf, x_ref) -> ModeQuadraticCost:
    """Same weights and reference for every mode."""
    Q = np.asarray(Q, float)
    R = np.asarray(R, float)
    Qf = np.asarray(Qf, float)
    x_ref = np.asarray(x_ref, float)
    return ModeQuadraticCost(
        Q=tuple(Q for _ in range(schedule_len)),
        R=tuple(R for _ in range(schedule_len)),
        Qf=tuple(Qf for _ in range(schedule_len)),
        x_ref=tuple(x_ref for _ in range(schedule_len)),
    )


def total_base_cost(traj: Trajectory, cost: ModeQuadraticCost,
                    schedule: ModeSchedule | None = None) -> float:
    """Sum of mode terminal costs and duration-weighted running costs.

    Running costs are evaluated at the post-reset knot states the steps
    depart from; terminal costs at the pre-reset mode-exit states.
    """
    schedule = schedule or traj.schedule
    if cost.n_modes != schedule.n_modes:
        raise ValueError("cost and schedule mode counts differ")
    nxp = traj.n_phys
    dt = traj.step_durations()
    mode_of_step = schedule.mode_of_step()
    total = 0.0
    for k in range(traj.horizon):
        i = int(mode_of_step[k])
        total += dt[k] * cost.running(i, traj.Xs[k, :nxp], traj.U[k])
    for i, knot in enumerate(schedule.boundary_knots):
        total += cost.terminal(i, traj.X[knot, :nxp])
    return float(total)
