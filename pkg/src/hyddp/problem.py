"""Optimal-control problem assembly for the hybrid trajectory optimizer.

A HybridProblem binds a plant, a mode schedule, and an AugmentedCostModel
into the interface the solver consumes: rollouts (open and closed loop),
per-step Jacobians grouped by mode, boundary cost expansions with reset-map
Jacobians, and total-cost evaluation.

In time-scaled form the state is augmented with one duration component per
mode; the duration block is constant along rollouts, the physical block's
Jacobians pick up a column equal to the (normalized-step-scaled) continuous
dynamics, and the running cost acquires duration derivatives through its
step-size weighting.  The problem supports replacing the timing vector while
keeping everything else, which is what the timing optimizer iterates on.
"""

from __future__ import annotations

import numpy as np

from hyddp.constraints import ALState, AugmentedCostModel, ReBState
from hyddp.costs import ModeQuadraticCost, total_base_cost
from hyddp.modes import (
    ModeSchedule,
    SwitchingResiduals,
    Trajectory,
    rollout_plant,
)
from hyddp.solver import BoundaryData, Policy, SweepData


class HybridProblem:
    """Solver-facing view of one fixed-schedule trajectory-optimization task."""

    def __init__(self, plant, schedule: ModeSchedule, cost: ModeQuadraticCost,
                 x0, h: float | None = None, scaled: bool = False,
                 al: ALState | None = None, reb: ReBState | None = None):
        self.plant = plant
        self.schedule = schedule
        self.base_cost = cost
        self.scaled = scaled
        self.h = h
        self.x0 = np.asarray(x0, dtype=float)
        self.n_phys = plant.nx
        self.nz = schedule.n_modes if scaled else 0
        self.nx = self.n_phys + self.nz
        self.nu = plant.nu
        if self.x0.shape != (self.nx,):
            raise ValueError(f"x0 must have dimension {self.nx}")
        if not scaled and (h is None or h <= 0.0):
            raise ValueError("discrete-time problems need a positive step h")
        self.cost_model = AugmentedCostModel(cost, plant, schedule,
                                             al=al, reb=reb, scaled=scaled)

    # -- construction helpers ---------------------------------------------

    def with_constraint_state(self, al: ALState | None,
                              reb: ReBState | None) -> "HybridProblem":
        return HybridProblem(self.plant, self.schedule, self.base_cost,
                             self.x0, h=self.h, scaled=self.scaled,
                             al=al, reb=reb)

    def with_timing(self, z) -> "HybridProblem":
        """Scaled problems only: replace the mode durations in x0 and schedule."""
        if not self.scaled:
            raise ValueError("timing replacement requires a time-scaled problem")
        z = np.asarray(z, dtype=float)
        if z.shape != (self.nz,) or np.any(z <= 0.0):
            raise ValueError("timing vector must be positive with one entry per mode")
        x0 = self.x0.copy()
        x0[self.n_phys:] = z
        schedule = self.schedule.with_durations(z)
        return HybridProblem(self.plant, schedule, self.base_cost, x0,
                             h=self.h, scaled=True,
                             al=self.cost_model.al, reb=self.cost_model.reb)

    @property
    def horizon(self) -> int:
        return self.schedule.horizon

    @property
    def z0(self) -> np.ndarray:
        return self.x0[self.n_phys:].copy()

    # -- rollouts -----------------------------------------------------------

    def rollout(self, U) -> Trajectory:
        U = np.asarray(U, dtype=float)
        return rollout_plant(self.plant, self.schedule, self.x0,
                             lambda k, s: U[k], h=self.h, scaled=self.scaled)

    def rollout_policy(self, nominal: Trajectory, policy: Policy,
                       eps: float, x0=None) -> Trajectory:
        """Closed-loop rollout u = u_nom + eps*kappa + K (s - s_nom)."""
        Un, Xs = nominal.U, nominal.Xs

        def control(k, s):
            return Un[k] + eps * policy.kappa[k] + policy.K[k] @ (s - Xs[k])

        start = self.x0 if x0 is None else np.asarray(x0, dtype=float)
        return rollout_plant(self.plant, self.schedule, start,
                             control, h=self.h, scaled=self.scaled)

    # -- cost and residuals ---------------------------------------------

    def total_cost(self, traj: Trajectory) -> float:
        return self.cost_model.total(traj)

    def base_cost_value(self, traj: Trajectory) -> float:
        return total_base_cost(traj, self.base_cost, self.schedule)

    def switching_residuals(self, traj: Trajectory) -> SwitchingResiduals:
        entries = self.schedule.touchdown_boundaries()
        modes = np.array([e[0] for e in entries], dtype=int)
        knots = np.array([e[1] for e in entries], dtype=int)
        feet = [e[2] for e in entries]
        values = np.array([
            self.plant.touchdown_residual(traj.X[k, :self.n_phys], f)[0]
            for k, f in zip(knots, feet)
        ])
        return SwitchingResiduals(modes, knots, feet, values)

    # -- solver data ------------------------------------------------------

    def sweep_data(self, traj: Trajectory) -> SweepData:
        N = traj.horizon
        nx, nu = self.nx, self.nu
        fx = np.zeros((N, nx, nx))
        fu = np.zeros((N, nx, nu))
        np_ = self.n_phys
        dt = traj.step_durations()
        bounds = (0,) + self.schedule.boundary_knots
        for i, mode in enumerate(self.schedule.modes):
            sel = slice(bounds[i], bounds[i + 1])
            Xp = traj.Xs[sel, :np_]
            U = traj.U[sel]
            pfx, pfu = self.plant.linearize(Xp, U, mode, dt[sel])
            fx[sel, :np_, :np_] = pfx
            fu[sel, :np_, :] = pfu
            if self.scaled:
                zc = np_ + i
                fx[sel, np_:, np_:] = np.eye(self.nz)
                deriv = self.plant.derivative(Xp, U, mode)
                fx[sel, :np_, zc] = deriv / self.schedule.knots[i]
        exp = self.cost_model.expansions(traj)

        boundaries = []
        n_modes = self.schedule.n_modes
        for i, knot in enumerate(self.schedule.boundary_knots):
            mode = self.schedule.modes[i]
            if i == n_modes - 1:
                P = None
            elif mode.has_impact_at_exit:
                P_phys = self.plant.reset_jacobian(traj.X[knot, :np_], mode)
                P = np.eye(nx)
                P[:np_, :np_] = P_phys
            else:
                P = np.eye(nx)
            boundaries.append(BoundaryData(knot=knot, phi=exp.phi[i],
                                           phix=exp.phix[i], phixx=exp.phixx[i],
                                           reset_jac=P))
        return SweepData(fx=fx, fu=fu, L=exp.L, Lx=exp.Lx, Lu=exp.Lu,
                         Lxx=exp.Lxx, Luu=exp.Luu, Lux=exp.Lux,
                         boundaries=boundaries)
