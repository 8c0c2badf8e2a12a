"""Mode schedules, trajectories, and hybrid rollouts.

A hybrid trajectory is a fixed ordered sequence of continuous modes connected
by reset maps.  Each mode owns a contact set; crossing from a flight mode into
a stance mode applies the touchdown impact, while stance-to-flight exits are
continuous.  Two rollout parameterizations are supported:

* discrete time: every mode integrates its scheduled knot count at a fixed
  physical step h;
* time-scaled: every mode occupies a unit interval of normalized time with a
  fixed knot count, the physical mode durations ride along as extra constant
  state components, and the dynamics are multiplied by the mode duration.

Trajectories store the arriving (pre-reset) state at every knot plus the
post-reset state actually stepped from, so value-function bookkeeping across
reset maps needs no recomputation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from hyddp import dynamics as dyn
from hyddp.dynamics import RobotModel

_DIVERGENCE_LIMIT = 1e8


class RolloutError(RuntimeError):
    """Dynamics failure during a rollout, annotated with knot and mode."""

    def __init__(self, message: str, knot: int, mode_index: int):
        super().__init__(f"{message} (knot {knot}, mode {mode_index})")
        self.knot = knot
        self.mode_index = mode_index


@dataclass(frozen=True)
class Mode:
    kind: str
    contacts: tuple[str, ...] = ()
    touchdown_foot: str | None = None
    has_impact_at_exit: bool = False

    def __post_init__(self):
        if len(set(self.contacts)) != len(self.contacts):
            raise ValueError("duplicate contact identifiers in mode")
        if self.has_impact_at_exit and self.touchdown_foot is None:
            raise ValueError("impact at exit requires a touchdown foot")


@dataclass(frozen=True)
class ModeSchedule:
    """Ordered mode sequence with per-mode knot counts and durations."""

    modes: tuple[Mode, ...]
    knots: tuple[int, ...]
    durations: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "knots", tuple(int(k) for k in self.knots))
        object.__setattr__(self, "durations", tuple(float(t) for t in self.durations))
        if not (len(self.modes) == len(self.knots) == len(self.durations)):
            raise ValueError("modes, knots, durations must have equal length")
        if not self.modes:
            raise ValueError("schedule must contain at least one mode")
        if any(k <= 0 for k in self.knots):
            raise ValueError("knot counts must be strictly positive")
        if any(t <= 0 for t in self.durations):
            raise ValueError("mode durations must be strictly positive")

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def horizon(self) -> int:
        return int(sum(self.knots))

    @property
    def boundary_knots(self) -> tuple[int, ...]:
        """Cumulative knot indices N_1 .. N_n marking each mode's exit."""
        return tuple(np.cumsum(self.knots).tolist())

    @property
    def total_time(self) -> float:
        return float(sum(self.durations))

    def mode_of_step(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_modes), self.knots)

    def touchdown_boundaries(self) -> list[tuple[int, int, str]]:
        """(mode index, exit knot, foot) for every scheduled touchdown."""
        bounds = self.boundary_knots
        return [(i, bounds[i], m.touchdown_foot)
                for i, m in enumerate(self.modes) if m.touchdown_foot is not None]

    def with_durations(self, durations) -> "ModeSchedule":
        return replace(self, durations=tuple(float(t) for t in durations))

    def to_dict(self) -> dict:
        return {
            "modes": [
                {
                    "kind": m.kind,
                    "contacts": list(m.contacts),
                    "touchdown_foot": m.touchdown_foot,
                    "has_impact_at_exit": m.has_impact_at_exit,
                    "knots": k,
                    "duration": t,
                }
                for m, k, t in zip(self.modes, self.knots, self.durations)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModeSchedule":
        modes, knots, durations = [], [], []
        for entry in data["modes"]:
            modes.append(Mode(
                kind=entry["kind"],
                contacts=tuple(entry.get("contacts", ())),
                touchdown_foot=entry.get("touchdown_foot"),
                has_impact_at_exit=bool(entry.get("has_impact_at_exit", False)),
            ))
            knots.append(int(entry["knots"]))
            durations.append(float(entry["duration"]))
        return cls(tuple(modes), tuple(knots), tuple(durations))


@dataclass
class Trajectory:
    """Rollout record: per-knot states, controls, and contact forces.

    X[k] is the state arriving at knot k (pre-reset at mode boundaries);
    Xs[k] is the state the step at knot k actually departs from (post-reset).
    They differ only at touchdown knots.  For time-scaled rollouts the state
    carries the mode-duration components after the physical state.
    """

    X: np.ndarray
    Xs: np.ndarray
    U: np.ndarray
    forces: np.ndarray                  # (N, n_feet, 2)
    active_feet: np.ndarray             # (N, n_feet) bool
    impulses: dict[int, tuple[str, np.ndarray]]
    schedule: ModeSchedule
    h: float | None                     # physical step (None when scaled)
    scaled: bool = False
    n_phys: int = dyn.NX

    @property
    def horizon(self) -> int:
        return self.U.shape[0]

    @property
    def z(self) -> np.ndarray | None:
        """Mode-duration state components (scaled rollouts only)."""
        if not self.scaled:
            return None
        return self.X[0, self.n_phys:].copy()

    def step_durations(self) -> np.ndarray:
        """Physical time advanced by each knot's step."""
        if self.scaled:
            per_mode = self.z / np.asarray(self.schedule.knots, dtype=float)
            return np.repeat(per_mode, self.schedule.knots)
        return np.full(self.horizon, self.h)

    def knot_times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.step_durations())])


# -----------------------------------------------------------------------------
# Plants: the per-mode dynamics/reset providers driving the rollout engine
# -----------------------------------------------------------------------------

class RobotPlant:
    """Hybrid-dynamics hooks for the planar bounding robot."""

    n_feet = len(dyn.FEET)

    def __init__(self, model: RobotModel):
        self.model = model
        self.nx = dyn.NX
        self.nu = dyn.NU
        self.u_max = model.u_max

    def derivative(self, x, u, mode: Mode):
        return dyn.continuous_dynamics(self.model, x, u, mode.contacts)

    def derivative_with_forces(self, x, u, mode: Mode):
        sol = dyn.contact_dynamics(self.model, x, u, mode.contacts,
                                   check_conditioning=False)
        xdot = np.concatenate([np.asarray(x, float)[..., dyn.NQ:], sol.qdd], axis=-1)
        forces = np.zeros(np.shape(x)[:-1] + (self.n_feet, 2))
        for row, foot in enumerate(mode.contacts):
            forces[..., dyn.FEET.index(foot), :] = sol.forces[..., row, :]
        return xdot, forces

    def reset(self, x, exiting_mode: Mode):
        x_plus, impulse = dyn.impact_map(self.model, x, exiting_mode.touchdown_foot)
        return x_plus, impulse

    def reset_jacobian(self, x, exiting_mode: Mode):
        return dyn.reset_jacobian(self.model, x, exiting_mode.touchdown_foot)

    def linearize(self, X, U, mode: Mode, dt):
        return dyn.linearize_steps(self.model, X, U, mode.contacts, dt)

    def touchdown_residual(self, x, foot: str):
        """Gap residual g(x) with gradient and Hessian over the full state."""
        q = np.asarray(x, float)[:dyn.NQ]
        g = float(dyn.gap(self.model, q, foot))
        gx = np.zeros(dyn.NX)
        gx[:dyn.NQ] = dyn.gap_gradient(self.model, q, foot)
        gxx = np.zeros((dyn.NX, dyn.NX))
        gxx[:dyn.NQ, :dyn.NQ] = dyn.gap_hessian(self.model, q, foot)
        return g, gx, gxx


class CallablePlant:
    """Generic plant built from a continuous dynamics callable.

    Used for synthetic problems (linear systems, integrators).  Resets default
    to identity; an optional per-mode-kind linear reset matrix and touchdown
    residual callable can be supplied.  Linearization is central-differenced
    unless an analytic (A, B) provider is given.
    """

    n_feet = 0

    def __init__(self, nx, nu, f, u_max=None, resets=None, residuals=None,
                 linearizer=None, fd_step=1e-6):
        self.nx = int(nx)
        self.nu = int(nu)
        self.f = f
        self.u_max = u_max
        self.resets = resets or {}
        self.residuals = residuals or {}
        self.linearizer = linearizer
        self.fd_step = fd_step

    def derivative(self, x, u, mode: Mode):
        return self.f(x, u, mode.kind)

    def derivative_with_forces(self, x, u, mode: Mode):
        return self.f(x, u, mode.kind), np.zeros(np.shape(x)[:-1] + (0, 2))

    def reset(self, x, exiting_mode: Mode):
        A = self.resets.get(exiting_mode.kind)
        if A is None:
            return np.asarray(x, float).copy(), np.zeros(2)
        return A @ np.asarray(x, float), np.zeros(2)

    def reset_jacobian(self, x, exiting_mode: Mode):
        A = self.resets.get(exiting_mode.kind)
        return np.eye(self.nx) if A is None else np.asarray(A, float)

    def linearize(self, X, U, mode: Mode, dt):
        X = np.atleast_2d(X)
        U = np.atleast_2d(U)
        n = X.shape[0]
        dt = np.broadcast_to(np.asarray(dt, float), (n,))
        if self.linearizer is not None:
            A, B = self.linearizer(X, U, mode.kind)
            fx = np.eye(self.nx) + dt[:, None, None] * A
            fu = dt[:, None, None] * B
            return fx, fu
        fx = np.empty((n, self.nx, self.nx))
        fu = np.empty((n, self.nx, self.nu))
        for j in range(self.nx):
            e = self.fd_step * np.maximum(1.0, np.abs(X[:, j]))
            Xp, Xm = X.copy(), X.copy()
            Xp[:, j] += e
            Xm[:, j] -= e
            d = self.f(Xp, U, mode.kind) - self.f(Xm, U, mode.kind)
            fx[:, :, j] = dt[:, None] * d / (2 * e[:, None])
            fx[:, j, j] += 1.0
        for j in range(self.nu):
            e = self.fd_step * np.maximum(1.0, np.abs(U[:, j]))
            Up, Um = U.copy(), U.copy()
            Up[:, j] += e
            Um[:, j] -= e
            d = self.f(X, Up, mode.kind) - self.f(X, Um, mode.kind)
            fu[:, :, j] = dt[:, None] * d / (2 * e[:, None])
        return fx, fu

    def touchdown_residual(self, x, label):
        value, grad, hess = self.residuals[label](np.asarray(x, float))
        return float(value), np.asarray(grad, float), np.asarray(hess, float)


# -----------------------------------------------------------------------------
# Rollout engine
# -----------------------------------------------------------------------------

def rollout_plant(plant, schedule: ModeSchedule, x0, control_fn,
                  h: float | None = None, scaled: bool = False) -> Trajectory:
    """Integrate a hybrid trajectory, applying resets at mode boundaries.

    control_fn(k, s) -> u receives the post-reset state the step departs
    from.  For scaled rollouts x0 must already carry the duration components
    and h is ignored (each mode spans a unit normalized-time interval).
    """
    n_phys = plant.nx
    nz = schedule.n_modes if scaled else 0
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (n_phys + nz,):
        raise ValueError(f"initial state must have dimension {n_phys + nz}")
    if scaled and np.any(x[n_phys:] <= 0.0):
        raise ValueError("mode durations in the augmented state must be positive")
    if not scaled and (h is None or h <= 0.0):
        raise ValueError("discrete rollout requires a positive step h")

    N = schedule.horizon
    X = np.empty((N + 1, x.size))
    Xs = np.empty_like(X)
    U = np.empty((N, plant.nu))
    forces = np.zeros((N, plant.n_feet, 2))
    active_feet = np.zeros((N, plant.n_feet), dtype=bool)
    impulses: dict[int, tuple[str, np.ndarray]] = {}

    X[0] = x
    k = 0
    for i, mode in enumerate(schedule.modes):
        if i > 0 and schedule.modes[i - 1].has_impact_at_exit:
            prev = schedule.modes[i - 1]
            try:
                x_phys, impulse = plant.reset(X[k, :n_phys], prev)
            except dyn.ContactSolveError as exc:
                raise RolloutError(str(exc), k, i) from exc
            x = X[k].copy()
            x[:n_phys] = x_phys
            impulses[k] = (prev.touchdown_foot, np.asarray(impulse, float))
        else:
            x = X[k].copy()
        Xs[k] = x

        dt = x[n_phys + i] / schedule.knots[i] if scaled else h
        stance_rows = [dyn.FEET.index(f) for f in mode.contacts] if plant.n_feet else []
        for j in range(schedule.knots[i]):
            u = np.asarray(control_fn(k, Xs[k]), dtype=float)
            U[k] = u
            try:
                xdot, f_k = plant.derivative_with_forces(x[:n_phys], u, mode)
            except dyn.ContactSolveError as exc:
                raise RolloutError(str(exc), k, i) from exc
            forces[k] = f_k
            for row in stance_rows:
                active_feet[k, row] = True
            x_next = x.copy()
            x_next[:n_phys] = x[:n_phys] + dt * xdot
            if not np.all(np.isfinite(x_next)) or np.abs(x_next).max() > _DIVERGENCE_LIMIT:
                raise RolloutError("state diverged", k, i)
            X[k + 1] = x_next
            if j != schedule.knots[i] - 1:
                Xs[k + 1] = x_next
            x = x_next
            k += 1
    Xs[N] = X[N]
    return Trajectory(X=X, Xs=Xs, U=U, forces=forces, active_feet=active_feet,
                      impulses=impulses, schedule=schedule, h=None if scaled else h,
                      scaled=scaled, n_phys=n_phys)


def rollout(model: RobotModel, schedule: ModeSchedule, U, x0, h: float) -> Trajectory:
    """Open-loop discrete-time rollout of the robot through the schedule."""
    U = np.asarray(U, dtype=float)
    if U.shape != (schedule.horizon, dyn.NU):
        raise ValueError(f"control sequence must be ({schedule.horizon}, {dyn.NU})")
    return rollout_plant(RobotPlant(model), schedule, x0,
                         lambda k, s: U[k], h=h)


def rollout_scaled(model: RobotModel, schedule: ModeSchedule, U, X0) -> Trajectory:
    """Open-loop time-scaled rollout; X0 = [x0, T_1..T_n]."""
    U = np.asarray(U, dtype=float)
    if U.shape != (schedule.horizon, dyn.NU):
        raise ValueError(f"control sequence must be ({schedule.horizon}, {dyn.NU})")
    return rollout_plant(RobotPlant(model), schedule, X0,
                         lambda k, s: U[k], scaled=True)


# -----------------------------------------------------------------------------
# Constraint residual extraction
# -----------------------------------------------------------------------------

@dataclass
class SwitchingResiduals:
    """Touchdown gap residuals at the scheduled mode exits."""

    mode_indices: np.ndarray
    knots: np.ndarray
    feet: list[str]
    values: np.ndarray

    @property
    def total_sq(self) -> float:
        return float(np.dot(self.values, self.values))

    @property
    def max_abs(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0


def switching_residuals(model: RobotModel, traj: Trajectory,
                        schedule: ModeSchedule | None = None) -> SwitchingResiduals:
    """Recompute g(x) at every touchdown exit of the trajectory."""
    schedule = schedule or traj.schedule
    entries = schedule.touchdown_boundaries()
    modes = np.array([e[0] for e in entries], dtype=int)
    knots = np.array([e[1] for e in entries], dtype=int)
    feet = [e[2] for e in entries]
    values = np.array([
        float(dyn.gap(model, traj.X[k, :dyn.NQ], f)) for k, f in zip(knots, feet)
    ])
    return SwitchingResiduals(modes, knots, feet, values)


@dataclass
class InequalityResiduals:
    """Per-knot inequality margins in c(x) >= 0 form.

    torque has 2 margins per joint per knot (u_max -/+ u).  Force margins
    exist at stance knots only: normal is the vertical contact force, and
    friction holds the two cone edges (mu*lam_z -/+ lam_x).
    """

    torque: np.ndarray           # (N, 2*nu)
    stance_knots: np.ndarray     # (n_s,) knot index of each stance contact
    stance_feet: list[str]       # (n_s,) foot of each stance contact
    normal: np.ndarray           # (n_s,)
    friction: np.ndarray         # (n_s, 2)

    def min_margin(self) -> float:
        vals = [self.torque.min()] if self.torque.size else []
        if self.normal.size:
            vals += [self.normal.min(), self.friction.min()]
        return float(min(vals)) if vals else np.inf


def inequality_residuals(model: RobotModel, traj: Trajectory) -> InequalityResiduals:
    U = traj.U
    torque = np.concatenate([model.u_max - U, model.u_max + U], axis=1)
    knots, rows = np.nonzero(traj.active_feet)
    lam = traj.forces[knots, rows, :]
    lam_x, lam_z = lam[:, 0], lam[:, 1]
    mu = model.friction_coeff
    friction = np.stack([mu * lam_z - lam_x, mu * lam_z + lam_x], axis=1)
    return InequalityResiduals(torque=torque, stance_knots=knots,
                               stance_feet=[dyn.FEET[r] for r in rows],
                               normal=lam_z, friction=friction)
