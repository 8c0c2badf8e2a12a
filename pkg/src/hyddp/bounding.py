"""Planar quadruped bounding benchmark.

Builds the four-mode-per-cycle bounding task (back stance, flight, front
stance, flight), the per-mode quadratic tracking costs, and a heuristic
warm-start controller: joint-space PD toward a crouched configuration in
flight, and a virtual leg spring on the stance leg whose ground-reaction
force is mapped to hip/knee torques through the leg Jacobian.  The warm start
produces a bounding-like motion but does not respect the touchdown gap
constraints; enforcing those is the optimizer's job.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from hyddp import dynamics as dyn
from hyddp.costs import ModeQuadraticCost, total_base_cost
from hyddp.modes import (
    Mode,
    ModeSchedule,
    RobotPlant,
    RolloutError,
    Trajectory,
    rollout_plant,
)
from hyddp.problem import HybridProblem

BACK_STANCE = "back-stance"
FLIGHT_FRONT = "flight-to-front"
FRONT_STANCE = "front-stance"
FLIGHT_BACK = "flight-to-back"

# Default mode durations (s): back stance, flight, front stance, flight.
DEFAULT_DURATIONS = (0.080, 0.072, 0.072, 0.072)
DEFAULT_H = 1e-3
DEFAULT_SPEED = 1.0


def _cycle_modes() -> tuple[Mode, ...]:
    return (
        Mode(BACK_STANCE, contacts=(dyn.BACK,)),
        Mode(FLIGHT_FRONT, contacts=(), touchdown_foot=dyn.FRONT,
             has_impact_at_exit=True),
        Mode(FRONT_STANCE, contacts=(dyn.FRONT,)),
        Mode(FLIGHT_BACK, contacts=(), touchdown_foot=dyn.BACK,
             has_impact_at_exit=True),
    )


def bounding_schedule(cycles: int, h: float = DEFAULT_H,
                      durations=DEFAULT_DURATIONS) -> ModeSchedule:
    """Discrete-time bounding schedule starting from back stance."""
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    modes = []
    knots = []
    durs = []
    for c in range(cycles):
        for mode, T in zip(_cycle_modes(), durations):
            n = round(T / h)
            if n < 1:
                raise ValueError("mode duration shorter than one step")
            last = c == cycles - 1 and mode.kind == FLIGHT_BACK
            if last:
                # Horizon ends here; the touchdown residual still applies but
                # there is no successor mode to reset into.
                mode = Mode(mode.kind, mode.contacts, mode.touchdown_foot, False)
            modes.append(mode)
            knots.append(n)
            durs.append(n * h)
    return ModeSchedule(tuple(modes), tuple(knots), tuple(durs))


def bounding_schedule_scaled(knots_per_mode: int = 40,
                             durations=DEFAULT_DURATIONS) -> ModeSchedule:
    """One-cycle schedule for the time-scaled formulation (fixed knot counts)."""
    modes = list(_cycle_modes())
    modes[-1] = Mode(FLIGHT_BACK, (), dyn.BACK, False)
    return ModeSchedule(tuple(modes), (knots_per_mode,) * 4, tuple(durations))


# -----------------------------------------------------------------------------
# Postures, references, and cost weights
# -----------------------------------------------------------------------------

def _posture(model: dyn.RobotModel, pitch, hips_knees, grounded_foot=None,
             height=None) -> np.ndarray:
    """Build q from pitch and joint angles, placing a foot on the ground."""
    q = np.zeros(dyn.NQ)
    q[2] = pitch
    q[3:7] = hips_knees
    if grounded_foot is not None:
        q[1] = 0.0
        q[1] = -float(dyn.gap(model, q, grounded_foot))
    else:
        q[1] = height
    return q


@dataclass(frozen=True)
class BoundingWeights:
    """Diagonal tracking weights; forward position is deliberately unweighted."""

    body_height: float = 15.0
    pitch: float = 1.0
    joint_angle: float = 0.1
    forward_speed: float = 10.0
    body_velocity: float = 1.0
    joint_velocity: float = 0.5
    control: float = 0.01
    terminal_scale: float = 10.0

    def q_diag(self) -> np.ndarray:
        return np.array([
            0.0, self.body_height, self.pitch,
            self.joint_angle, self.joint_angle, self.joint_angle, self.joint_angle,
            self.forward_speed, self.body_velocity, self.body_velocity,
            self.joint_velocity, self.joint_velocity, self.joint_velocity,
            self.joint_velocity,
        ])


def reference_states(model: dyn.RobotModel, speed: float = DEFAULT_SPEED) -> dict:
    """End-of-mode reference states for the four bounding modes.

    Posture references are heuristic end-of-mode configurations; all joint
    and vertical velocity references are zero, forward speed is tracked.
    """
    crouch = (0.45, -0.9, 0.45, -0.9)
    refs = {
        BACK_STANCE: _posture(model, 0.06, (0.55, -1.1, 0.30, -0.62),
                              grounded_foot=dyn.BACK),
        FLIGHT_FRONT: _posture(model, 0.0, (0.45, -0.85, 0.6, -1.2),
                               height=0.38),
        FRONT_STANCE: _posture(model, -0.06, (0.30, -0.62, 0.55, -1.1),
                               grounded_foot=dyn.FRONT),
        FLIGHT_BACK: _posture(model, 0.0, (0.6, -1.2, 0.45, -0.85),
                              height=0.38),
    }
    out = {}
    for kind, q in refs.items():
        x = np.zeros(dyn.NX)
        x[:dyn.NQ] = q
        x[dyn.NQ] = speed
        out[kind] = x
    out["crouch"] = np.array(crouch)
    return out


def bounding_cost(model: dyn.RobotModel, schedule: ModeSchedule,
                  weights: BoundingWeights = BoundingWeights(),
                  speed: float = DEFAULT_SPEED) -> ModeQuadraticCost:
    refs = reference_states(model, speed)
    qd = weights.q_diag()
    Q = np.diag(qd)
    R = weights.control * np.eye(dyn.NU)
    Qf = weights.terminal_scale * Q
    return ModeQuadraticCost(
        Q=tuple(Q for _ in schedule.modes),
        R=tuple(R for _ in schedule.modes),
        Qf=tuple(Qf for _ in schedule.modes),
        x_ref=tuple(refs[m.kind] for m in schedule.modes),
    )


def initial_state(model: dyn.RobotModel, speed: float = DEFAULT_SPEED) -> np.ndarray:
    """Back-stance start: back foot on the ground, forward speed set."""
    q = _posture(model, 0.0, (0.55, -1.05, 0.45, -0.85), grounded_foot=dyn.BACK)
    x = np.zeros(dyn.NX)
    x[:dyn.NQ] = q
    x[dyn.NQ] = speed
    return x


# -----------------------------------------------------------------------------
# Heuristic warm start
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class WarmStartPolicy:
    """Flight PD toward a crouch plus a stance-leg virtual spring."""

    kp: float = 25.0
    kd: float = 0.6
    crouch: tuple[float, float, float, float] = (0.45, -0.9, 0.45, -0.9)
    slip_rest_length: float = 0.34
    slip_stiffness: float = 2200.0
    slip_damping: float = 40.0
    clip_scale: float = 2.0       # torques clipped to clip_scale * u_max


def _leg_columns(foot: str) -> tuple[int, int]:
    return dyn.LEG_JOINT_COLS[foot]


def heuristic_control(model: dyn.RobotModel, x: np.ndarray, mode: Mode,
                      policy: WarmStartPolicy) -> np.ndarray:
    """Torques of the warm-start controller at one state."""
    q, v = x[:dyn.NQ], x[dyn.NQ:]
    target = np.asarray(policy.crouch)
    u = policy.kp * (target - q[3:7]) - policy.kd * v[3:7]

    for foot in mode.contacts:
        hip = dyn.hip_position(model, q, foot)
        foot_p = dyn.foot_position(model, q, foot)
        leg = hip - foot_p
        length = float(np.hypot(leg[0], leg[1]))
        if length < 1e-6:
            continue
        direction = leg / length
        J_hip = dyn.point_jacobian(model, q, dyn._HIP_POINT[foot])
        J_foot = dyn.point_jacobian(model, q, dyn._FOOT_POINT[foot])
        rate = float(direction @ ((J_hip - J_foot) @ v))
        force = (policy.slip_stiffness * (policy.slip_rest_length - length)
                 - policy.slip_damping * rate)
        grf = force * direction
        cols = _leg_columns(foot)
        J_leg = J_foot[:, cols]
        tau_leg = -J_leg.T @ grf
        row = 0 if foot == dyn.FRONT else 2
        u[row:row + 2] = tau_leg
    limit = policy.clip_scale * model.u_max
    return np.clip(u, -limit, limit)


def warm_start(model: dyn.RobotModel, schedule: ModeSchedule, x0: np.ndarray,
               h: float | None = None, scaled: bool = False,
               policy: WarmStartPolicy = WarmStartPolicy()) -> np.ndarray:
    """Roll the heuristic controller through the schedule, recording torques.

    Falls back to zero controls (with a warning) if the heuristic rollout
    fails; zeros are a valid if poor initialization.
    """
    plant = RobotPlant(model)
    mode_of_step = schedule.mode_of_step()

    def control(k, s):
        mode = schedule.modes[mode_of_step[k]]
        return heuristic_control(model, s[:dyn.NX], mode, policy)

    try:
        traj = rollout_plant(plant, schedule, x0, control, h=h, scaled=scaled)
    except RolloutError as exc:
        warnings.warn(f"warm-start rollout failed ({exc}); using zero controls")
        return np.zeros((schedule.horizon, dyn.NU))
    return traj.U.copy()


# -----------------------------------------------------------------------------
# Problem bundle
# -----------------------------------------------------------------------------

@dataclass
class BoundingProblem:
    model: dyn.RobotModel
    schedule: ModeSchedule
    cost: ModeQuadraticCost
    x0: np.ndarray
    problem: HybridProblem
    warm_policy: WarmStartPolicy = field(default_factory=WarmStartPolicy)

    def warm_start(self) -> np.ndarray:
        return warm_start(self.model, self.schedule,
                          self.problem.x0, h=self.problem.h,
                          scaled=self.problem.scaled, policy=self.warm_policy)


def build_bounding_problem(cycles: int, h: float = DEFAULT_H,
                           model: dyn.RobotModel | None = None,
                           weights: BoundingWeights = BoundingWeights(),
                           speed: float = DEFAULT_SPEED,
                           durations=DEFAULT_DURATIONS,
                           warm_policy: WarmStartPolicy = WarmStartPolicy(),
                           scaled: bool = False,
                           knots_per_mode: int = 40) -> BoundingProblem:
    """Assemble the bounding benchmark for a number of gait cycles.

    With scaled=True a one-cycle time-scaled problem is built instead (the
    timing-optimization formulation); cycles must then be 1.
    """
    model = model or dyn.RobotModel()
    if scaled:
        if cycles != 1:
            raise ValueError("the time-scaled bounding problem uses one cycle")
        schedule = bounding_schedule_scaled(knots_per_mode, durations)
    else:
        schedule = bounding_schedule(cycles, h, durations)
    cost = bounding_cost(model, schedule, weights, speed)
    x0 = initial_state(model, speed)
    plant = RobotPlant(model)
    if scaled:
        x0_full = np.concatenate([x0, np.asarray(durations, dtype=float)])
        problem = HybridProblem(plant, schedule, cost, x0_full, scaled=True)
    else:
        problem = HybridProblem(plant, schedule, cost, x0, h=h)
    return BoundingProblem(model=model, schedule=schedule, cost=cost, x0=x0,
                           problem=problem, warm_policy=warm_policy)


def eval_cost(traj: Trajectory, cost: ModeQuadraticCost,
              schedule: ModeSchedule | None = None) -> float:
    """Base tracking cost of a trajectory (no constraint terms)."""
    return total_base_cost(traj, cost, schedule)
