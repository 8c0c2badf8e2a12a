"""Planar articulated rigid-body dynamics with point-foot ground contact.

Model: a sagittal-plane quadruped with the left/right legs of each pair lumped
into a single planar leg.  Generalized coordinates

    q = [x, z, pitch, front hip, front knee, back hip, back knee]

with x forward and z up; the ground is the plane z = 0.  The state is
x = [q, v] with v = dq/dt.  Four joints (both hips, both knees) are actuated.

All functions are pure and broadcast over leading batch dimensions: q may be
shaped (..., 7), controls (..., 4), states (..., 14).  Contact forces are
(tangential, normal) pairs in world axes, acting on the robot.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

FRONT = "front"
BACK = "back"
FEET = (FRONT, BACK)

NQ = 7
NV = 7
NX = 14
NU = 4

# Absolute link angles as linear combinations of q:
# body, front thigh, front shank, back thigh, back shank.
_ANGLE_DEPS = np.array(
    [
        [0, 0, 1, 0, 0, 0, 0],
        [0, 0, 1, 1, 0, 0, 0],
        [0, 0, 1, 1, 1, 0, 0],
        [0, 0, 1, 0, 0, 1, 0],
        [0, 0, 1, 0, 0, 0, 1],
    ],
    dtype=float,
)
_BODY, _FTHIGH, _FSHANK, _BTHIGH, _BSHANK = range(5)

_COM_POINTS = ("com_body", "com_fthigh", "com_fshank", "com_bthigh", "com_bshank")
_FOOT_POINT = {FRONT: "foot_front", BACK: "foot_back"}
_CORE_POINTS = _COM_POINTS + ("foot_front", "foot_back")
_CORE_FOOT_ROW = {FRONT: 5, BACK: 6}
_HIP_POINT = {FRONT: "hip_front", BACK: "hip_back"}
# Jacobian columns of each leg's own (hip, knee) joints.
LEG_JOINT_COLS = {FRONT: (3, 4), BACK: (5, 6)}


class ContactSolveError(RuntimeError):
    """Contact/impact linear system is singular or too ill-conditioned."""

    def __init__(self, message: str, cond: float = np.inf):
        super().__init__(f"{message} (condition number {cond:.3e})")
        self.cond = cond


@dataclass(frozen=True)
class RobotModel:
    """Kinematic/inertial parameters of the planar bounding robot.

    Leg parameters describe one lumped planar leg (a left/right pair).
    CoM offsets are measured from the proximal joint along the link.
    """

    body_mass: float = 3.3
    body_inertia: float = 0.056
    body_length: float = 0.38
    thigh_mass: float = 0.63
    thigh_inertia: float = 0.0023
    thigh_length: float = 0.21
    thigh_com_offset: float = 0.105
    shank_mass: float = 0.06
    shank_inertia: float = 0.00022
    shank_length: float = 0.21
    shank_com_offset: float = 0.105
    gravity: float = 9.81
    u_max: float = 17.0
    friction_coeff: float = 0.7
    restitution: float = 0.0
    kkt_cond_limit: float = 1e12

    def __post_init__(self):
        positive = (
            "body_mass", "body_inertia", "body_length",
            "thigh_mass", "thigh_inertia", "thigh_length",
            "shank_mass", "shank_inertia", "shank_length",
            "gravity", "u_max",
        )
        for name in positive:
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError("restitution must lie in [0, 1]")
        if not self.friction_coeff > 0.0:
            raise ValueError("friction_coeff must be strictly positive")

    @cached_property
    def link_masses(self) -> np.ndarray:
        return np.array(
            [self.body_mass, self.thigh_mass, self.shank_mass,
             self.thigh_mass, self.shank_mass]
        )

    @cached_property
    def link_inertias(self) -> np.ndarray:
        return np.array(
            [self.body_inertia, self.thigh_inertia, self.shank_inertia,
             self.thigh_inertia, self.shank_inertia]
        )

    @cached_property
    def total_mass(self) -> float:
        return float(self.link_masses.sum())

    @cached_property
    def selection_matrix(self) -> np.ndarray:
        """Actuation map S (4x7): one row per actuated joint."""
        S = np.zeros((NU, NQ))
        S[0, 3] = S[1, 4] = S[2, 5] = S[3, 6] = 1.0
        return S

    @cached_property
    def standing_height(self) -> float:
        """Body height with a straight vertical leg touching the ground."""
        return self.thigh_length + self.shank_length

    @cached_property
    def _points(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Chain-term table: point -> (link-angle ids, constant offsets)."""
        half = 0.5 * self.body_length
        lt, ls = self.thigh_length, self.shank_length
        ct, cs = self.thigh_com_offset, self.shank_com_offset
        hip_f = [(_BODY, (half, 0.0))]
        hip_b = [(_BODY, (-half, 0.0))]
        knee_f = hip_f + [(_FTHIGH, (0.0, -lt))]
        knee_b = hip_b + [(_BTHIGH, (0.0, -lt))]
        table = {
            "com_body": [(_BODY, (0.0, 0.0))],
            "hip_front": hip_f,
            "hip_back": hip_b,
            "knee_front": knee_f,
            "knee_back": knee_b,
            "com_fthigh": hip_f + [(_FTHIGH, (0.0, -ct))],
            "com_bthigh": hip_b + [(_BTHIGH, (0.0, -ct))],
            "com_fshank": knee_f + [(_FSHANK, (0.0, -cs))],
            "com_bshank": knee_b + [(_BSHANK, (0.0, -cs))],
            "foot_front": knee_f + [(_FSHANK, (0.0, -ls))],
            "foot_back": knee_b + [(_BSHANK, (0.0, -ls))],
        }
        return {
            name: (np.array([t[0] for t in terms]),
                   np.array([t[1] for t in terms]))
            for name, terms in table.items()
        }

    @cached_property
    def _rotational_inertia(self) -> np.ndarray:
        """Constant angular part of the mass matrix, sum_i I_i w_i w_i^T."""
        return np.einsum("i,ij,ik->jk", self.link_inertias, _ANGLE_DEPS, _ANGLE_DEPS)

    @cached_property
    def _core_coeffs(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (point, angle) offset coefficients for the dynamics hot path.

        Row order: the five link CoMs followed by the two feet.  Each point's
        world position is [x, z] + sum_a R(angle_a) (AX[p,a], AY[p,a]).
        """
        P = len(_CORE_POINTS)
        AX = np.zeros((P, 5))
        AY = np.zeros((P, 5))
        for p, name in enumerate(_CORE_POINTS):
            aids, offs = self._points[name]
            for aid, (ax, ay) in zip(aids, offs):
                AX[p, aid] += ax
                AY[p, aid] += ay
        return AX, AY


def _require_foot(foot: str) -> str:
    if foot not in _FOOT_POINT:
        raise ValueError(f"unknown foot identifier {foot!r}; expected one of {FEET}")
    return _FOOT_POINT[foot]


def _trig(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ang = q @ _ANGLE_DEPS.T
    return np.cos(ang), np.sin(ang)


def _point_pos(model, q, c, s, name):
    aids, offs = model._points[name]
    pos = np.zeros(q.shape[:-1] + (2,))
    pos[..., 0] = q[..., 0]
    pos[..., 1] = q[..., 1]
    for aid, (ax, ay) in zip(aids, offs):
        pos[..., 0] += ax * c[..., aid] - ay * s[..., aid]
        pos[..., 1] += ax * s[..., aid] + ay * c[..., aid]
    return pos


def _point_jac(model, q, c, s, name):
    aids, offs = model._points[name]
    jac = np.zeros(q.shape[:-1] + (2, NQ))
    jac[..., 0, 0] = 1.0
    jac[..., 1, 1] = 1.0
    for aid, (ax, ay) in zip(aids, offs):
        dx = -ax * s[..., aid] - ay * c[..., aid]
        dz = ax * c[..., aid] - ay * s[..., aid]
        dep = _ANGLE_DEPS[aid]
        jac[..., 0, :] += dx[..., None] * dep
        jac[..., 1, :] += dz[..., None] * dep
    return jac


def _point_vel_accel(model, q, v, c, s, name):
    """Velocity J v and velocity-product acceleration (d/dt J) v of a point."""
    aids, offs = model._points[name]
    adot = v @ _ANGLE_DEPS.T
    vel = np.zeros(q.shape[:-1] + (2,))
    vel[..., 0] = v[..., 0]
    vel[..., 1] = v[..., 1]
    acc = np.zeros(q.shape[:-1] + (2,))
    for aid, (ax, ay) in zip(aids, offs):
        w = adot[..., aid]
        vel[..., 0] += (-ax * s[..., aid] - ay * c[..., aid]) * w
        vel[..., 1] += (ax * c[..., aid] - ay * s[..., aid]) * w
        w2 = w * w
        acc[..., 0] -= (ax * c[..., aid] - ay * s[..., aid]) * w2
        acc[..., 1] -= (ax * s[..., aid] + ay * c[..., aid]) * w2
    return vel, acc


def _point_hess(model, q, c, s, name):
    """Second derivatives d^2 p / dq dq, shaped (..., 2, 7, 7)."""
    aids, offs = model._points[name]
    hess = np.zeros(q.shape[:-1] + (2, NQ, NQ))
    for aid, (ax, ay) in zip(aids, offs):
        px = ax * c[..., aid] - ay * s[..., aid]
        pz = ax * s[..., aid] + ay * c[..., aid]
        dep = _ANGLE_DEPS[aid]
        outer = dep[:, None] * dep[None, :]
        hess[..., 0, :, :] -= px[..., None, None] * outer
        hess[..., 1, :, :] -= pz[..., None, None] * outer
    return hess


# -----------------------------------------------------------------------------
# Kinematics API
# -----------------------------------------------------------------------------

def point_position(model: RobotModel, q: np.ndarray, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    c, s = _trig(q)
    return _point_pos(model, q, c, s, name)


def point_jacobian(model: RobotModel, q: np.ndarray, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    c, s = _trig(q)
    return _point_jac(model, q, c, s, name)


def foot_position(model: RobotModel, q: np.ndarray, foot: str) -> np.ndarray:
    return point_position(model, q, _require_foot(foot))


def hip_position(model: RobotModel, q: np.ndarray, foot: str) -> np.ndarray:
    _require_foot(foot)
    return point_position(model, q, _HIP_POINT[foot])


def gap(model: RobotModel, q: np.ndarray, foot: str) -> np.ndarray:
    """Vertical height of the foot point above the ground plane z = 0."""
    return foot_position(model, q, foot)[..., 1]


def gap_rate(model: RobotModel, q: np.ndarray, v: np.ndarray, foot: str) -> np.ndarray:
    """Time derivative of the gap along velocity v."""
    name = _require_foot(foot)
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    c, s = _trig(q)
    vel, _ = _point_vel_accel(model, q, v, c, s, name)
    return vel[..., 1]


def gap_gradient(model: RobotModel, q: np.ndarray, foot: str) -> np.ndarray:
    """d gap / dq, shaped (..., 7)."""
    return point_jacobian(model, q, _require_foot(foot))[..., 1, :]


def gap_hessian(model: RobotModel, q: np.ndarray, foot: str) -> np.ndarray:
    """d^2 gap / dq dq, shaped (..., 7, 7)."""
    name = _require_foot(foot)
    q = np.asarray(q, dtype=float)
    c, s = _trig(q)
    return _point_hess(model, q, c, s, name)[..., 1, :, :]


# -----------------------------------------------------------------------------
# Manipulator quantities
# -----------------------------------------------------------------------------

def _core_jacobians(model, q, v=None):
    """Fused Jacobians (and velocity-product accelerations) of the core points.

    Returns (J, avel) with J shaped (..., 7 points, 2, 7) ordered per
    _CORE_POINTS and avel (..., 7 points, 2), or avel None when v is None.
    Everything is assembled from a handful of batched tensor contractions.
    """
    AX, AY = model._core_coeffs
    c, s = _trig(q)                                     # (..., 5)
    cN = c[..., None, :]
    sN = s[..., None, :]
    PX = AX * cN - AY * sN                              # (..., P, 5)
    PZ = AX * sN + AY * cN

    P = AX.shape[0]
    J = np.zeros(q.shape[:-1] + (P, 2, NQ))
    J[..., 0, :] = -PZ @ _ANGLE_DEPS
    J[..., 1, :] = PX @ _ANGLE_DEPS
    J[..., 0, 0] += 1.0
    J[..., 1, 1] += 1.0

    if v is None:
        return J, None
    w2 = (v @ _ANGLE_DEPS.T) ** 2                       # (..., 5)
    w2N = w2[..., None, :]
    avel = np.stack([-(PX * w2N).sum(-1), -(PZ * w2N).sum(-1)], axis=-1)
    return J, avel


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    J, _ = _core_jacobians(model, q)
    H = np.einsum("p,...pij,...pik->...jk", model.link_masses, J[..., :5, :, :],
                  J[..., :5, :, :])
    return H + model._rotational_inertia


def bias_force(model: RobotModel, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Coriolis/centrifugal generalized force C(q, v) v."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    J, avel = _core_jacobians(model, q, v)
    return np.einsum("p,...pij,...pi->...j", model.link_masses,
                     J[..., :5, :, :], avel[..., :5, :])


def gravity_force(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Generalized gravity force (enters the dynamics as a resistance term)."""
    q = np.asarray(q, dtype=float)
    J, _ = _core_jacobians(model, q)
    return model.gravity * np.einsum("p,...pj->...j", model.link_masses,
                                     J[..., :5, 1, :])


def contact_jacobian(model: RobotModel, q: np.ndarray, contacts) -> np.ndarray:
    """Stacked (x, z) rows of the active feet, shaped (..., 2c, 7)."""
    q = np.asarray(q, dtype=float)
    c, s = _trig(q)
    rows = [_point_jac(model, q, c, s, _require_foot(f)) for f in contacts]
    return np.concatenate(rows, axis=-2)


def kinetic_energy(model: RobotModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    q, v = x[..., :NQ], x[..., NQ:]
    H = mass_matrix(model, q)
    return 0.5 * np.einsum("...i,...ij,...j->...", v, H, v)


# -----------------------------------------------------------------------------
# Constrained dynamics
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ContactSolution:
    """Accelerations and stance-foot forces from the contact-consistent solve."""

    qdd: np.ndarray
    forces: np.ndarray  # (..., c, 2) as (tangential, normal); c = 0 in flight


def _kkt_solve(H, Jc, top, bottom, cond_limit=None):
    """Solve [[H, -J^T], [-J, 0]] [a; f] = [top; bottom] for (a, f)."""
    nc = Jc.shape[-2]
    n = H.shape[-1]
    dim = n + nc
    M = np.zeros(H.shape[:-2] + (dim, dim))
    M[..., :n, :n] = H
    M[..., :n, n:] = -np.swapaxes(Jc, -1, -2)
    M[..., n:, :n] = -Jc
    rhs = np.concatenate([top, bottom], axis=-1)
    if cond_limit is not None:
        cond = np.linalg.cond(M)
        if np.any(cond > cond_limit) or not np.all(np.isfinite(cond)):
            raise ContactSolveError("contact KKT matrix is ill-conditioned",
                                    float(np.max(cond)))
    try:
        sol = np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise ContactSolveError(f"contact KKT solve failed: {exc}") from exc
    return sol[..., :n], sol[..., n:]


def contact_dynamics(model: RobotModel, x: np.ndarray, u: np.ndarray,
                     contacts, check_conditioning: bool = True) -> ContactSolution:
    """Contact-consistent forward dynamics.

    Solves the stacked linear system coupling accelerations and contact
    forces through the stance-foot constraint (foot acceleration zero).  In
    flight the system reduces to the unconstrained manipulator equation.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q, v = x[..., :NQ], x[..., NQ:]
    J, avel = _core_jacobians(model, q, v)
    Jcom = J[..., :5, :, :]
    masses = model.link_masses
    H = np.einsum("p,...pij,...pik->...jk", masses, Jcom, Jcom) \
        + model._rotational_inertia
    bias = np.einsum("p,...pij,...pi->...j", masses, Jcom, avel[..., :5, :])
    grav = model.gravity * np.einsum("p,...pj->...j", masses, Jcom[..., 1, :])
    top = u @ model.selection_matrix - bias - grav

    contacts = tuple(contacts)
    if not contacts:
        try:
            qdd = np.linalg.solve(H, top[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:  # H is SPD by construction
            raise ContactSolveError(f"inertia solve failed: {exc}") from exc
        return ContactSolution(qdd, np.zeros(q.shape[:-1] + (0, 2)))

    for f in contacts:
        _require_foot(f)
    rows = [_CORE_FOOT_ROW[f] for f in contacts]
    Jc = np.concatenate([J[..., r, :, :] for r in rows], axis=-2)
    # Second block row enforces J qdd = -(dJ/dt) v.
    bottom = np.concatenate([avel[..., r, :] for r in rows], axis=-1)
    limit = model.kkt_cond_limit if check_conditioning else None
    qdd, lam = _kkt_solve(H, Jc, top, bottom, cond_limit=limit)
    forces = lam.reshape(lam.shape[:-1] + (len(contacts), 2))
    return ContactSolution(qdd, forces)


def continuous_dynamics(model: RobotModel, x: np.ndarray, u: np.ndarray,
                        contacts, check_conditioning: bool = False) -> np.ndarray:
    """State derivative [v; qdd](x, u) for the given contact set."""
    x = np.asarray(x, dtype=float)
    sol = contact_dynamics(model, x, u, contacts, check_conditioning)
    return np.concatenate([x[..., NQ:], sol.qdd], axis=-1)


def integrate_step(model: RobotModel, x: np.ndarray, u: np.ndarray,
                   contacts, h: float,
                   check_conditioning: bool = False) -> np.ndarray:
    """One explicit-Euler step of the contact-consistent dynamics."""
    if not h > 0.0:
        raise ValueError("step size h must be strictly positive")
    x = np.asarray(x, dtype=float)
    return x + h * continuous_dynamics(model, x, u, contacts, check_conditioning)


def constrained_velocity_projection(H: np.ndarray, J: np.ndarray, v: np.ndarray,
                                    restitution: float = 0.0):
    """Generic inelastic/partially-elastic impulse solve.

    Solves [[H, -J^T], [-J, 0]] [v+; p] = [H v-; e J v-], i.e. the
    momentum-conserving velocity jump that maps the constraint-space velocity
    J v- to -e J v-.  Returns (v_plus, impulse).
    """
    H = np.asarray(H, dtype=float)
    J = np.atleast_2d(np.asarray(J, dtype=float))
    v = np.asarray(v, dtype=float)
    top = np.einsum("...ij,...j->...i", H, v)
    bottom = restitution * np.einsum("...ij,...j->...i", J, v)
    return _kkt_solve(H, J, top, bottom)


def impact_map(model: RobotModel, x: np.ndarray, foot: str,
               restitution: float | None = None,
               check_conditioning: bool = True):
    """Touchdown reset: coordinates unchanged, velocity jumps impulsively.

    Returns (x_plus, impulse) where impulse is the (tangential, normal)
    contact impulse at the touchdown foot.
    """
    name = _require_foot(foot)
    e = model.restitution if restitution is None else restitution
    x = np.asarray(x, dtype=float)
    q, v = x[..., :NQ], x[..., NQ:]
    c, s = _trig(q)
    H = mass_matrix(model, q)
    J = _point_jac(model, q, c, s, name)
    top = np.einsum("...ij,...j->...i", H, v)
    bottom = e * np.einsum("...ij,...j->...i", J, v)
    limit = model.kkt_cond_limit if check_conditioning else None
    v_plus, impulse = _kkt_solve(H, J, top, bottom, cond_limit=limit)
    return np.concatenate([q, v_plus], axis=-1), impulse


# -----------------------------------------------------------------------------
# Linearization (finite differences over batched evaluations)
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class StepJacobians:
    fx: np.ndarray  # d x' / d x
    fu: np.ndarray  # d x' / d u


def _fd_columns(values, base_scale, fd_step):
    return fd_step * np.maximum(1.0, np.abs(values)) * base_scale


def linearize_steps(model: RobotModel, X: np.ndarray, U: np.ndarray,
                    contacts, h, fd_step: float = 5e-6):
    """Central-difference Jacobians of the Euler step for a batch of knots.

    X is (n, 14), U is (n, 4), h is a scalar or (n,) array of effective step
    sizes.  Returns (fx, fu) shaped (n, 14, 14) and (n, 14, 4).  All 2*(14+4)
    perturbed steps per knot are evaluated in one batched dynamics call.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    n = X.shape[0]
    h = np.broadcast_to(np.asarray(h, dtype=float), (n,))

    steps_x = fd_step * np.maximum(1.0, np.abs(X))          # (n, 14)
    steps_u = fd_step * np.maximum(1.0, np.abs(U))          # (n, 4)

    Xp = np.repeat(X[:, None, :], NX + NU, axis=1)          # (n, 18, 14)
    Up = np.repeat(U[:, None, :], NX + NU, axis=1)
    Xm = Xp.copy()
    Um = Up.copy()
    for j in range(NX):
        Xp[:, j, j] += steps_x[:, j]
        Xm[:, j, j] -= steps_x[:, j]
    for j in range(NU):
        Up[:, NX + j, j] += steps_u[:, j]
        Um[:, NX + j, j] -= steps_u[:, j]

    hcol = h[:, None, None]
    fp = Xp + hcol * continuous_dynamics(model, Xp, Up, contacts)
    fm = Xm + hcol * continuous_dynamics(model, Xm, Um, contacts)
    diff = fp - fm                                          # (n, 18, 14)

    fx = np.empty((n, NX, NX))
    fu = np.empty((n, NX, NU))
    for j in range(NX):
        fx[:, :, j] = diff[:, j, :] / (2.0 * steps_x[:, j, None])
    for j in range(NU):
        fu[:, :, j] = diff[:, NX + j, :] / (2.0 * steps_u[:, j, None])
    return fx, fu


def linearize_step(model: RobotModel, x: np.ndarray, u: np.ndarray,
                   contacts, h: float, fd_step: float = 5e-6) -> StepJacobians:
    """Jacobians of one discrete step at a single (x, u) point."""
    fx, fu = linearize_steps(model, np.asarray(x)[None, :], np.asarray(u)[None, :],
                             contacts, h, fd_step)
    return StepJacobians(fx[0], fu[0])


def velocity_projection_matrix(model: RobotModel, q: np.ndarray, foot: str) -> np.ndarray:
    """The linear map v- -> v+ of the inelastic touchdown at fixed q."""
    name = _require_foot(foot)
    q = np.asarray(q, dtype=float)
    c, s = _trig(q)
    H = mass_matrix(model, q)
    J = _point_jac(model, q, c, s, name)
    Hinv_Jt = np.linalg.solve(H, np.swapaxes(J, -1, -2))
    gram = J @ Hinv_Jt
    try:
        gram_inv = np.linalg.inv(gram)
    except np.linalg.LinAlgError as exc:
        raise ContactSolveError(f"impact Gram matrix singular: {exc}") from exc
    eye = np.broadcast_to(np.eye(NV), H.shape)
    return eye - Hinv_Jt @ gram_inv @ J


def reset_jacobian(model: RobotModel, x: np.ndarray, foot: str,
                   fd_step: float = 1e-6) -> np.ndarray:
    """Jacobian of the touchdown reset map with respect to the pre-impact state.

    The q rows are exactly [I 0] and the velocity block at fixed q is the
    projection matrix itself; only the dependence of the projected velocity
    on q is finite-differenced.
    """
    x = np.asarray(x, dtype=float)
    q, v = x[:NQ], x[NQ:]
    P = np.zeros((NX, NX))
    P[:NQ, :NQ] = np.eye(NQ)
    P[NQ:, NQ:] = velocity_projection_matrix(model, q, foot)

    steps = fd_step * np.maximum(1.0, np.abs(q))
    Qp = np.repeat(q[None, :], NQ, axis=0)
    Qm = Qp.copy()
    for j in range(NQ):
        Qp[j, j] += steps[j]
        Qm[j, j] -= steps[j]
    Pp = velocity_projection_matrix(model, Qp, foot)
    Pm = velocity_projection_matrix(model, Qm, foot)
    dv = np.einsum("jab,b->ja", Pp - Pm, v)  # (7 cols, 7 rows) transposed
    P[NQ:, :NQ] = (dv / (2.0 * steps[:, None])).T
    return P


# -----------------------------------------------------------------------------
# Contact-force sensitivities (used by the inequality-penalty cost terms)
# -----------------------------------------------------------------------------

def contact_forces(model: RobotModel, X: np.ndarray, U: np.ndarray, contacts) -> np.ndarray:
    """Stance-foot forces (..., c, 2) for a batch of states/controls."""
    return contact_dynamics(model, X, U, contacts, check_conditioning=False).forces


# Stencil for the force Hessian state block.  The forces are affine in u for
# fixed (q, v) and their u-Jacobian depends on q only, so the u-u block is
# identically zero, the v-u block is zero, and the q-u block comes from
# differencing the exact u-Jacobian; only x-x terms need value probes.
_NT = NX + NU
_FH_PAIRS = [(i, j) for i in range(NX) for j in range(i + 1, NX)]
_FH_DISP = np.zeros((1 + 2 * NX + 4 * len(_FH_PAIRS), NX))
for _j in range(NX):
    _FH_DISP[1 + 2 * _j, _j] = 1.0
    _FH_DISP[2 + 2 * _j, _j] = -1.0
for _k, (_i, _j) in enumerate(_FH_PAIRS):
    for _p, (_si, _sj) in enumerate(((1, 1), (1, -1), (-1, 1), (-1, -1))):
        _FH_DISP[1 + 2 * NX + 4 * _k + _p, _i] = _si
        _FH_DISP[1 + 2 * NX + 4 * _k + _p, _j] = _sj
_FH_I = np.array([p[0] for p in _FH_PAIRS])
_FH_J = np.array([p[1] for p in _FH_PAIRS])

_CHUNK_ROWS = 120_000


def _force_u_jacobian(model: RobotModel, Q: np.ndarray, contacts) -> np.ndarray:
    """Exact d(forces)/du for a batch of configurations, shaped (n, c, 2, 4)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    contacts = tuple(contacts)
    nc = len(contacts)
    n = Q.shape[0]
    H = mass_matrix(model, Q)
    Jc = contact_jacobian(model, Q, contacts)
    dim = NQ + 2 * nc
    M = np.zeros((n, dim, dim))
    M[:, :NQ, :NQ] = H
    M[:, :NQ, NQ:] = -np.swapaxes(Jc, -1, -2)
    M[:, NQ:, :NQ] = -Jc
    rhs = np.zeros((dim, NU))
    rhs[:NQ, :] = model.selection_matrix.T
    sol = np.linalg.solve(M, np.broadcast_to(rhs, (n, dim, NU)))
    return sol[:, NQ:, :].reshape(n, nc, 2, NU)


def _chunked_forces(model, X, U, contacts):
    """contact_forces over a flattened probe batch, chunked to bound memory."""
    flat_x = X.reshape(-1, NX)
    flat_u = U.reshape(-1, NU)
    rows = flat_x.shape[0]
    if rows <= _CHUNK_ROWS:
        out = contact_forces(model, flat_x, flat_u, contacts)
    else:
        pieces = [
            contact_forces(model, flat_x[i:i + _CHUNK_ROWS],
                           flat_u[i:i + _CHUNK_ROWS], contacts)
            for i in range(0, rows, _CHUNK_ROWS)
        ]
        out = np.concatenate(pieces, axis=0)
    return out.reshape(X.shape[:-1] + out.shape[1:])


def contact_force_jacobians(model: RobotModel, X: np.ndarray, U: np.ndarray,
                            contacts, fd_step: float = 1e-6):
    """Batched d(forces)/dx and d(forces)/du, shaped (n, c, 2, 14) and (n, c, 2, 4).

    The control block is exact (the KKT solution is affine in u); the state
    block is finite-differenced in one batched dynamics call.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    contacts = tuple(contacts)
    n = X.shape[0]

    steps = fd_step * np.maximum(1.0, np.abs(X))           # (n, 14)
    Xp = np.repeat(X[:, None, :], NX, axis=1)              # (n, 14, 14)
    Xm = Xp.copy()
    idx = np.arange(NX)
    Xp[:, idx, idx] += steps
    Xm[:, idx, idx] -= steps
    Ub = np.broadcast_to(U[:, None, :], (n, NX, NU))
    fp = _chunked_forces(model, Xp, Ub, contacts)          # (n, 14, c, 2)
    fm = _chunked_forces(model, Xm, Ub, contacts)
    dfdx = np.moveaxis((fp - fm) / (2.0 * steps[..., None, None]), 1, -1)
    dfdu = _force_u_jacobian(model, X[:, :NQ], contacts)
    return dfdx, dfdu


def contact_force_hessians(model: RobotModel, X: np.ndarray, U: np.ndarray,
                           contacts, fd_step: float = 1e-4,
                           fd_step_jac: float = 1e-6):
    """Batched second derivatives of the stance forces over theta = (x, u).

    Returned shape (n, c, 2, 18, 18).  The x-x block uses a central
    second-difference stencil; the q-u block differences the exact
    u-Jacobian; the v-u and u-u blocks are identically zero.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    contacts = tuple(contacts)
    nc = len(contacts)
    n = X.shape[0]
    steps = fd_step * np.maximum(1.0, np.abs(X))           # (n, 14)

    probes = X[:, None, :] + _FH_DISP[None, :, :] * steps[:, None, :]
    Ub = np.broadcast_to(U[:, None, :], (n, _FH_DISP.shape[0], NU))
    F = _chunked_forces(model, probes, Ub, contacts)       # (n, B, c, 2)

    hess = np.zeros((n, nc, 2, _NT, _NT))
    f0 = F[:, 0]
    jd = np.arange(NX)
    fp = F[:, 1 + 2 * jd]                                   # (n, 14, c, 2)
    fm = F[:, 2 + 2 * jd]
    diag = (fp - 2.0 * f0[:, None] + fm) / (steps**2)[:, :, None, None]
    hess[:, :, :, jd, jd] = np.moveaxis(diag, 1, -1)

    base = 1 + 2 * NX
    quad = F[:, base:].reshape(n, len(_FH_PAIRS), 4, nc, 2)
    cross = (quad[:, :, 0] - quad[:, :, 1] - quad[:, :, 2] + quad[:, :, 3]) \
        / (4.0 * steps[:, _FH_I] * steps[:, _FH_J])[:, :, None, None]
    cross = np.moveaxis(cross, 1, -1)                       # (n, c, 2, n_pairs)
    hess[:, :, :, _FH_I, _FH_J] = cross
    hess[:, :, :, _FH_J, _FH_I] = cross

    # q-u block from the exact u-Jacobian (which depends on q alone).
    qsteps = fd_step_jac * np.maximum(1.0, np.abs(X[:, :NQ]))
    for j in range(NQ):
        Qp, Qm = X[:, :NQ].copy(), X[:, :NQ].copy()
        Qp[:, j] += qsteps[:, j]
        Qm[:, j] -= qsteps[:, j]
        dJu = (_force_u_jacobian(model, Qp, contacts)
               - _force_u_jacobian(model, Qm, contacts)) / (2.0 * qsteps[:, j, None, None, None])
        hess[:, :, :, j, NX:] = dJu
        hess[:, :, :, NX:, j] = dJu
    return hess
