"""Constraint handling: augmented Lagrangian and relaxed log-barrier terms.

Touchdown (switching) equalities are handled by an augmented-Lagrangian outer
loop: each scheduled touchdown boundary carries a penalty-plus-multiplier term
on its gap residual, folded into that mode's terminal-cost slot.  Inequalities
(torque box, non-negative normal force, friction cone) are handled by a
relaxed log-barrier: the -log barrier is extended below a relaxation threshold
by an even-order polynomial, so the penalty is finite for infeasible iterates,
and the threshold is shrunk in the outer loop to drive feasibility.

``AugmentedCostModel`` composes the base per-mode quadratics with both term
families and exposes values and derivatives per knot and per mode boundary;
with zero penalty, multipliers, and barrier weight it reduces bit-for-bit to
the base cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from hyddp import dynamics as dyn
from hyddp.costs import ModeQuadraticCost, total_base_cost
from hyddp.modes import ModeSchedule, RobotPlant, Trajectory

# Margin matrix mapping a (tangential, normal) force to the stance-force
# margins [lam_z, mu*lam_z - lam_x, mu*lam_z + lam_x]; mu is substituted in.
_FORCE_MARGIN_ROWS = 3


# -----------------------------------------------------------------------------
# Relaxed log-barrier
# -----------------------------------------------------------------------------

def reb_value(z, delta: float, k: int = 2):
    """Relaxed log-barrier: -log(z) above delta, polynomial extension below.

    Total on the whole real line and C^1 at the junction (C^2 for k = 2).
    """
    if not delta > 0.0:
        raise ValueError("relaxation threshold delta must be positive")
    z = np.asarray(z, dtype=float)
    mask = z > delta
    safe = np.where(mask, z, 1.0)
    t = (z - k * delta) / ((k - 1) * delta)
    poly = (k - 1) / k * (t**k - 1.0) - np.log(delta)
    out = np.where(mask, -np.log(safe), poly)
    return out if out.ndim else float(out)


def reb_grad(z, delta: float, k: int = 2):
    if not delta > 0.0:
        raise ValueError("relaxation threshold delta must be positive")
    z = np.asarray(z, dtype=float)
    mask = z > delta
    safe = np.where(mask, z, 1.0)
    t = (z - k * delta) / ((k - 1) * delta)
    out = np.where(mask, -1.0 / safe, t ** (k - 1) / delta)
    return out if out.ndim else float(out)


def reb_hess(z, delta: float, k: int = 2):
    if not delta > 0.0:
        raise ValueError("relaxation threshold delta must be positive")
    z = np.asarray(z, dtype=float)
    mask = z > delta
    safe = np.where(mask, z, 1.0)
    t = (z - k * delta) / ((k - 1) * delta)
    out = np.where(mask, 1.0 / safe**2, t ** (k - 2) / delta**2)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ReBState:
    """Barrier weight and relaxation threshold for the inequality terms."""

    weight: float = 0.01       # barrier weight, held constant
    delta: float = 0.5         # relaxation threshold, shrunk by the outer loop
    order: int = 2
    delta_decay: float = 0.2

    def __post_init__(self):
        if self.delta <= 0.0 or self.weight < 0.0:
            raise ValueError("barrier weight must be >= 0 and delta > 0")
        if self.order < 2 or self.order % 2 != 0:
            # Odd orders break value continuity at the junction.
            raise ValueError("barrier extension order must be an even integer >= 2")
        if not 0.0 < self.delta_decay < 1.0:
            raise ValueError("delta_decay must lie in (0, 1)")

    def decayed(self) -> "ReBState":
        return replace(self, delta=self.delta_decay * self.delta)


# -----------------------------------------------------------------------------
# Augmented Lagrangian
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ALState:
    """Penalty and multipliers for the touchdown equality constraints.

    ``penalty_form`` selects the weight multiplying the squared residuals:
    "squared-half" uses (sigma/2)^2, "conventional" uses sigma/2 (the textbook
    method of multipliers, whose update lambda += sigma*g is exactly
    consistent with the penalty).
    """

    sigma: float = 5.0
    beta: float = 8.0
    multipliers: tuple[float, ...] = ()
    penalty_form: str = "squared-half"

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("penalty sigma must be positive")
        if self.beta <= 1.0:
            raise ValueError("penalty growth beta must exceed 1")
        if self.penalty_form not in ("squared-half", "conventional"):
            raise ValueError(f"unknown penalty_form {self.penalty_form!r}")
        object.__setattr__(self, "multipliers",
                           tuple(float(m) for m in self.multipliers))

    @property
    def weight(self) -> float:
        if self.penalty_form == "squared-half":
            return (self.sigma / 2.0) ** 2
        return self.sigma / 2.0

    def expanded(self, n: int) -> "ALState":
        """Return a copy with n multipliers (zero-initialized if unset)."""
        if len(self.multipliers) == n:
            return self
        if self.multipliers:
            raise ValueError("multiplier count does not match constraint count")
        return replace(self, multipliers=(0.0,) * n)


def al_terms(residuals: np.ndarray, al: ALState) -> tuple[float, np.ndarray, np.ndarray]:
    """Penalty value and the per-boundary chain coefficients.

    Returns (value, first, second) where, for a residual g with state gradient
    g_x and Hessian g_xx, the boundary's cost gradient is first_i * g_x and
    its Hessian is second_i * g_x g_x^T + first_i * g_xx.
    """
    g = np.asarray(residuals, dtype=float)
    lam = np.asarray(al.multipliers, dtype=float)
    if g.shape != lam.shape:
        raise ValueError("residual/multiplier count mismatch")
    w = al.weight
    value = float(w * (g @ g) + lam @ g)
    first = 2.0 * w * g + lam
    second = np.full_like(g, 2.0 * w)
    return value, first, second


def al_update(al: ALState, residuals: np.ndarray) -> ALState:
    """Grow the penalty and take the first-order multiplier step."""
    g = np.asarray(residuals, dtype=float)
    lam = np.asarray(al.multipliers, dtype=float)
    if g.shape != lam.shape:
        raise ValueError("residual/multiplier count mismatch")
    new_lam = tuple((lam + al.sigma * g).tolist())
    return replace(al, sigma=al.beta * al.sigma, multipliers=new_lam)


# -----------------------------------------------------------------------------
# Composed cost model
# -----------------------------------------------------------------------------

@dataclass
class CostExpansions:
    """Bulk second-order cost data for one trajectory."""

    L: np.ndarray            # (N,)
    Lx: np.ndarray           # (N, nx)
    Lu: np.ndarray           # (N, nu)
    Lxx: np.ndarray          # (N, nx, nx)
    Luu: np.ndarray          # (N, nu, nu)
    Lux: np.ndarray          # (N, nu, nx)
    phi: np.ndarray          # (n_modes,)
    phix: np.ndarray         # (n_modes, nx)
    phixx: np.ndarray        # (n_modes, nx, nx)


class AugmentedCostModel:
    """Base quadratics + AL switching terms + relaxed-barrier inequality terms.

    The inequality margins are the torque box (2 per joint, every knot) and,
    at stance knots, the normal force and the two friction-cone edges; force
    margins chain through the contact-force sensitivity of the dynamics.
    """

    def __init__(self, base: ModeQuadraticCost, plant, schedule: ModeSchedule,
                 al: ALState | None = None, reb: ReBState | None = None,
                 scaled: bool = False):
        if base.n_modes != schedule.n_modes:
            raise ValueError("cost and schedule mode counts differ")
        self.base = base
        self.plant = plant
        self.schedule = schedule
        self.touchdowns = schedule.touchdown_boundaries()
        self.al = al.expanded(len(self.touchdowns)) if al is not None else None
        self.reb = reb
        self.scaled = scaled
        self.n_phys = plant.nx
        self.nz = schedule.n_modes if scaled else 0
        self.nx = self.n_phys + self.nz
        self.nu = plant.nu
        self._touchdown_of_mode = {i: j for j, (i, _, _) in enumerate(self.touchdowns)}

    # -- scalar spec-facing interface ------------------------------------

    def knot_value(self, mode_index: int, x, u, dt: float | None = None) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        dt = self._knot_dt(mode_index, x, dt)
        val = dt * self.base.running(mode_index, x[:self.n_phys], u)
        if self._reb_active():
            val += self._torque_penalty_value(u)
            val += self._force_penalty_value(mode_index, x[:self.n_phys], u)
        return float(val)

    def knot_expansion(self, mode_index: int, x, u, dt: float | None = None):
        """(value, grad_x, grad_u, hess_xx, hess_uu, hess_ux) at one knot."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        dt = self._knot_dt(mode_index, x, dt)
        exp = self._bulk_knot_expansions(
            mode_index, x[None, :], u[None, :], np.array([dt]))
        return tuple(a[0] for a in exp)

    def boundary_value(self, mode_index: int, x) -> float:
        x = np.asarray(x, dtype=float)
        val = self.base.terminal(mode_index, x[:self.n_phys])
        j = self._touchdown_of_mode.get(mode_index)
        if self.al is not None and j is not None:
            foot = self.touchdowns[j][2]
            g, _, _ = self.plant.touchdown_residual(x[:self.n_phys], foot)
            w = self.al.weight
            val += w * g * g + self.al.multipliers[j] * g
        return float(val)

    def boundary_expansion(self, mode_index: int, x):
        """(value, grad, hess) of the mode's terminal-slot cost."""
        x = np.asarray(x, dtype=float)
        np_, nx = self.n_phys, self.nx
        val, gx_p, gxx_p = self.base.terminal_expansion(mode_index, x[:np_])
        gx = np.zeros(nx)
        gxx = np.zeros((nx, nx))
        gx[:np_] = gx_p
        gxx[:np_, :np_] = gxx_p
        j = self._touchdown_of_mode.get(mode_index)
        if self.al is not None and j is not None:
            foot = self.touchdowns[j][2]
            g, rgx, rgxx = self.plant.touchdown_residual(x[:np_], foot)
            value, first, second = al_terms(
                np.array([g]), replace(self.al, multipliers=(self.al.multipliers[j],)))
            val += value
            gx[:np_] += first[0] * rgx
            gxx[:np_, :np_] += second[0] * np.outer(rgx, rgx) + first[0] * rgxx
        return float(val), gx, gxx

    def total(self, traj: Trajectory) -> float:
        """Full augmented cost of a trajectory."""
        total = total_base_cost(traj, self.base, self.schedule)
        if self.al is not None:
            g = np.array([
                self.plant.touchdown_residual(traj.X[k, :self.n_phys], f)[0]
                for _, k, f in self.touchdowns
            ])
            value, _, _ = al_terms(g, self.al)
            total += value
        if self._reb_active():
            total += float(np.sum(self._torque_penalty_value(traj.U)))
            for i, mode in enumerate(self.schedule.modes):
                if not mode.contacts:
                    continue
                sel = self._mode_slice(i)
                total += float(np.sum(self._force_penalty_values(
                    i, traj.Xs[sel, :self.n_phys], traj.U[sel])))
        return float(total)

    # -- bulk interface for the sweep ------------------------------------

    def expansions(self, traj: Trajectory) -> CostExpansions:
        N = traj.horizon
        nx, nu = self.nx, self.nu
        dt = traj.step_durations()
        L = np.zeros(N)
        Lx = np.zeros((N, nx))
        Lu = np.zeros((N, nu))
        Lxx = np.zeros((N, nx, nx))
        Luu = np.zeros((N, nu, nu))
        Lux = np.zeros((N, nu, nx))
        for i in range(self.schedule.n_modes):
            sel = self._mode_slice(i)
            vals = self._bulk_knot_expansions(
                i, traj.Xs[sel], traj.U[sel], dt[sel])
            L[sel], Lx[sel], Lu[sel], Lxx[sel], Luu[sel], Lux[sel] = vals

        n_modes = self.schedule.n_modes
        phi = np.zeros(n_modes)
        phix = np.zeros((n_modes, nx))
        phixx = np.zeros((n_modes, nx, nx))
        for i, knot in enumerate(self.schedule.boundary_knots):
            phi[i], phix[i], phixx[i] = self.boundary_expansion(i, traj.X[knot])
        return CostExpansions(L, Lx, Lu, Lxx, Luu, Lux, phi, phix, phixx)

    # -- internals --------------------------------------------------------

    def _mode_slice(self, i: int) -> slice:
        bounds = (0,) + self.schedule.boundary_knots
        return slice(bounds[i], bounds[i + 1])

    def _knot_dt(self, mode_index: int, x, dt):
        if dt is not None:
            return float(dt)
        if self.scaled:
            return float(x[self.n_phys + mode_index] / self.schedule.knots[mode_index])
        raise ValueError("dt required for discrete-time knot evaluation")

    def _reb_active(self) -> bool:
        return self.reb is not None and self.reb.weight > 0.0

    def _bulk_knot_expansions(self, i: int, X, U, dt):
        """Expansions for a batch of knots all in mode i; X is (m, nx)."""
        np_, nx, nu = self.n_phys, self.nx, self.nu
        m = X.shape[0]
        Xp = X[:, :np_]
        E = Xp - self.base.x_ref[i]
        Q2 = 2.0 * self.base.Q[i]
        R2 = 2.0 * self.base.R[i]
        l = np.einsum("ki,ij,kj->k", E, self.base.Q[i], E) \
            + np.einsum("ki,ij,kj->k", U, self.base.R[i], U)
        lx = E @ Q2
        lu = U @ R2

        L = dt * l
        Lx = np.zeros((m, nx))
        Lu = dt[:, None] * lu
        Lxx = np.zeros((m, nx, nx))
        Luu = dt[:, None, None] * R2
        Lux = np.zeros((m, nu, nx))
        Lx[:, :np_] = dt[:, None] * lx
        Lxx[:, :np_, :np_] = dt[:, None, None] * Q2
        if self.scaled:
            zc = np_ + i
            K_i = self.schedule.knots[i]
            Lx[:, zc] = l / K_i
            Lxx[:, :np_, zc] = lx / K_i
            Lxx[:, zc, :np_] = lx / K_i
            Lux[:, :, zc] = lu / K_i

        if self._reb_active():
            eb, delta, k = self.reb.weight, self.reb.delta, self.reb.order
            if getattr(self.plant, "u_max", None) is not None:
                um = self.plant.u_max
                for sgn in (-1.0, 1.0):
                    c = um + sgn * U                      # (m, nu)
                    L += eb * reb_value(c, delta, k).sum(axis=1)
                    Lu += eb * sgn * reb_grad(c, delta, k)
                    hess = eb * reb_hess(c, delta, k)     # sgn^2 = 1
                    Luu[:, range(nu), range(nu)] += hess
            if self.schedule.modes[i].contacts and isinstance(self.plant, RobotPlant):
                fL, fx, fu, fxx, fuu, fux = self._force_penalty_expansions(i, Xp, U)
                L += fL
                Lx[:, :np_] += fx
                Lu += fu
                Lxx[:, :np_, :np_] += fxx
                Luu += fuu
                Lux[:, :, :np_] += fux
        return L, Lx, Lu, Lxx, Luu, Lux

    def _force_margin_matrix(self) -> np.ndarray:
        mu = self.plant.model.friction_coeff
        return np.array([[0.0, 1.0], [-1.0, mu], [1.0, mu]])

    def _force_margins(self, i, Xp, U):
        contacts = self.schedule.modes[i].contacts
        F = dyn.contact_forces(self.plant.model, Xp, U, contacts)  # (m, c, 2)
        return np.einsum("rs,kcs->kcr", self._force_margin_matrix(), F)

    def _force_penalty_values(self, i, Xp, U):
        eb, delta, k = self.reb.weight, self.reb.delta, self.reb.order
        c = self._force_margins(i, np.atleast_2d(Xp), np.atleast_2d(U))
        return eb * reb_value(c, delta, k).sum(axis=(1, 2))

    def _force_penalty_value(self, i, x, u) -> float:
        if not self.schedule.modes[i].contacts or not isinstance(self.plant, RobotPlant):
            return 0.0
        return float(self._force_penalty_values(i, x[None, :], u[None, :])[0])

    def _torque_penalty_value(self, U):
        if getattr(self.plant, "u_max", None) is None:
            return 0.0 * np.sum(U, axis=-1)
        eb, delta, k = self.reb.weight, self.reb.delta, self.reb.order
        um = self.plant.u_max
        return eb * (reb_value(um - U, delta, k).sum(axis=-1)
                     + reb_value(um + U, delta, k).sum(axis=-1))

    def _force_penalty_expansions(self, i, Xp, U):
        """Barrier-chain derivatives of the stance-force margins (batched)."""
        model = self.plant.model
        contacts = self.schedule.modes[i].contacts
        eb, delta, k = self.reb.weight, self.reb.delta, self.reb.order
        A = self._force_margin_matrix()
        m = Xp.shape[0]
        np_, nu = self.n_phys, self.nu
        nt = np_ + nu

        F = dyn.contact_forces(model, Xp, U, contacts)                   # (m,c,2)
        dFx, dFu = dyn.contact_force_jacobians(model, Xp, U, contacts)   # (m,c,2,14/4)
        d2F = dyn.contact_force_hessians(model, Xp, U, contacts)         # (m,c,2,18,18)

        c = np.einsum("rs,kcs->kcr", A, F)                               # (m,c,3)
        cth = np.concatenate([
            np.einsum("rs,kcsj->kcrj", A, dFx),
            np.einsum("rs,kcsj->kcrj", A, dFu)], axis=-1)                # (m,c,3,18)
        cthth = np.einsum("rs,kcsij->kcrij", A, d2F)                     # (m,c,3,18,18)

        b0 = reb_value(c, delta, k)
        b1 = reb_grad(c, delta, k)
        b2 = reb_hess(c, delta, k)
        L = eb * b0.sum(axis=(1, 2))
        gth = eb * np.einsum("kcr,kcrj->kj", b1, cth)
        hth = eb * (np.einsum("kcr,kcri,kcrj->kij", b2, cth, cth)
                    + np.einsum("kcr,kcrij->kij", b1, cthth))
        fx = gth[:, :np_]
        fu = gth[:, np_:]
        fxx = hth[:, :np_, :np_]
        fuu = hth[:, np_:, np_:]
        fux = hth[:, np_:, :np_]
        return L, fx, fu, fxx, fuu, fux


# -----------------------------------------------------------------------------
# Outer loop (penalty/multiplier updates wrapped around full solver runs)
# -----------------------------------------------------------------------------

@dataclass
class OuterIteration:
    eta: int
    sigma: float
    delta: float | None
    multipliers: tuple[float, ...]
    gsq: float
    base_cost: float
    cost: float
    solve_report: object


@dataclass
class OuterReport:
    iterations: list[OuterIteration] = field(default_factory=list)
    converged: bool = False
    reason: str = ""


@dataclass
class OuterResult:
    traj: Trajectory
    policy: object
    v0: object
    report: OuterReport
    al: ALState | None
    reb: ReBState | None
    converged: bool
    cost: float


def outer_loop(problem, U0=None, traj0=None, al: ALState | None = ALState(),
               reb: ReBState | None = None, solver_config=None,
               eps_al: float = 1e-4, max_al_iter: int = 10) -> OuterResult:
    """Alternate full solver runs with penalty/multiplier/threshold updates.

    Solves the problem under the current augmented cost, measures the
    touchdown residuals, and, while their squared sum exceeds eps_al, grows
    the penalty, steps the multipliers, shrinks the barrier relaxation, and
    re-solves warm-started from the previous optimum.
    """
    from hyddp import solver as _solver

    solver_config = solver_config or _solver.SolverConfig()
    n_constraints = len(problem.schedule.touchdown_boundaries())
    if al is not None:
        al = al.expanded(n_constraints)

    def metrics(traj):
        return {
            "base_cost": problem.base_cost_value(traj),
            "gsq": problem.switching_residuals(traj).total_sq,
        }

    report = OuterReport()
    prob = problem.with_constraint_state(al, reb)
    result = _solver.solve(prob, U0=U0, traj0=traj0, config=solver_config,
                           metrics_fn=metrics)
    residuals = problem.switching_residuals(result.traj)

    eta = 0
    while True:
        report.iterations.append(OuterIteration(
            eta=eta,
            sigma=al.sigma if al is not None else 0.0,
            delta=reb.delta if reb is not None else None,
            multipliers=al.multipliers if al is not None else (),
            gsq=residuals.total_sq,
            base_cost=problem.base_cost_value(result.traj),
            cost=result.cost,
            solve_report=result.report,
        ))
        if al is None or residuals.total_sq <= eps_al:
            report.converged = True
            report.reason = "switching residuals within tolerance"
            break
        if eta >= max_al_iter:
            report.reason = "outer iteration cap reached"
            break
        al = al_update(al, residuals.values)
        if reb is not None:
            reb = reb.decayed()
        eta += 1
        prob = prob.with_constraint_state(al, reb)
        result = _solver.solve(prob, U0=result.traj.U, config=solver_config,
                               metrics_fn=metrics)
        residuals = problem.switching_residuals(result.traj)

    return OuterResult(traj=result.traj, policy=result.policy, v0=result.v0,
                       report=report, al=al, reb=reb,
                       converged=report.converged, cost=result.cost)
