"""Multi-phase iLQR: regularized backward sweep and line-searched forward sweep.

The solver is agnostic to the underlying system: a problem object supplies
rollouts, per-step Jacobians, cost expansions, and boundary data (terminal
cost slots plus reset-map Jacobians at mode exits).  The backward recursion
uses the Gauss-Newton (tensor-free) Q-expansion; at every mode boundary the
value model is pulled back through the reset-map Jacobian, with the boundary
cost folded in, before the recursion continues into the previous mode.

A problem must provide:

    horizon, nx, nu
    rollout(U) -> Trajectory
    rollout_policy(nominal, policy, eps) -> Trajectory
    total_cost(traj) -> float
    sweep_data(traj) -> SweepData
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hyddp.modes import RolloutError


class NotPositiveDefinite(RuntimeError):
    """Control Hessian failed its Cholesky check; restart with more regularization."""


class SolverFailure(RuntimeError):
    """Backward sweep could not be stabilized within the regularization cap."""


@dataclass(frozen=True)
class SolverConfig:
    tol_cost: float = 1e-6          # expected-reduction convergence threshold
    max_iter: int = 100
    ls_backtracks: int = 10
    ls_factor: float = 0.5
    reg_init: float = 1e-9
    reg_min: float = 1e-9
    reg_max: float = 1e8
    reg_increase: float = 10.0
    reg_decrease: float = 5.0
    ratio_poor: float = 0.1         # actual/expected below this grows the regularizer


@dataclass
class QExpansion:
    qx: np.ndarray
    qu: np.ndarray
    qxx: np.ndarray
    quu: np.ndarray
    qux: np.ndarray
    quu_reg: np.ndarray


@dataclass
class ValueExpansion:
    """Local quadratic value model: expected reduction, gradient, Hessian."""

    dv: float
    vx: np.ndarray
    vxx: np.ndarray


@dataclass
class Policy:
    kappa: np.ndarray   # (N, nu) feedforward steps
    K: np.ndarray       # (N, nu, nx) feedback gains


@dataclass
class BoundaryData:
    """Terminal-slot cost expansion at a mode exit, plus its reset Jacobian."""

    knot: int
    phi: float
    phix: np.ndarray
    phixx: np.ndarray
    reset_jac: np.ndarray | None    # None for the terminal (horizon-end) slot


@dataclass
class SweepData:
    fx: np.ndarray      # (N, nx, nx)
    fu: np.ndarray      # (N, nx, nu)
    L: np.ndarray       # (N,)
    Lx: np.ndarray
    Lu: np.ndarray
    Lxx: np.ndarray
    Luu: np.ndarray
    Lux: np.ndarray
    boundaries: list[BoundaryData]  # ascending knot order; last is terminal


@dataclass
class SolveReport:
    iterations: list[dict] = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    def costs(self) -> np.ndarray:
        return np.array([r["cost"] for r in self.iterations])


@dataclass
class SolveResult:
    traj: object
    policy: Policy
    v0: ValueExpansion
    report: SolveReport
    converged: bool
    cost: float


def q_expansion(lx, lu, lxx, luu, lux, fx, fu, next_value: ValueExpansion,
                reg: float) -> QExpansion:
    """Second-order expansion of the stage action-value (Gauss-Newton form)."""
    vx, vxx = next_value.vx, next_value.vxx
    qx = lx + fx.T @ vx
    qu = lu + fu.T @ vx
    fuT_vxx = fu.T @ vxx
    qxx = lxx + fx.T @ vxx @ fx
    quu = luu + fuT_vxx @ fu
    qux = lux + fuT_vxx @ fx
    qxx = 0.5 * (qxx + qxx.T)
    quu = 0.5 * (quu + quu.T)
    quu_reg = quu + reg * np.eye(quu.shape[0])
    return QExpansion(qx, qu, qxx, quu, qux, quu_reg)


def policy_and_value_update(q: QExpansion):
    """Minimizing control increment and the updated value model.

    Returns (kappa, K, value).  Raises NotPositiveDefinite when the
    regularized control Hessian is not positive definite.
    """
    try:
        chol = np.linalg.cholesky(q.quu_reg)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    rhs = np.column_stack([q.qu, q.qux])
    sol = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    inv_qu = sol[:, 0]
    inv_qux = sol[:, 1:]
    kappa = -inv_qu
    K = -inv_qux
    dv = 0.5 * float(q.qu @ inv_qu)
    vx = q.qx - q.qux.T @ inv_qu
    vxx = q.qxx - q.qux.T @ inv_qux
    vxx = 0.5 * (vxx + vxx.T)
    return kappa, K, ValueExpansion(dv, vx, vxx)


def impact_value_update(value_post: ValueExpansion, reset_jac: np.ndarray,
                        phi: float, phix: np.ndarray,
                        phixx: np.ndarray) -> ValueExpansion:
    """Pull the value model back through a reset map at a mode boundary.

    value_post is the model in the post-reset state; phi* is the expansion of
    the boundary (terminal-slot) cost at the pre-reset state.  The expected
    reduction is unchanged across the boundary.
    """
    vx = phix + reset_jac.T @ value_post.vx
    vxx = phixx + reset_jac.T @ value_post.vxx @ reset_jac
    vxx = 0.5 * (vxx + vxx.T)
    return ValueExpansion(value_post.dv, vx, vxx)


def backward_sweep(data: SweepData, reg: float, config: SolverConfig):
    """Run the value recursion from the horizon end to knot 0.

    On a failed positive-definiteness check the whole sweep restarts with a
    larger regularizer.  Returns (policy, dv1, dv2, v0, reg) where the
    expected cost change of a step of size eps is eps*dv1 + eps^2*dv2.
    """
    N = data.fx.shape[0]
    nu, nx = data.fu.shape[2], data.fx.shape[1]
    if not data.boundaries or data.boundaries[-1].knot != N:
        raise ValueError("sweep data must carry a terminal boundary at knot N")

    while True:
        terminal = data.boundaries[-1]
        value = ValueExpansion(0.0, terminal.phix.copy(), terminal.phixx.copy())
        bmap = {b.knot: b for b in data.boundaries[:-1]}
        kappa = np.zeros((N, nu))
        K = np.zeros((N, nu, nx))
        dv1 = 0.0
        dv2 = 0.0
        ok = True
        for k in range(N - 1, -1, -1):
            q = q_expansion(data.Lx[k], data.Lu[k], data.Lxx[k], data.Luu[k],
                            data.Lux[k], data.fx[k], data.fu[k], value, reg)
            try:
                kappa[k], K[k], value = policy_and_value_update(q)
            except NotPositiveDefinite:
                ok = False
                break
            dv1 += float(kappa[k] @ q.qu)
            dv2 += 0.5 * float(kappa[k] @ q.quu_reg @ kappa[k])
            b = bmap.get(k)
            if b is not None:
                P = b.reset_jac if b.reset_jac is not None else np.eye(nx)
                value = impact_value_update(value, P, b.phi, b.phix, b.phixx)
        if ok:
            return Policy(kappa, K), dv1, dv2, value, reg
        reg = max(reg * config.reg_increase, config.reg_min)
        if reg > config.reg_max:
            raise SolverFailure(
                f"backward sweep not positive definite at regularization cap {config.reg_max:g}")


def forward_sweep(problem, nominal, policy: Policy, eps: float):
    """Closed-loop rollout of the policy at step size eps.

    Returns (trajectory, cost) or None when the rollout diverges (the line
    search treats that as a rejected candidate).
    """
    if not 0.0 < eps <= 1.0:
        raise ValueError("step size must lie in (0, 1]")
    try:
        traj = problem.rollout_policy(nominal, policy, eps)
    except RolloutError:
        return None
    cost = problem.total_cost(traj)
    if not np.isfinite(cost):
        return None
    return traj, cost


def solve(problem, U0=None, traj0=None, config: SolverConfig = SolverConfig(),
          metrics_fn=None) -> SolveResult:
    """Iterate backward/forward sweeps with a backtracking line search.

    Convergence is declared when the expected cost reduction of a full step
    falls below config.tol_cost.  Every accepted iterate strictly decreases
    the cost; if the line search exhausts its backtracks the regularizer is
    grown and, at the cap, the best iterate is returned flagged non-converged.
    """
    if traj0 is None:
        if U0 is None:
            raise ValueError("either U0 or traj0 is required")
        traj = problem.rollout(np.asarray(U0, dtype=float))
    else:
        traj = traj0
    cost = problem.total_cost(traj)
    if not np.isfinite(cost):
        raise SolverFailure("initial trajectory has non-finite cost")

    reg = config.reg_init
    report = SolveReport()
    policy = None
    v0 = None

    def log(it, expected, actual, eps, accepted):
        row = {
            "iteration": it,
            "cost": cost,
            "expected_reduction": expected,
            "actual_reduction": actual,
            "reg": reg,
            "step": eps,
            "accepted": accepted,
        }
        if metrics_fn is not None:
            row.update(metrics_fn(traj))
        report.iterations.append(row)

    for it in range(1, config.max_iter + 1):
        data = problem.sweep_data(traj)
        try:
            policy, dv1, dv2, v0, reg = backward_sweep(data, reg, config)
        except SolverFailure as exc:
            if policy is None:
                raise
            report.reason = str(exc)
            break
        expected_full = -(dv1 + dv2)

        if abs(expected_full) < config.tol_cost:
            report.converged = True
            report.reason = "expected reduction below tolerance"
            log(it, expected_full, 0.0, 0.0, False)
            break

        eps = 1.0
        accepted = None
        for _ in range(config.ls_backtracks):
            cand = forward_sweep(problem, traj, policy, eps)
            if cand is not None and cand[1] < cost:
                accepted = (cand[0], cand[1], eps)
                break
            eps *= config.ls_factor

        if accepted is None:
            reg = reg * config.reg_increase
            log(it, expected_full, 0.0, 0.0, False)
            if reg > config.reg_max:
                report.reason = "line search exhausted at regularization cap"
                break
            continue

        new_traj, new_cost, eps = accepted
        actual = cost - new_cost
        expected_eps = -(eps * dv1 + eps * eps * dv2)
        ratio = actual / expected_eps if expected_eps > 0 else np.inf
        if ratio < config.ratio_poor:
            reg = min(reg * config.reg_increase, config.reg_max)
        else:
            reg = max(reg / config.reg_decrease, config.reg_min)
        traj, cost = new_traj, new_cost
        log(it, expected_full, actual, eps, True)
    else:
        report.reason = "iteration limit reached"

    return SolveResult(traj=traj, policy=policy, v0=v0, report=report,
                       converged=report.converged, cost=cost)
