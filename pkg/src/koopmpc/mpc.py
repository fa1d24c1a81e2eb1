"""Receding-horizon quadratic control on lifted linear models.

The finite-horizon problem is condensed onto the stacked input sequence:
predicted lifted states are eliminated by substitution, the stage cost acts
on the recovered state (so the QP size scales with the horizon and the input
dimension, not with the lifted dimension), and input and input-rate bounds
become box and inequality rows of one small QP per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory, rk4_step
from .errors import DivergenceError, InfeasibleError, InvalidInputError
from .numerics import QpProblem, solve_qp_info
from .sysid import DelayCoordinates


def _weight_matrix(w, dim, name):
    arr = np.asarray(w, dtype=float)
    if arr.ndim == 0:
        arr = float(arr) * np.eye(dim)
    if arr.shape != (dim, dim):
        raise InvalidInputError(f"{name} must be scalar or ({dim}, {dim})")
    return arr


def _bound_vector(v, dim):
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        return np.full(dim, float(arr))
    return arr.reshape(-1)


@dataclass
class MpcConfig:
    """Quadratic weights, horizon, bounds, and reference of the tracking QP.

    ``terminal_weight`` defaults to the stage weight ``q``. Bounds may be
    scalars or per-input vectors; rate bounds constrain u_k - u_{k-1} with
    the first difference taken against the previously applied input.
    """

    q: np.ndarray
    ru: float = 0.0
    rdu: float = 0.0
    horizon: int = 1
    u_min: float = -np.inf
    u_max: float = np.inf
    du_min: float = -np.inf
    du_max: float = np.inf
    reference: np.ndarray = None
    terminal_weight: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        if self.q.ndim != 2 or self.q.shape[0] != self.q.shape[1]:
            raise InvalidInputError("q must be a square matrix")
        if np.min(np.linalg.eigvalsh(0.5 * (self.q + self.q.T))) < -1e-8:
            raise InvalidInputError("q must be positive semidefinite")
        if self.horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        self.reference = (
            np.zeros(self.q.shape[0])
            if self.reference is None
            else np.asarray(self.reference, dtype=float).reshape(-1)
        )
        if self.reference.size != self.q.shape[0]:
            raise InvalidInputError("reference length must match q")
        if np.any(np.asarray(self.u_min) > np.asarray(self.u_max)) or np.any(
            np.asarray(self.du_min) > np.asarray(self.du_max)
        ):
            raise InvalidInputError("lower bounds must not exceed upper bounds")
        if self.terminal_weight is not None:
            self.terminal_weight = np.asarray(self.terminal_weight, dtype=float)
            if self.terminal_weight.shape != self.q.shape:
                raise InvalidInputError("terminal_weight must match q in shape")


class CondensedMpc:
    """Horizon condensation of one model/config pair.

    Everything that does not depend on the current lifted state or the
    previous input (Hessian, prediction maps, constraint rows) is built once;
    :meth:`qp` then assembles the per-step problem cheaply.
    """

    def __init__(self, model, cfg):
        a, b, c = model.a, model.b, model.c
        dim = a.shape[0]
        q_in = b.shape[1]
        ny = c.shape[0]
        if cfg.q.shape[0] != ny:
            raise InvalidInputError(
                f"state weight is {cfg.q.shape[0]}-dimensional but the model recovers {ny} states"
            )
        n = cfg.horizon
        qf = cfg.q if cfg.terminal_weight is None else cfg.terminal_weight
        ru = _weight_matrix(cfg.ru, q_in, "ru")
        rdu = _weight_matrix(cfg.rdu, q_in, "rdu")

        a_pows = [np.eye(dim)]
        for _ in range(n):
            a_pows.append(a @ a_pows[-1])
        pred = np.vstack([c @ a_pows[k] for k in range(1, n + 1)])  # (n*ny, dim)
        smat = np.zeros((n * ny, n * q_in))
        cab = [c @ a_pows[k] @ b for k in range(n)]  # c a^k b blocks
        for k in range(1, n + 1):
            for j in range(k):
                smat[(k - 1) * ny : k * ny, j * q_in : (j + 1) * q_in] = cab[k - 1 - j]

        qbar = np.zeros((n * ny, n * ny))
        for k in range(n - 1):
            qbar[k * ny : (k + 1) * ny, k * ny : (k + 1) * ny] = cfg.q
        qbar[(n - 1) * ny :, (n - 1) * ny :] = qf
        rubar = np.kron(np.eye(n), ru)
        rdubar = np.kron(np.eye(n), rdu)
        lmat = np.kron(np.eye(n), np.eye(q_in))
        lmat -= np.kron(np.eye(n, k=-1), np.eye(q_in))
        emat = np.zeros((n * q_in, q_in))
        emat[:q_in] = np.eye(q_in)

        half = smat.T @ qbar @ smat + rubar + lmat.T @ rdubar @ lmat
        self.h = half + half.T  # = 2 * half, exactly symmetric
        self.g_state = 2.0 * smat.T @ qbar @ pred
        self.g_const = -2.0 * smat.T @ qbar @ np.tile(cfg.reference, n)
        self.g_uprev = -2.0 * lmat.T @ rdubar @ emat
        self.lb = np.tile(_bound_vector(cfg.u_min, q_in), n)
        self.ub = np.tile(_bound_vector(cfg.u_max, q_in), n)
        du_max = np.tile(_bound_vector(cfg.du_max, q_in), n)
        du_min = np.tile(_bound_vector(cfg.du_min, q_in), n)
        rate_finite = np.isfinite(du_max).any() or np.isfinite(du_min).any()
        self.a_ineq = np.vstack([lmat, -lmat]) if rate_finite else None
        self._du_max = du_max
        self._du_min = du_min
        self._emat = emat
        self.model = model
        self.cfg = cfg
        self.horizon = n
        self.input_dim = q_in

    def qp(self, z0, u_prev):
        z0 = np.asarray(z0, dtype=float).reshape(-1)
        u_prev = np.asarray(u_prev, dtype=float).reshape(-1)
        if z0.size != self.model.a.shape[0]:
            raise InvalidInputError("lifted state length does not match the model")
        if u_prev.size != self.input_dim:
            raise InvalidInputError("u_prev length does not match the model input")
        g = self.g_state @ z0 + self.g_const + self.g_uprev @ u_prev
        b_ineq = None
        if self.a_ineq is not None:
            shift = self._emat @ u_prev
            b_ineq = np.concatenate([self._du_max + shift, -self._du_min - shift])
        return QpProblem(
            h=self.h, g=g, a_ineq=self.a_ineq, b_ineq=b_ineq, lb=self.lb, ub=self.ub
        )

    def is_feasible(self, u_seq, u_prev, tol=1e-9):
        u_seq = np.asarray(u_seq, dtype=float).reshape(-1)
        if np.any(u_seq < self.lb - tol) or np.any(u_seq > self.ub + tol):
            return False
        if self.a_ineq is None:
            return True
        qp = self.qp(np.zeros(self.model.a.shape[0]), u_prev)
        return bool(np.all(qp.a_ineq @ u_seq <= qp.b_ineq + tol))


def condense_qp(model, z0, u_prev, cfg):
    """Single-shot condensation of the horizon problem into a QpProblem."""
    return CondensedMpc(model, cfg).qp(z0, u_prev)


@dataclass
class MpcStep:
    """Outcome of one receding-horizon solve."""

    u: np.ndarray                 # applied input (first element of the plan)
    input_sequence: np.ndarray    # (q, N) planned inputs
    predicted_states: np.ndarray  # (ny, N+1) recovered states along the plan
    qp_iterations: int
    kkt_residual: float
    warm_started: bool = False


def _plan_states(model, z0, u_seq):
    n = u_seq.shape[1]
    out = np.empty((model.c.shape[0], n + 1))
    z = z0
    out[:, 0] = model.c @ z
    for k in range(n):
        z = model.a @ z + model.b @ u_seq[:, k]
        out[:, k + 1] = model.c @ z
    return out


def mpc_step(
    model,
    x_measured,
    u_prev,
    cfg,
    history_states=None,
    history_inputs=None,
    warm_start=None,
    qp_tol=1e-8,
    _condensed=None,
):
    """Solve the horizon problem from a fresh measurement and return the plan.

    The measurement is lifted through the model (consuming history for delay
    kinds); the model's own predictions are never fed back in. The returned
    ``u`` is the first element of the optimized sequence, clipped to the
    input box to remove solver-tolerance dust.
    """
    cond = CondensedMpc(model, cfg) if _condensed is None else _condensed
    u_prev = np.asarray(u_prev, dtype=float).reshape(-1)
    z0 = model.lift(x_measured, history_states=history_states, history_inputs=history_inputs)
    qp = cond.qp(z0, u_prev)
    warm = None
    if warm_start is not None and cond.is_feasible(warm_start, u_prev):
        warm = np.asarray(warm_start, dtype=float).reshape(-1)
    sol, info = solve_qp_info(qp, x0=warm, tol=qp_tol)
    q_in = cond.input_dim
    u_seq = np.clip(sol.reshape(cond.horizon, q_in).T, qp.lb[:q_in, None], qp.ub[:q_in, None])
    du0 = u_seq[:, 0] - u_prev
    assert np.all(du0 <= _bound_vector(cfg.du_max, q_in) + 1e-7)
    assert np.all(du0 >= _bound_vector(cfg.du_min, q_in) - 1e-7)
    return MpcStep(
        u=u_seq[:, 0].copy(),
        input_sequence=u_seq,
        predicted_states=_plan_states(model, z0, u_seq),
        qp_iterations=info["iterations"],
        kkt_residual=info["kkt_residual"],
        warm_started=warm is not None,
    )


@dataclass
class ClosedLoopResult:
    """True-plant trajectory under receding-horizon control, with bookkeeping."""

    trajectory: Trajectory
    stage_costs: np.ndarray
    cumulative_cost: np.ndarray
    solve_stats: dict
    warmup_steps: int = 0

    @property
    def total_cost(self):
        return float(self.cumulative_cost[-1]) if self.cumulative_cost.size else 0.0

    @property
    def final_state(self):
        return self.trajectory.states[:, -1]


def _stage_cost(cfg, x, u, u_prev):
    err = x - cfg.reference
    du = u - u_prev
    ru = _weight_matrix(cfg.ru, u.size, "ru")
    rdu = _weight_matrix(cfg.rdu, u.size, "rdu")
    return float(err @ cfg.q @ err + u @ ru @ u + du @ rdu @ du)


def closed_loop_run(plant, model, cfg, x0, t_end, dt, qp_tol=1e-8):
    """Drive the true plant with receding-horizon control on the model.

    At every step the true state is measured, lifted, and a fresh horizon
    problem is solved warm-started from the shifted previous plan; the first
    planned input is applied to the plant for one integrator step. Stage
    costs are evaluated on the true state with the applied input. Delay
    models idle with u = 0 while the measurement history fills.
    """
    if abs(dt - model.dt) > 1e-12 * max(1.0, abs(model.dt)):
        raise InvalidInputError(f"dt {dt} does not match the model timestep {model.dt}")
    n_steps = int(np.floor(t_end / dt + 1e-9))
    if n_steps < 1:
        raise InvalidInputError("t_end must cover at least one step")
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.size != plant.state_dim:
        raise InvalidInputError("x0 length must match the plant")
    q_in = model.input_dim
    warmup = model.lifting.history_steps if isinstance(model.lifting, DelayCoordinates) else 0
    cond = CondensedMpc(model, cfg)
    states = np.empty((plant.state_dim, n_steps + 1))
    inputs = np.empty((q_in, n_steps))
    stage = np.empty(n_steps)
    iters = np.zeros(n_steps, dtype=int)
    resid = np.full(n_steps, np.nan)
    warm_flags = np.zeros(n_steps, dtype=bool)
    states[:, 0] = x
    u_prev = np.zeros(q_in)
    prev_plan = None
    times = np.arange(n_steps + 1) * dt

    def partial(k):
        traj = Trajectory(times[: k + 1], states[:, : k + 1], inputs[:, :k])
        return ClosedLoopResult(
            trajectory=traj,
            stage_costs=stage[:k].copy(),
            cumulative_cost=np.cumsum(stage[:k]),
            solve_stats={
                "iterations": iters[:k].copy(),
                "kkt_residual": resid[:k].copy(),
                "warm_started": warm_flags[:k].copy(),
            },
            warmup_steps=warmup,
        )

    u_idle = np.clip(np.zeros(q_in), _bound_vector(cfg.u_min, q_in), _bound_vector(cfg.u_max, q_in))
    for k in range(n_steps):
        if k < warmup:
            u = u_idle.copy()
        else:
            warm = None
            if prev_plan is not None:
                warm = np.concatenate([prev_plan[q_in:], prev_plan[-q_in:]])
            try:
                step = mpc_step(
                    model,
                    x,
                    u_prev,
                    cfg,
                    history_states=states[:, :k],
                    history_inputs=inputs[:, :k],
                    warm_start=warm,
                    qp_tol=qp_tol,
                    _condensed=cond,
                )
            except InfeasibleError as err:
                raise InfeasibleError(f"horizon problem infeasible at step {k}: {err}") from None
            u = step.u
            prev_plan = step.input_sequence.T.reshape(-1)
            iters[k] = step.qp_iterations
            resid[k] = step.kkt_residual
            warm_flags[k] = step.warm_started
        inputs[:, k] = u
        stage[k] = _stage_cost(cfg, x, u, u_prev)
        try:
            x = rk4_step(plant, x, u, times[k], dt)
        except DivergenceError as err:
            raise DivergenceError(str(err), partial=partial(k)) from None
        if np.max(np.abs(x)) > 1e6:
            raise DivergenceError(
                f"plant state exceeded 1e6 at t={times[k + 1]:.4g}", partial=partial(k)
            )
        states[:, k + 1] = x
        u_prev = u

    traj = Trajectory(times, states, inputs)
    return ClosedLoopResult(
        trajectory=traj,
        stage_costs=stage,
        cumulative_cost=np.cumsum(stage),
        solve_stats={
            "iterations": iters,
            "kkt_residual": resid,
            "warm_started": warm_flags,
        },
        warmup_steps=warmup,
    )
