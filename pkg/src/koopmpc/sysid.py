"""Fitting linear operator models with control, and rolling them forward.

All fits reduce to one minimum-norm least-squares regression over lifted
snapshots; what differs between model kinds is the lifting. Models are
immutable after fitting and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory, sample_hash
from .errors import (
    InsufficientDataError,
    InvalidInputError,
    MissingHistoryError,
    NoEigenfunctionError,
    UnknownLevelError,
)
from .numerics import DEFAULT_SVD_TOL, lstsq_min_norm
from .observables import (
    DelaySpec,
    Dictionary,
    delay_embed,
    eval_dictionary,
    eval_gradients,
    identity_dictionary,
    recovery_matrix,
)

KIND_DMDC = "dmdc"
KIND_EDMDC = "edmdc"
KIND_DELAY_MISO = "delay-miso"
KIND_DELAY_AUGMENTED = "delay-augmented"
DELAY_KINDS = (KIND_DELAY_MISO, KIND_DELAY_AUGMENTED)


@dataclass(frozen=True)
class DelayCoordinates:
    """Descriptor of the delay-coordinate lifting attached to delay models."""

    spec: DelaySpec
    coords: tuple
    state_dim: int
    input_dim: int

    @property
    def n_embed(self):
        return len(self.coords)

    @property
    def z_dim(self):
        return self.spec.d1 * self.n_embed

    @property
    def aug_dim(self):
        return self.z_dim + (self.spec.d2 - 1) * self.input_dim

    @property
    def history_steps(self):
        """Past steps needed (beyond the current sample) to build a lifted state."""
        return (max(self.spec.d1, self.spec.d2) - 1) * self.spec.tau_steps


@dataclass
class LinearControlModel:
    """Discrete-time model z' = a z + b u with state recovery x = c z."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    lifting: object  # Dictionary or DelayCoordinates
    dt: float
    kind: str
    fit_residual: float = float("nan")
    training_hash: str | None = None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        d = self.a.shape[0]
        if self.a.shape != (d, d) or self.b.shape[0] != d or self.c.shape[1] != d:
            raise InvalidInputError("model matrices have inconsistent shapes")

    @property
    def lifted_dim(self):
        return self.a.shape[0]

    @property
    def input_dim(self):
        return self.b.shape[1]

    @property
    def recovered_dim(self):
        return self.c.shape[0]

    def lift(self, x, history_states=None, history_inputs=None):
        """Lifted coordinates for a measured state (plus history for delay kinds)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if isinstance(self.lifting, Dictionary):
            return eval_dictionary(self.lifting, x)
        dc = self.lifting
        tau = dc.spec.tau_steps
        need_s = (dc.spec.d1 - 1) * tau
        need_u = (dc.spec.d2 - 1) * tau
        hs = None if history_states is None else np.atleast_2d(np.asarray(history_states, float))
        hi = None if history_inputs is None else np.atleast_2d(np.asarray(history_inputs, float))
        if need_s and (hs is None or hs.shape[1] < need_s):
            raise MissingHistoryError(f"need {need_s} past states for the delay lifting")
        if need_u and (hi is None or hi.shape[1] < need_u):
            raise MissingHistoryError(f"need {need_u} past inputs for the delay lifting")
        blocks = [x[list(dc.coords)]]
        for j in range(1, dc.spec.d1):
            blocks.append(hs[list(dc.coords), -j * tau])
        for j in range(1, dc.spec.d2):
            blocks.append(hi[:, -j * tau])
        return np.concatenate(blocks)


@dataclass
class ParametrizedFamily:
    """One autonomous lifted operator per discrete input level: z' = a(u) z."""

    levels: tuple
    mats: tuple
    lifting: Dictionary
    c: np.ndarray
    dt: float
    fit_residuals: tuple = ()

    def level_index(self, u, tol=1e-9):
        u = np.asarray(u, dtype=float).reshape(-1)
        for i, lv in enumerate(self.levels):
            if lv.size == u.size and np.max(np.abs(lv - u)) <= tol:
                return i
        raise UnknownLevelError(f"input {u} does not match any fitted level")

    @property
    def lifted_dim(self):
        return self.mats[0].shape[0]


def _regress(reg, target, svd_tol):
    """w with w @ reg ~= target, minimum norm; returns (w, frobenius residual)."""
    w = lstsq_min_norm(reg.T, target.T, svd_tol).T
    residual = float(np.linalg.norm(w @ reg - target))
    return w, residual


def fit_dmdc(data, svd_tol=DEFAULT_SVD_TOL):
    """Least-squares fit of x' = A x + B u on raw state snapshots."""
    n, q, m = data.state_dim, data.input_dim, data.n_samples
    if m < n + q:
        raise InsufficientDataError(f"need at least {n + q} samples, got {m}")
    reg = np.vstack([data.x, data.u])
    w, residual = _regress(reg, data.xp, svd_tol)
    return LinearControlModel(
        a=w[:, :n],
        b=w[:, n:],
        c=np.eye(n),
        lifting=identity_dictionary(n),
        dt=data.dt,
        kind=KIND_DMDC,
        fit_residual=residual,
        training_hash=sample_hash(data),
    )


def fit_edmdc(data, dic, svd_tol=DEFAULT_SVD_TOL):
    """DMDc after lifting the snapshots through an observable dictionary."""
    q, m = data.input_dim, data.n_samples
    d = dic.n_out
    if m < d + q:
        raise InsufficientDataError(f"need at least {d + q} samples, got {m}")
    c = recovery_matrix(dic)
    z = eval_dictionary(dic, data.x)
    zp = eval_dictionary(dic, data.xp)
    reg = np.vstack([z, data.u])
    w, residual = _regress(reg, zp, svd_tol)
    return LinearControlModel(
        a=w[:, :d],
        b=w[:, d:],
        c=c,
        lifting=dic,
        dt=data.dt,
        kind=KIND_EDMDC,
        fit_residual=residual,
        training_hash=sample_hash(data),
    )


def fit_delay_augmented(trajectories, spec, svd_tol=DEFAULT_SVD_TOL, coords=None, dt=None):
    """Fit a causal delay-coordinate model in input-augmented form.

    The augmented state stacks [x_k, ..., x_{k-d1+1}, u_{k-1}, ..., u_{k-d2+1}]
    and only the newest-sample block is regressed (on the augmented state and
    the current input). Every other row of the operator is a structural copy:
    an identity shift inside the state block, a zero row that receives u_k
    through the input column, and an identity shift over the stored inputs.
    Causality therefore holds by construction, with no constrained solve.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise InsufficientDataError("need at least one trajectory")
    if spec.tau_steps != 1:
        raise InvalidInputError("the augmented delay form requires tau_steps == 1")
    n = trajectories[0].state_dim
    q = trajectories[0].input_dim
    coords = tuple(range(n)) if coords is None else tuple(int(c) for c in coords)
    dc = DelayCoordinates(spec=spec, coords=coords, state_dim=n, input_dim=q)
    zs, vs, zns = [], [], []
    for traj in trajectories:
        z, v, zn = delay_embed(traj, spec, coords=coords)
        zs.append(z)
        vs.append(v)
        zns.append(zn)
    z = np.hstack(zs)
    v = np.hstack(vs)
    zn = np.hstack(zns)
    n_e = dc.n_embed
    dim = dc.aug_dim
    aug = np.vstack([z, v[q:]]) if spec.d2 > 1 else z
    reg = np.vstack([aug, v[:q]])
    if reg.shape[1] < dim + q:
        raise InsufficientDataError(
            f"need at least {dim + q} embedded columns, got {reg.shape[1]}"
        )
    w, residual = _regress(reg, zn[:n_e], svd_tol)
    a = np.zeros((dim, dim))
    b = np.zeros((dim, q))
    a[:n_e] = w[:, :dim]
    b[:n_e] = w[:, dim:]
    for j in range(1, spec.d1):
        a[j * n_e : (j + 1) * n_e, (j - 1) * n_e : j * n_e] = np.eye(n_e)
    if spec.d2 > 1:
        r0 = dc.z_dim
        b[r0 : r0 + q] = np.eye(q)
        for j in range(1, spec.d2 - 1):
            a[r0 + j * q : r0 + (j + 1) * q, r0 + (j - 1) * q : r0 + j * q] = np.eye(q)
    c = np.hstack([np.eye(n_e), np.zeros((n_e, dim - n_e))])
    return LinearControlModel(
        a=a,
        b=b,
        c=c,
        lifting=dc,
        dt=float(trajectories[0].times[1] - trajectories[0].times[0]) if dt is None else dt,
        kind=KIND_DELAY_AUGMENTED,
        fit_residual=residual,
    )


def fit_parametrized(data, dic, levels, svd_tol=DEFAULT_SVD_TOL):
    """Fit one autonomous lifted operator per discrete input level."""
    lvals = [np.atleast_1d(np.asarray(lv, dtype=float)) for lv in levels]
    d = dic.n_out
    c = recovery_matrix(dic)
    z = eval_dictionary(dic, data.x)
    zp = eval_dictionary(dic, data.xp)
    mats, residuals = [], []
    for lv in lvals:
        if lv.size != data.input_dim:
            raise InvalidInputError(f"level {lv} does not match input dimension")
        mask = np.all(np.abs(data.u - lv[:, None]) <= 1e-12, axis=0)
        count = int(np.count_nonzero(mask))
        if count < d:
            raise InsufficientDataError(
                f"level {lv.tolist()} has {count} samples, need at least {d}"
            )
        a_i, res = _regress(z[:, mask], zp[:, mask], svd_tol)
        mats.append(a_i)
        residuals.append(res)
    return ParametrizedFamily(
        levels=tuple(lvals),
        mats=tuple(mats),
        lifting=dic,
        c=c,
        dt=data.dt,
        fit_residuals=tuple(residuals),
    )


@dataclass(frozen=True)
class Eigenfunction:
    """A sparse library expansion phi(x) = Theta(x) @ coefficients."""

    eigenvalue: float
    coefficients: np.ndarray  # unit norm over the library
    residual: float
    residual_history: tuple

    def support(self, threshold=1e-12):
        return tuple(int(i) for i in np.flatnonzero(np.abs(self.coefficients) > threshold))

    @property
    def sparsity(self):
        """Number of active library terms (coefficients above rounding level)."""
        return len(self.support())


def identify_eigenfunctions(
    x,
    xdot,
    theta,
    eigenvalue,
    sparsity_threshold=0.05,
    residual_bound=1e-6,
    max_rounds=20,
):
    """Identify a sparse generator eigenfunction at a trial eigenvalue.

    Builds the matrix whose k-th row is xdot_k . grad Theta(x_k) - lambda
    Theta(x_k), takes the right singular vector of smallest singular value,
    then repeatedly zeroes coefficients below ``sparsity_threshold`` (relative
    to the largest magnitude) and re-solves on the surviving support. A
    thresholding round is kept only if it does not increase the residual, so
    the recorded residual history is nonincreasing.

    Raises NoEigenfunctionError if the final residual exceeds
    ``residual_bound``.
    """
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    if x.ndim != 2 or xdot.shape != x.shape:
        raise InvalidInputError("x and xdot must be matching (n, m) arrays")
    grads = eval_gradients(theta, x)  # (p, n, m)
    vals = eval_dictionary(theta, x)  # (p, m)
    mmat = (np.sum(grads * xdot[None, :, :], axis=1) - eigenvalue * vals).T  # (m, p)
    p = mmat.shape[1]

    def smallest_right_singular(cols):
        sub = mmat[:, cols]
        _, _, vt = np.linalg.svd(sub, full_matrices=sub.shape[0] < sub.shape[1])
        xi = np.zeros(p)
        xi[cols] = vt[-1]
        return xi / np.linalg.norm(xi)

    xi = smallest_right_singular(list(range(p)))
    residual = float(np.linalg.norm(mmat @ xi))
    history = [residual]
    support = list(range(p))
    for _ in range(max_rounds):
        new_support = [int(i) for i in np.flatnonzero(np.abs(xi) >= sparsity_threshold * np.max(np.abs(xi)))]
        if new_support == support:
            break
        candidate = smallest_right_singular(new_support)
        cand_res = float(np.linalg.norm(mmat @ candidate))
        if cand_res > residual:
            break
        xi, residual, support = candidate, cand_res, new_support
        history.append(residual)
    lead = int(np.flatnonzero(np.abs(xi) > 1e-12)[0])
    if xi[lead] < 0:
        xi = -xi
    if residual > residual_bound:
        raise NoEigenfunctionError(
            f"no eigenfunction at eigenvalue {eigenvalue}: residual {residual:.2e} "
            f"exceeds bound {residual_bound:.1e}",
            residual=residual,
        )
    return Eigenfunction(
        eigenvalue=float(eigenvalue),
        coefficients=xi,
        residual=residual,
        residual_history=tuple(history),
    )


@dataclass
class EigenfunctionModel:
    """Collected eigenfunctions over a shared library, optionally with input coupling."""

    library: Dictionary
    entries: list
    input_coupling: object = None  # callable x -> (r, q), if attached

    @property
    def eigenvalues(self):
        return np.array([e.eigenvalue for e in self.entries])

    @property
    def coefficients(self):
        """Stacked coefficient vectors, one row per eigenfunction."""
        return np.stack([e.coefficients for e in self.entries])

    def evaluate(self, x):
        """phi_j(x) for all entries: (r,) at one state or (r, m) on a batch."""
        vals = eval_dictionary(self.library, x)
        coef = np.stack([e.coefficients for e in self.entries])
        return coef @ vals

    def attach_known_coupling(self, g):
        """Input coupling rows grad(phi_j)(x)^T G(x) for a known gain G(x).

        ``g`` maps a state (n,) to the (n, q) input matrix. The attached
        callable evaluates all eigenfunction gradients analytically through
        the library, so no numerical differentiation is involved.
        """
        library = self.library
        entries = list(self.entries)

        def coupling(x):
            x_arr = np.asarray(x, dtype=float).reshape(-1)
            grads = eval_gradients(library, x_arr)  # (p, n)
            gmat = np.atleast_2d(np.asarray(g(x_arr), dtype=float))
            if gmat.shape[0] != x_arr.size:
                gmat = gmat.T
            rows = [e.coefficients @ grads @ gmat for e in entries]
            return np.vstack(rows)

        self.input_coupling = coupling
        return coupling


def plant_derivatives(sys, x, u=None, t=0.0):
    """Analytic state derivatives of a flow plant at sample columns."""
    x = np.asarray(x, dtype=float)
    if u is None:
        u = np.zeros((sys.input_dim, x.shape[1] if x.ndim == 2 else 1))
        if x.ndim == 1:
            u = u[:, 0]
    return np.asarray(sys.rhs(x, np.asarray(u, dtype=float), t), dtype=float)


def difference_derivatives(traj):
    """Central-difference derivative estimates along a trajectory.

    Returns (x, xdot) at the interior samples; a fallback for plants whose
    vector field is not available in closed form.
    """
    dt = float(traj.times[1] - traj.times[0])
    x = traj.states[:, 1:-1]
    xdot = (traj.states[:, 2:] - traj.states[:, :-2]) / (2.0 * dt)
    return x, xdot


def _as_input_matrix(inputs, q):
    u = np.asarray(inputs, dtype=float)
    if u.size == 0:
        return np.zeros((q, 0))
    if u.ndim == 1:
        if q != 1:
            raise InvalidInputError("1-D input sequence only valid for single-input models")
        u = u[None, :]
    if u.shape[0] != q:
        raise InvalidInputError(f"input rows {u.shape[0]} do not match model input dim {q}")
    return u


def predict_rollout(model, x0, inputs, history_states=None, history_inputs=None):
    """Roll a fitted model forward under an input sequence.

    The initial condition is lifted once; afterwards the iteration stays in
    the lifted space and states are recovered through the model's selector at
    every step, never re-lifting intermediate predictions.
    """
    if isinstance(model, ParametrizedFamily):
        u = _as_input_matrix(inputs, model.levels[0].size)
        z = eval_dictionary(model.lifting, np.asarray(x0, dtype=float).reshape(-1))
        c = model.c
        steps = [model.mats[model.level_index(u[:, k])] for k in range(u.shape[1])]
        dt = model.dt
    else:
        u = _as_input_matrix(inputs, model.input_dim)
        z = model.lift(x0, history_states=history_states, history_inputs=history_inputs)
        c = model.c
        steps = None
        dt = model.dt
    n_steps = u.shape[1]
    states = np.empty((c.shape[0], n_steps + 1))
    states[:, 0] = c @ z
    for k in range(n_steps):
        if steps is not None:
            z = steps[k] @ z
        else:
            z = model.a @ z + model.b @ u[:, k]
        states[:, k + 1] = c @ z
    times = np.arange(n_steps + 1) * dt
    return Trajectory(times=times, states=states, inputs=u)
