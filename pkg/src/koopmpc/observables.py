"""Observable dictionaries and time-delay embeddings used to lift states."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, InvalidInputError, UnsupportedDictionaryError


class Monomial:
    """x -> prod_i x_i ** e_i, vectorized over a trailing sample axis."""

    __slots__ = ("exponents",)

    def __init__(self, exponents):
        self.exponents = tuple(int(e) for e in exponents)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        e = np.asarray(self.exponents)
        if x.ndim == 1:
            return float(np.prod(x**e))
        return np.prod(x ** e[:, None], axis=0)

    def __repr__(self):
        return f"Monomial({self.exponents})"


class MonomialGradient:
    """Analytic gradient of a monomial, same vectorization as Monomial."""

    __slots__ = ("exponents",)

    def __init__(self, exponents):
        self.exponents = tuple(int(e) for e in exponents)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[:, None]
        n, m = x.shape
        out = np.zeros((n, m))
        for j, ej in enumerate(self.exponents):
            if ej == 0:
                continue
            reduced = np.asarray(self.exponents, dtype=float)
            reduced[j] -= 1.0
            out[j] = ej * np.prod(x ** reduced[:, None], axis=0)
        return out[:, 0] if single else out

    def __repr__(self):
        return f"MonomialGradient({self.exponents})"


def monomial_label(exponents, prefix="x"):
    parts = []
    for i, e in enumerate(exponents):
        if e == 0:
            continue
        parts.append(f"{prefix}{i + 1}" if e == 1 else f"{prefix}{i + 1}^{e}")
    return "*".join(parts) if parts else "1"


@dataclass(frozen=True)
class Dictionary:
    """Ordered scalar observables with analytic gradients.

    ``funcs[i]`` maps a state (n_in,) or batch (n_in, m) to a scalar or (m,);
    ``grads[i]`` returns the matching gradient of shape (n_in,) or (n_in, m).
    """

    n_in: int
    funcs: tuple
    grads: tuple
    labels: tuple

    def __post_init__(self):
        if not (len(self.funcs) == len(self.grads) == len(self.labels)):
            raise InvalidInputError("funcs, grads, and labels must have equal length")
        if len(self.funcs) == 0:
            raise InvalidInputError("dictionary must contain at least one observable")

    @property
    def n_out(self):
        return len(self.funcs)

    def subset(self, indices):
        idx = [int(i) for i in indices]
        return Dictionary(
            n_in=self.n_in,
            funcs=tuple(self.funcs[i] for i in idx),
            grads=tuple(self.grads[i] for i in idx),
            labels=tuple(self.labels[i] for i in idx),
        )


def monomials_dictionary(n, max_order, include_constant=False):
    """All monomials of total degree 1..max_order in graded-lex order.

    The n linear monomials (the state coordinates) come first, which is what
    :func:`recovery_matrix` relies on. The optional constant observable is
    appended at the end so that property is preserved. Size without the
    constant is C(n + max_order, n) - 1.
    """
    if n < 1 or max_order < 1:
        raise InvalidInputError("n and max_order must be >= 1")
    funcs, grads, labels = [], [], []
    for degree in range(1, max_order + 1):
        for combo in itertools.combinations_with_replacement(range(n), degree):
            e = np.bincount(combo, minlength=n)
            funcs.append(Monomial(e))
            grads.append(MonomialGradient(e))
            labels.append(monomial_label(e))
    if include_constant:
        e = np.zeros(n, dtype=int)
        funcs.append(Monomial(e))
        grads.append(MonomialGradient(e))
        labels.append(monomial_label(e))
    return Dictionary(n_in=n, funcs=tuple(funcs), grads=tuple(grads), labels=tuple(labels))


def identity_dictionary(n):
    """The n state coordinates themselves (linear monomials)."""
    return monomials_dictionary(n, 1)


def eval_dictionary(dic, x):
    """Apply all observables columnwise; (n_in,) -> (d,) and (n_in, m) -> (d, m)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    cols = x[:, None] if single else x
    if cols.shape[0] != dic.n_in:
        raise InvalidInputError(f"state rows {cols.shape[0]} do not match n_in {dic.n_in}")
    out = np.empty((dic.n_out, cols.shape[1]))
    with np.errstate(over="ignore", invalid="ignore"):
        for i, f in enumerate(dic.funcs):
            out[i] = f(cols)
    if out.size and not np.all(np.isfinite(out)):
        raise InvalidInputError("dictionary evaluation produced non-finite values")
    return out[:, 0] if single else out


def eval_gradients(dic, x):
    """Stack all observable gradients at states x: (d, n_in) or (d, n_in, m)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    cols = x[:, None] if single else x
    out = np.empty((dic.n_out, dic.n_in, cols.shape[1]))
    for i, g in enumerate(dic.grads):
        out[i] = g(cols)
    return out[:, :, 0] if single else out


_PROBE_RNG_SEED = 20240

def recovery_matrix(dic):
    """Selector C with C @ f(x) = x for dictionaries led by the state coordinates."""
    n, d = dic.n_in, dic.n_out
    if d < n:
        raise UnsupportedDictionaryError("dictionary has fewer observables than state coordinates")
    rng = np.random.default_rng(_PROBE_RNG_SEED)
    probes = rng.uniform(-2.0, 2.0, size=(n, 4))
    lifted = eval_dictionary(dic, probes)
    if np.max(np.abs(lifted[:n] - probes)) > 1e-12:
        raise UnsupportedDictionaryError(
            "dictionary does not start with the identity state coordinates"
        )
    return np.hstack([np.eye(n), np.zeros((n, d - n))])


@dataclass(frozen=True)
class DelaySpec:
    """Time-delay embedding depths for states (d1) and inputs (d2)."""

    d1: int
    d2: int
    tau_steps: int = 1

    def __post_init__(self):
        if self.d1 < 1 or self.d2 < 1 or self.tau_steps < 1:
            raise InvalidInputError("d1, d2, and tau_steps must all be >= 1")


def delay_embed(traj, spec, coords=None):
    """Hankel-stack a trajectory into delay coordinates, newest sample first.

    Column k of ``z`` is [x_k, x_{k-tau}, ..., x_{k-(d1-1)tau}] over the
    selected coordinates, column k of ``v`` is [u_k, u_{k-tau}, ...], and
    ``z_next`` is ``z`` advanced by one step, so the triple is ready for the
    regression z_next ~ A z + B v.
    """
    coords = list(range(traj.state_dim)) if coords is None else [int(c) for c in coords]
    s = traj.states[coords, :]
    u = traj.inputs
    tau = spec.tau_steps
    n_steps = traj.n_steps
    k_min = (max(spec.d1, spec.d2) - 1) * tau
    m = n_steps - k_min
    if m < 1:
        raise InsufficientDataError(
            f"trajectory with {n_steps} steps is too short for depths "
            f"d1={spec.d1}, d2={spec.d2}, tau={tau}"
        )
    z_blocks = [s[:, k_min - j * tau : n_steps - j * tau] for j in range(spec.d1)]
    zn_blocks = [s[:, k_min + 1 - j * tau : n_steps + 1 - j * tau] for j in range(spec.d1)]
    v_blocks = [u[:, k_min - j * tau : n_steps - j * tau] for j in range(spec.d2)]
    return np.vstack(z_blocks), np.vstack(v_blocks), np.vstack(zn_blocks)
