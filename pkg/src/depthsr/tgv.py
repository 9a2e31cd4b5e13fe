"""Anisotropic second-order TGV with a quadratic data term.

The model is

    E(u, v) = alpha1 * sum |T (grad u - v)| + alpha0 * sum |grad_v v|
              + exp(w_lambda) / 2 * |u - g|^2

with ``T`` the edge-aware tensor built from a 2-channel edge map ``h``. It is
minimised with a fixed number of first-order primal-dual iterations. With
``gradT`` being the true adjoint of ``grad``, the primal steps are descent
steps: ``u`` moves along ``-alpha1 gradT(T p)`` and ``v`` along
``alpha1 T p - alpha0 gradT_v(q)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import grid
from .tape import EPS_NORMAL, Eager, diffusion_tensor, project_unit_ball, tensor_apply

__all__ = [
    "SolverParams",
    "SolverState",
    "SolverDiverged",
    "SCALAR_NAMES",
    "preconditioned_steps",
    "diffusion_tensor",
    "tensor_apply",
    "project_unit_ball",
    "initial_state",
    "pd_iteration",
    "solve",
    "energy",
]

SCALAR_NAMES = (
    "w_lambda",
    "alpha0",
    "alpha1",
    "beta",
    "gamma",
    "sigma_p",
    "sigma_q",
    "tau_u",
    "tau_v",
    "theta",
)


def preconditioned_steps(alpha0, alpha1):
    """Step sizes that make the iteration stable for the given regularisation weights."""
    return {
        "sigma_p": 1.0 / (3.0 * alpha1),
        "sigma_q": 1.0 / (2.0 * alpha0),
        "tau_u": 1.0 / (4.0 * alpha1),
        "tau_v": 1.0 / (alpha1 + 4.0 * alpha0),
    }


class SolverDiverged(FloatingPointError):
    """A non-finite value appeared inside the primal-dual iteration."""

    def __init__(self, iteration, field):
        super().__init__(f"non-finite values in {field} at iteration {iteration}")
        self.iteration = iteration
        self.field = field


@dataclass(frozen=True)
class SolverParams:
    alpha0: float = 1.2
    alpha1: float = 17.0
    beta: float = 9.0
    gamma: float = 0.85
    w_lambda: float = 0.01
    sigma_p: float | None = None
    sigma_q: float | None = None
    tau_u: float | None = None
    tau_v: float | None = None
    theta: float = 1.0
    iters: int = 10
    eps: float = EPS_NORMAL

    def __post_init__(self):
        # unset step sizes default to the diagonal preconditioner of the
        # alpha-weighted operator: 1 / (abs row or column sum)
        for name in ("alpha0", "alpha1"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        steps = preconditioned_steps(self.alpha0, self.alpha1)
        for name, value in steps.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        for name in ("alpha0", "alpha1", "gamma", "sigma_p", "sigma_q", "tau_u", "tau_v"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if int(self.iters) != self.iters or self.iters < 0:
            raise ValueError(f"iters must be a non-negative integer, got {self.iters}")
        if not math.isfinite(self.w_lambda):
            raise ValueError("w_lambda must be finite")

    @property
    def data_weight(self):
        return math.exp(self.w_lambda)

    def scalars(self):
        return {name: getattr(self, name) for name in SCALAR_NAMES}

    def with_scalars(self, values):
        return replace(self, **{k: float(v) for k, v in values.items()})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class SolverState:
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    q: np.ndarray
    u_bar: np.ndarray
    v_bar: np.ndarray


def _zeros_like_channels(u, channels):
    shape = u.shape[:-3] + (channels,) + u.shape[-2:]
    return np.zeros(shape)


def initial_state(g):
    """``u = g``, everything else zero, over-relaxed copies equal to the primal."""
    g = np.asarray(g, dtype=float)
    v = _zeros_like_channels(g, 2)
    return SolverState(
        u=g.copy(),
        v=v,
        p=_zeros_like_channels(g, 2),
        q=_zeros_like_channels(g, 4),
        u_bar=g.copy(),
        v_bar=v.copy(),
    )


def _iterate(ops, st, t, g, P):
    """One primal-dual step written against an executor (``Eager`` or ``Tape``).

    ``st`` is a tuple ``(u, v, p, q, u_bar, v_bar)`` of executor handles and
    ``P`` maps scalar names (plus ``"lam"`` for the exponentiated data weight)
    to handles.
    """
    u, v, p, q, u_bar, v_bar = st

    # dual ascent
    r = ops.tensor_apply(t, ops.sub(ops.grad(u_bar), v_bar))
    p_new = ops.proj(ops.add(p, ops.mul(ops.mul(P["sigma_p"], P["alpha1"]), r)))
    gv = ops.grad_v(v_bar)
    q_new = ops.proj(ops.add(q, ops.mul(ops.mul(P["sigma_q"], P["alpha0"]), gv)))

    # primal descent; the quadratic data term has a closed-form prox
    tp = ops.tensor_apply(t, p_new)
    u_dir = ops.sub(ops.mul(P["alpha1"], ops.gradT(tp)), ops.mul(P["lam"], g))
    num = ops.sub(u, ops.mul(P["tau_u"], u_dir))
    den = ops.add_const(ops.mul(P["tau_u"], P["lam"]), c=1.0)
    u_new = ops.div(num, den)

    v_dir = ops.sub(ops.mul(P["alpha1"], tp), ops.mul(P["alpha0"], ops.gradT_v(q_new)))
    v_new = ops.add(v, ops.mul(P["tau_v"], v_dir))

    # over-relaxation
    u_bar_new = ops.add(u_new, ops.mul(P["theta"], ops.sub(u_new, u)))
    v_bar_new = ops.add(v_new, ops.mul(P["theta"], ops.sub(v_new, v)))
    return u_new, v_new, p_new, q_new, u_bar_new, v_bar_new


def _check_finite(u, iteration):
    if not np.all(np.isfinite(u)):
        raise SolverDiverged(iteration, "u")


def _eager_scalars(params):
    P = {name: float(getattr(params, name)) for name in SCALAR_NAMES}
    P["lam"] = Eager().exp(P["w_lambda"])
    return P


def pd_iteration(state, t, g, params, *, _scalars=None, _iteration=0):
    """Advance ``state`` by one primal-dual iteration and return the new state."""
    P = _scalars if _scalars is not None else _eager_scalars(params)
    st = (state.u, state.v, state.p, state.q, state.u_bar, state.v_bar)
    out = _iterate(Eager(), st, t, np.asarray(g, dtype=float), P)
    _check_finite(out[0], _iteration)
    return SolverState(*out)


def solve(g, h, params, *, callback=None):
    """Run ``params.iters`` iterations from ``u = g`` and return ``u``.

    ``callback(n, state)`` is invoked after every iteration when given.
    """
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    if g.shape[-2:] != h.shape[-2:]:
        raise ValueError(f"g {g.shape} and h {h.shape} differ in spatial size")
    P = _eager_scalars(params)
    t = Eager().tensor(h, P["beta"], P["gamma"], eps=params.eps)
    state = initial_state(g)
    for n in range(params.iters):
        state = pd_iteration(state, t, g, params, _scalars=P, _iteration=n)
        if callback is not None:
            callback(n, state)
    return state.u


def _l21(a):
    return float(np.sum(np.sqrt(np.sum(a * a, axis=-3))))


def energy(u, v, t, g, params):
    """Value of the model energy at ``(u, v)``; l1 norms are sums of per-pixel 2-norms."""
    u = np.asarray(u, dtype=float)
    reg = params.alpha1 * _l21(tensor_apply(t, grid.grad(u) - v))
    reg += params.alpha0 * _l21(grid.grad_v(v))
    data = 0.5 * params.data_weight * float(np.sum((u - g) ** 2))
    return reg + data
