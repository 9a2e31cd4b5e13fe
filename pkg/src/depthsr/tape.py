"""Primitive operations with adjoint rules, and the two executors that run them.

Every numerical step of the primal-dual solver is expressed as a call to a
registered primitive. :class:`Eager` evaluates primitives directly on arrays;
:class:`Tape` evaluates the very same forward functions but also records
them, so a recorded run is bitwise identical to an eager run and can be
differentiated in reverse mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import grid

__all__ = ["Primitive", "PRIMITIVES", "Eager", "Tape", "Node", "TapeMismatch"]

EPS_NORMAL = 1e-8


class TapeMismatch(ValueError):
    """Raised when values handed to a tape do not fit the recorded graph."""


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    # adjoint(gy, y, *inputs, **attrs) -> tuple with one gradient (or None) per input
    adjoint: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, forward, adjoint):
    PRIMITIVES[name] = Primitive(name, forward, adjoint)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(x):
    return np.shape(x)


# linear stencils: each one's adjoint is its partner
_register("grad", grid.grad, lambda gy, y, u: (grid.gradT(gy),))
_register("gradT", grid.gradT, lambda gy, y, p: (grid.grad(gy),))
_register("grad_v", grid.grad_v, lambda gy, y, v: (grid.gradT_v(gy),))
_register("gradT_v", grid.gradT_v, lambda gy, y, q: (grid.grad_v(gy),))

# pointwise arithmetic with broadcasting (scalars enter as 0-d values)
_register(
    "add",
    lambda a, b: a + b,
    lambda gy, y, a, b: (_unbroadcast(gy, _shape(a)), _unbroadcast(gy, _shape(b))),
)
_register(
    "sub",
    lambda a, b: a - b,
    lambda gy, y, a, b: (_unbroadcast(gy, _shape(a)), _unbroadcast(-gy, _shape(b))),
)
_register(
    "mul",
    lambda a, b: a * b,
    lambda gy, y, a, b: (_unbroadcast(gy * b, _shape(a)), _unbroadcast(gy * a, _shape(b))),
)
_register(
    "div",
    lambda a, b: a / b,
    lambda gy, y, a, b: (
        _unbroadcast(gy / b, _shape(a)),
        _unbroadcast(-gy * a / (b * b), _shape(b)),
    ),
)
_register("exp", np.exp, lambda gy, y, a: (gy * y,))
_register("add_const", lambda a, c: a + c, lambda gy, y, a, c: (gy,))


def project_unit_ball(d):
    """Pointwise projection onto the unit ball: ``d / max(1, |d|)`` (norm over channels)."""
    d = np.asarray(d, dtype=float)
    norm = np.sqrt(np.sum(d * d, axis=-3, keepdims=True))
    return d / np.maximum(1.0, norm)


def _proj_adjoint(gy, y, d):
    norm = np.sqrt(np.sum(d * d, axis=-3, keepdims=True))
    outside = norm > 1.0
    # ||d|| == 1 is taken as the interior branch (identity)
    radial = np.sum(y * gy, axis=-3, keepdims=True)
    safe = np.where(outside, norm, 1.0)
    gd = np.where(outside, (gy - y * radial) / safe, gy)
    return (gd,)


_register("proj", project_unit_ball, _proj_adjoint)


def diffusion_tensor(h, beta, gamma, eps=EPS_NORMAL):
    """Edge-aware tensor ``exp(-beta |h|^gamma) n n^T + n_perp n_perp^T``.

    Returned as planes ``(t_xx, t_xy, t_yy)`` on the channel axis. It is
    evaluated as ``I + (exp(-beta |h|^gamma) - 1) n n^T`` with
    ``n = h / max(|h|, eps)``, so a zero edge vector gives the identity.
    """
    h = np.asarray(h, dtype=float)
    hx = h[..., 0, :, :]
    hy = h[..., 1, :, :]
    mag = np.sqrt(hx * hx + hy * hy)
    m = np.maximum(mag, eps)
    nx = hx / m
    ny = hy / m
    c = np.exp(-beta * mag**gamma) - 1.0
    return np.stack([1.0 + c * nx * nx, c * nx * ny, 1.0 + c * ny * ny], axis=-3)


def _tensor_adjoint(gy, y, h, beta, gamma, eps=EPS_NORMAL):
    hx = h[..., 0, :, :]
    hy = h[..., 1, :, :]
    mag = np.sqrt(hx * hx + hy * hy)
    m = np.maximum(mag, eps)
    nx = hx / m
    ny = hy / m
    pos = mag > 0
    safe = np.where(pos, mag, 1.0)
    mag_g = np.where(pos, mag, 0.0) ** gamma
    lam = np.exp(-beta * mag_g)
    c = lam - 1.0
    gxx, gxy, gyy = gy[..., 0, :, :], gy[..., 1, :, :], gy[..., 2, :, :]

    g_c = gxx * nx * nx + gxy * nx * ny + gyy * ny * ny
    g_nx = c * (2.0 * gxx * nx + gxy * ny)
    g_ny = c * (gxy * nx + 2.0 * gyy * ny)

    g_arg = -g_c * lam  # d/d(beta * mag^gamma)
    g_beta = np.sum(g_arg * mag_g)
    # zero-magnitude pixels contribute nothing to gamma (limit convention)
    g_gamma = np.sum(np.where(pos, g_arg * beta * mag_g * np.log(safe), 0.0))
    g_mag = np.where(pos, g_arg * beta * gamma * mag_g / safe, 0.0)

    unit = mag >= eps
    radial = nx * g_nx + ny * g_ny
    g_hx = np.where(unit, (g_nx - nx * radial) / safe, g_nx / eps)
    g_hy = np.where(unit, (g_ny - ny * radial) / safe, g_ny / eps)
    g_hx = g_hx + np.where(pos, g_mag * hx / safe, 0.0)
    g_hy = g_hy + np.where(pos, g_mag * hy / safe, 0.0)
    g_h = np.stack([g_hx, g_hy], axis=-3)
    return g_h, _unbroadcast(g_beta, _shape(beta)), _unbroadcast(g_gamma, _shape(gamma))


_register("tensor", diffusion_tensor, _tensor_adjoint)


def tensor_apply(t, w):
    """Per-pixel product of a symmetric 2x2 tensor field with a 2-channel field."""
    txx, txy, tyy = t[..., 0, :, :], t[..., 1, :, :], t[..., 2, :, :]
    wx, wy = w[..., 0, :, :], w[..., 1, :, :]
    return np.stack([txx * wx + txy * wy, txy * wx + tyy * wy], axis=-3)


def _tensor_apply_adjoint(gy, y, t, w):
    gx, gyy_ = gy[..., 0, :, :], gy[..., 1, :, :]
    wx, wy = w[..., 0, :, :], w[..., 1, :, :]
    g_t = np.stack([gx * wx, gx * wy + gyy_ * wx, gyy_ * wy], axis=-3)
    # symmetric tensor: T^T = T
    return g_t, tensor_apply(t, gy)


_register("tensor_apply", tensor_apply, _tensor_apply_adjoint)


class Eager:
    """Executor that evaluates primitives immediately on plain values."""

    def apply(self, name, *args, **attrs):
        return PRIMITIVES[name].forward(*args, **attrs)

    def value(self, x):
        return x

    def __getattr__(self, name):
        if name in PRIMITIVES:
            return lambda *args, **attrs: self.apply(name, *args, **attrs)
        raise AttributeError(name)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict = field(default_factory=dict)


class Tape(Eager):
    """Recording executor.

    Values live in numbered slots; primitives take and return slot indices.
    ``leaf`` registers an input value and returns its slot.
    """

    def __init__(self):
        self.values: list = []
        self.nodes: list[Node] = []
        self.names: dict[str, int] = {}

    def leaf(self, value, name=None):
        self.values.append(value)
        slot = len(self.values) - 1
        if name is not None:
            self.names[name] = slot
        return slot

    def apply(self, name, *slots, **attrs):
        out = PRIMITIVES[name].forward(*(self.values[s] for s in slots), **attrs)
        self.values.append(out)
        slot = len(self.values) - 1
        self.nodes.append(Node(name, tuple(slots), slot, dict(attrs)))
        return slot

    def value(self, slot):
        return self.values[slot]

    def replay(self, leaves=None):
        """Re-run every recorded node, optionally with substituted leaf values.

        Returns the new list of slot values; the tape itself is untouched.
        """
        values = list(self.values)
        if leaves:
            for key, val in leaves.items():
                slot = self.names[key] if isinstance(key, str) else key
                if np.shape(val) != np.shape(values[slot]):
                    raise TapeMismatch(
                        f"leaf {key!r} has shape {np.shape(val)}, recorded {np.shape(values[slot])}"
                    )
                values[slot] = val
        for node in self.nodes:
            values[node.output] = PRIMITIVES[node.op].forward(
                *(values[s] for s in node.inputs), **node.attrs
            )
        return values

    def backward(self, seeds):
        """Reverse sweep. ``seeds`` maps slot -> upstream gradient.

        Returns a dict slot -> accumulated gradient for every slot reached.
        """
        adj: dict[int, np.ndarray] = {}
        for slot, g in seeds.items():
            if np.shape(g) != np.shape(self.values[slot]):
                raise TapeMismatch(
                    f"seed for slot {slot} has shape {np.shape(g)}, "
                    f"value has {np.shape(self.values[slot])}"
                )
            adj[slot] = np.asarray(g, dtype=float)
        for node in reversed(self.nodes):
            gy = adj.get(node.output)
            if gy is None:
                continue
            ins = [self.values[s] for s in node.inputs]
            grads = PRIMITIVES[node.op].adjoint(gy, self.values[node.output], *ins, **node.attrs)
            for s, g in zip(node.inputs, grads):
                if g is None:
                    continue
                if s in adj:
                    adj[s] = adj[s] + g
                else:
                    adj[s] = g
        return adj
