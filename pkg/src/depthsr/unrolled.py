"""Reverse-mode gradients through a fixed number of primal-dual iterations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import Tape, TapeMismatch
from .tgv import SCALAR_NAMES, SolverDiverged, _iterate

__all__ = ["Recording", "GradientBundle", "forward_record", "backward", "loss_euclidean"]


@dataclass
class Recording:
    """A recorded solve: the tape plus the slots needed to seed and read it."""

    tape: Tape
    g: int
    h: int
    scalars: dict
    u_star: int
    iters: int


@dataclass
class GradientBundle:
    d_g: np.ndarray
    d_h: np.ndarray
    d_scalars: dict


def forward_record(g, h, params):
    """Solve while recording every primitive. Returns ``(u_star, recording)``.

    ``g`` and ``h`` may carry leading batch axes; the scalar parameters are
    shared by all batch members.
    """
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    if g.shape[-2:] != h.shape[-2:]:
        raise ValueError(f"g {g.shape} and h {h.shape} differ in spatial size")
    tape = Tape()
    sg = tape.leaf(g, "g")
    sh = tape.leaf(h, "h")
    P = {name: tape.leaf(np.float64(getattr(params, name)), name) for name in SCALAR_NAMES}
    scalars = dict(P)
    P["lam"] = tape.exp(P["w_lambda"])
    t = tape.tensor(sh, P["beta"], P["gamma"], eps=params.eps)

    v0 = tape.leaf(np.zeros(g.shape[:-3] + (2,) + g.shape[-2:]))
    p0 = tape.leaf(np.zeros(g.shape[:-3] + (2,) + g.shape[-2:]))
    q0 = tape.leaf(np.zeros(g.shape[:-3] + (4,) + g.shape[-2:]))
    # u^0 = g and u_bar^0 = g share the g slot so gradients flow into g
    st = (sg, v0, p0, q0, sg, v0)
    for n in range(params.iters):
        st = _iterate(tape, st, t, sg, P)
        if not np.all(np.isfinite(tape.value(st[0]))):
            raise SolverDiverged(n, "u")
    rec = Recording(tape=tape, g=sg, h=sh, scalars=scalars, u_star=st[0], iters=params.iters)
    return tape.value(st[0]), rec


def backward(rec, d_u_star):
    """Propagate ``d_u_star`` (gradient of the loss w.r.t. the solution) to all inputs."""
    d_u_star = np.asarray(d_u_star, dtype=float)
    u_star = rec.tape.value(rec.u_star)
    if d_u_star.shape != np.shape(u_star):
        raise TapeMismatch(
            f"upstream gradient has shape {d_u_star.shape}, solution has {np.shape(u_star)}"
        )
    adj = rec.tape.backward({rec.u_star: d_u_star})
    g = rec.tape.value(rec.g)
    h = rec.tape.value(rec.h)
    d_g = adj.get(rec.g, np.zeros_like(g))
    d_h = adj.get(rec.h, np.zeros_like(h))
    d_scalars = {name: float(adj.get(slot, 0.0)) for name, slot in rec.scalars.items()}
    return GradientBundle(d_g=np.asarray(d_g, dtype=float), d_h=np.asarray(d_h, dtype=float), d_scalars=d_scalars)


def loss_euclidean(u_star, target):
    """Sum of squared differences and its gradient ``2 (u_star - target)``."""
    u_star = np.asarray(u_star, dtype=float)
    target = np.asarray(target, dtype=float)
    if u_star.shape != target.shape:
        raise ValueError(f"shape mismatch: {u_star.shape} vs {target.shape}")
    r = u_star - target
    return float(np.sum(r * r)), 2.0 * r
