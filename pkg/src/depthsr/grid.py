"""Discrete differential operators and resampling on dense 2D fields.

A field is a float array shaped ``(C, H, W)``; any number of leading batch
axes is allowed in front of the channel axis. Channel 0 of a gradient is the
derivative along columns (x), channel 1 along rows (y).

``grad``/``grad_v`` use forward differences with Neumann boundaries (the
last column/row difference is zero). ``gradT``/``gradT_v`` are their exact
adjoints, which corresponds to a backward difference with Dirichlet
(negative symmetric) boundaries.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "grad",
    "gradT",
    "grad_v",
    "gradT_v",
    "inner",
    "resize_bilinear",
    "bilinear_upsample",
    "downsample",
]


def _dx(a):
    out = np.zeros_like(a)
    out[..., :, :-1] = a[..., :, 1:] - a[..., :, :-1]
    return out


def _dy(a):
    out = np.zeros_like(a)
    out[..., :-1, :] = a[..., 1:, :] - a[..., :-1, :]
    return out


def _dxT(a):
    out = np.zeros_like(a)
    out[..., :, :-1] -= a[..., :, :-1]
    out[..., :, 1:] += a[..., :, :-1]
    return out


def _dyT(a):
    out = np.zeros_like(a)
    out[..., :-1, :] -= a[..., :-1, :]
    out[..., 1:, :] += a[..., :-1, :]
    return out


def grad(u):
    """Forward-difference gradient of a 1-channel field -> 2 channels (x, y)."""
    u = np.asarray(u, dtype=float)
    a = u[..., 0, :, :]
    return np.stack([_dx(a), _dy(a)], axis=-3)


def gradT(p):
    """Adjoint of :func:`grad`: 2-channel field -> 1 channel."""
    p = np.asarray(p, dtype=float)
    out = _dxT(p[..., 0, :, :]) + _dyT(p[..., 1, :, :])
    return out[..., None, :, :]


def grad_v(v):
    """Full Jacobian of a 2-channel field.

    Returns 4 channels ordered ``(dx v_x, dy v_x, dx v_y, dy v_y)``.
    """
    v = np.asarray(v, dtype=float)
    vx = v[..., 0, :, :]
    vy = v[..., 1, :, :]
    return np.stack([_dx(vx), _dy(vx), _dx(vy), _dy(vy)], axis=-3)


def gradT_v(q):
    """Adjoint of :func:`grad_v`: 4-channel field -> 2 channels."""
    q = np.asarray(q, dtype=float)
    ox = _dxT(q[..., 0, :, :]) + _dyT(q[..., 1, :, :])
    oy = _dxT(q[..., 2, :, :]) + _dyT(q[..., 3, :, :])
    return np.stack([ox, oy], axis=-3)


def inner(a, b):
    """Standard (Frobenius) inner product of two equally shaped fields."""
    return float(np.sum(np.asarray(a) * np.asarray(b)))


def _interp_matrix(n_in, n_out, align_corners):
    if align_corners:
        if n_out == 1:
            src = np.zeros(1)
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(u, shape, align_corners=True):
    """Bilinear resize of the two trailing axes to ``shape = (H, W)``.

    With ``align_corners`` the corner samples of input and output coincide;
    otherwise pixel centres are matched (``x_src = (x + 0.5) / rho - 0.5``,
    clamped at the border), which is the grid produced by block averaging.
    """
    u = np.asarray(u, dtype=float)
    h_in, w_in = u.shape[-2:]
    my = _interp_matrix(h_in, shape[0], align_corners)
    mx = _interp_matrix(w_in, shape[1], align_corners)
    return my @ u @ mx.T


def bilinear_upsample(u, rho, align_corners=True):
    """Upsample by a real factor ``rho > 1`` to ``round(rho*H) x round(rho*W)``."""
    if not rho > 1:
        raise ValueError(f"upsampling factor must be > 1, got {rho}")
    u = np.asarray(u, dtype=float)
    h, w = u.shape[-2:]
    return resize_bilinear(u, (int(round(rho * h)), int(round(rho * w))), align_corners)


def downsample(t, rho, mode="average"):
    """Reduce resolution by an integer factor ``rho >= 2``.

    ``mode="average"`` takes the mean of each ``rho x rho`` block,
    ``mode="decimate"`` keeps the top-left sample of each block.
    """
    if int(rho) != rho or rho < 2:
        raise ValueError(f"downsampling factor must be an integer >= 2, got {rho}")
    rho = int(rho)
    t = np.asarray(t, dtype=float)
    h, w = t.shape[-2:]
    if h % rho or w % rho:
        raise ValueError(f"field size {h}x{w} is not divisible by {rho}")
    if mode == "decimate":
        return t[..., ::rho, ::rho].copy()
    if mode != "average":
        raise ValueError(f"unknown downsampling mode {mode!r}")
    blocks = t.reshape(t.shape[:-2] + (h // rho, rho, w // rho, rho))
    return blocks.mean(axis=(-3, -1))
