"""Error metrics, interpolation baselines and result tables.

Reference values reported for the clean Cones image at x2 (RMSE in
disparity): bicubic 3.8392, ATGV-Net 1.0021. They depend on how the
low-resolution inputs were produced and are kept for context only.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import grid, tgv
from .cnn import net_forward
from .depthio import write_pfm, write_png16

__all__ = [
    "METHODS",
    "REFERENCE_RMSE",
    "EvalResult",
    "MissingModel",
    "rmse",
    "mae",
    "valid_mask",
    "bicubic_upsample",
    "predict",
    "evaluate_method",
    "evaluate_methods",
    "summarize",
    "ordering_holds",
    "write_csv",
    "read_csv",
    "format_table",
    "write_error_map",
    "upsample_low",
]

METHODS = ("bilinear", "bicubic", "cnn_only", "cnn_plus_atgv", "atgv_net")
LEARNED = ("cnn_only", "cnn_plus_atgv", "atgv_net")

# (image, factor) -> {method: RMSE}; documentation only, never asserted
REFERENCE_RMSE = {("cones", 2): {"bicubic": 3.8392, "atgv_net": 1.0021}}


class MissingModel(ValueError):
    """A learned method was requested without a trained model."""


@dataclass(frozen=True)
class EvalResult:
    method: str
    sample: str
    rho: int
    rmse: float
    mae: float


def _residual(a, b, mask):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    r = a - b
    if mask is None:
        return r.ravel()
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), r.shape)
    if not mask.any():
        raise ValueError("mask selects no pixels")
    return r[mask]


def rmse(a, b, mask=None):
    r = _residual(a, b, mask)
    # scale first so tiny residuals do not underflow when squared
    m = float(np.max(np.abs(r)))
    if m == 0.0 or not math.isfinite(m):
        return m
    r = r / m
    return m * math.sqrt(float(np.mean(r * r)))


def mae(a, b, mask=None):
    return float(np.mean(np.abs(_residual(a, b, mask))))


def valid_mask(target):
    """Pixels with a measurement; benchmark files mark missing values with 0."""
    return np.asarray(target) != 0


def _cubic(x, a=-0.5):
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def _cubic_matrix(n_in, n_out):
    """Catmull-Rom resampling matrix on pixel centres with edge clamping."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos).astype(int)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in range(-1, 3):
        idx = base + k
        w = _cubic(pos - idx)
        np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), w)
    return m


def bicubic_upsample(u, shape):
    """Separable Catmull-Rom (a = -0.5) resize of ``(..., H, W)`` to ``shape``."""
    u = np.asarray(u, dtype=float)
    my = _cubic_matrix(u.shape[-2], shape[0])
    mx = _cubic_matrix(u.shape[-1], shape[1])
    return np.einsum("ih,...hw,jw->...ij", my, u, mx)


def predict(method, s_mid, *, low=None, net=None, params=None):
    """High-resolution estimate of ``method`` for one or a batch of inputs.

    ``s_mid`` is the bilinear mid-resolution input; ``low`` the map it came
    from (only the bicubic baseline needs it).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    s_mid = np.asarray(s_mid, dtype=float)
    if method == "bilinear":
        return s_mid.copy()
    if method == "bicubic":
        if low is None:
            raise ValueError("bicubic baseline needs the low-resolution maps")
        if np.shape(low)[-2:] == s_mid.shape[-2:]:
            return np.array(low, dtype=float)
        return bicubic_upsample(low, s_mid.shape[-2:])
    if net is None:
        raise MissingModel(f"{method}: no trained network checkpoint given")
    g, h = net_forward(net, s_mid)
    if method == "cnn_only":
        return g
    if params is None:
        raise MissingModel(f"{method}: no solver parameters given")
    return tgv.solve(g, h, params)


def evaluate_method(method, dataset, rho, *, net=None, params=None, masked=False, batch_size=16):
    """One :class:`EvalResult` per sample of ``dataset``."""
    n = len(dataset)
    names = dataset.names or [f"{i:05d}" for i in range(n)]
    preds = []
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        low = None if dataset.lows is None else dataset.lows[sl]
        preds.append(predict(method, dataset.inputs[sl], low=low, net=net, params=params))
    out = []
    for i in range(n):
        pred = preds[i // batch_size][i % batch_size]
        t = dataset.targets[i]
        mask = valid_mask(t) if masked else None
        out.append(EvalResult(method, names[i], int(rho), rmse(pred, t, mask), mae(pred, t, mask)))
    return out


def evaluate_methods(methods, dataset, rho, models, **kw):
    """Evaluate several methods; ``models`` maps method -> ``(net, params)``.

    Returns ``(results, errors)``; a method whose model is missing is
    skipped and reported in ``errors`` instead of aborting the others.
    """
    results, errors = [], {}
    for m in methods:
        net, params = models.get(m, (None, None))
        try:
            results.extend(evaluate_method(m, dataset, rho, net=net, params=params, **kw))
        except MissingModel as exc:
            errors[m] = str(exc)
    return results, errors


def summarize(results):
    """Mean RMSE/MAE per method, reduced in sorted sample order."""
    by = {}
    for r in sorted(results, key=lambda r: (r.method, r.sample)):
        by.setdefault(r.method, []).append(r)
    return {
        m: {
            "rmse": math.fsum(r.rmse for r in rs) / len(rs),
            "mae": math.fsum(r.mae for r in rs) / len(rs),
            "count": len(rs),
        }
        for m, rs in by.items()
    }


def ordering_holds(summary, methods=("atgv_net", "cnn_only", "bilinear")):
    """True when mean RMSE is non-decreasing along ``methods`` (best first)."""
    vals = [summary[m]["rmse"] for m in methods if m in summary]
    return all(a <= b for a, b in zip(vals, vals[1:]))


CSV_FIELDS = ("method", "sample", "rho", "rmse", "mae")


def write_csv(results, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in results:
            w.writerow([r.method, r.sample, r.rho, repr(r.rmse), repr(r.mae)])


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        EvalResult(r["method"], r["sample"], int(r["rho"]), float(r["rmse"]), float(r["mae"]))
        for r in rows
    ]


def format_table(summary, order=METHODS):
    """Aligned text table of a :func:`summarize` result."""
    methods = [m for m in order if m in summary] + sorted(set(summary) - set(order))
    width = max([len("method")] + [len(m) for m in methods])
    lines = [f"{'method':<{width}}  {'rmse':>12}  {'mae':>12}  {'n':>5}"]
    for m in methods:
        s = summary[m]
        lines.append(f"{m:<{width}}  {s['rmse']:>12.4f}  {s['mae']:>12.4f}  {s['count']:>5d}")
    return "\n".join(lines)


def write_error_map(pred, target, out_dir, name, png=True):
    """Write ``|pred - target|`` as PFM (and a 16-bit PNG scaled to its max)."""
    os.makedirs(out_dir, exist_ok=True)
    err = np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    paths = [os.path.join(out_dir, f"{name}_err.pfm")]
    write_pfm(paths[0], err)
    if png:
        paths.append(os.path.join(out_dir, f"{name}_err.png"))
        write_png16(paths[1], err)
    return paths


def upsample_low(low, rho):
    """Bilinear pixel-centre upsampling of a low-resolution map by integer ``rho``."""
    low = np.asarray(low, dtype=float)
    if rho == 1:
        return low.copy()
    return grid.resize_bilinear(low, (low.shape[-2] * rho, low.shape[-1] * rho), align_corners=False)
