"""Plain 3x3 convolutional network predicting a depth residual and an edge map.

The network maps a mid-resolution depth map ``s`` to ``g = s + residual`` and
a 2-channel estimate ``h`` of the ground-truth gradient. All layers share the
trunk; only the 3-channel output layer produces both heads. Inputs are
normalised as ``(s - offset) / scale`` and outputs are rescaled by ``scale``
so the raw depth unit never enters the weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import grid
from .tgv import SCALAR_NAMES
from .unrolled import backward as solver_backward
from .unrolled import forward_record

__all__ = [
    "ConvLayer",
    "ConvNet",
    "TrainConfig",
    "net_forward",
    "net_backward",
    "pretrain_loss",
    "sgd_momentum_step",
    "tile_patches",
    "train_pretrain",
    "train_joint",
    "joint_loss",
]

log = logging.getLogger(__name__)


@dataclass
class ConvLayer:
    weight: np.ndarray  # (3, 3, in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[:2] != (3, 3):
            raise ValueError(f"kernel must be 3x3xINxOUT, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[3],):
            raise ValueError("bias length must equal the number of output channels")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_channels(self):
        return self.weight.shape[2]

    @property
    def out_channels(self):
        return self.weight.shape[3]


class ConvNet:
    def __init__(self, layers, offset=0.0, scale=1.0):
        if not layers:
            raise ValueError("a network needs at least one layer")
        if layers[0].in_channels != 1:
            raise ValueError("first layer must take a single input channel")
        if layers[-1].out_channels != 3:
            raise ValueError("last layer must produce 3 channels (residual + 2 edge)")
        for a, b in zip(layers, layers[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(
                    f"channel mismatch between layers: {a.out_channels} -> {b.in_channels}"
                )
        if not scale > 0:
            raise ValueError("scale must be > 0")
        self.layers = list(layers)
        self.offset = float(offset)
        self.scale = float(scale)

    @classmethod
    def create(
        cls, depth=6, width=32, rng=None, dtype=np.float64, offset=0.0, scale=1.0, zero_output=False
    ):
        """He-initialised network: ``depth`` layers, ``width`` hidden channels, zero biases.

        With ``zero_output`` the last layer starts at zero, so the untrained
        network returns its input unchanged (``g = s``, ``h = 0``).
        """
        if depth < 1:
            raise ValueError("depth must be >= 1")
        rng = np.random.default_rng(rng)
        chans = [1] + [width] * (depth - 1) + [3]
        layers = []
        for i, (cin, cout) in enumerate(zip(chans, chans[1:])):
            std = math.sqrt(2.0 / (9 * cin))
            w = (rng.standard_normal((3, 3, cin, cout)) * std).astype(dtype)
            if zero_output and i == depth - 1:
                w[...] = 0
            act = "none" if i == depth - 1 else "relu"
            layers.append(ConvLayer(w, np.zeros(cout, dtype=dtype), act))
        return cls(layers, offset, scale)

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def params(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def set_params(self, values):
        for i, layer in enumerate(self.layers):
            layer.weight = values[2 * i]
            layer.bias = values[2 * i + 1]

    def astype(self, dtype):
        layers = [
            ConvLayer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers
        ]
        return ConvNet(layers, self.offset, self.scale)

    def copy(self):
        return self.astype(self.dtype)


def _im2col(x):
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, k, :] = xp[:, dy : dy + h, dx : dx + w, :]
            k += 1
    return cols.reshape(b * h * w, 9 * c)


def _col2im(dcols, shape):
    b, h, w, c = shape
    dcols = dcols.reshape(b, h, w, 9, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy : dy + h, dx : dx + w, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def _as_batch(s):
    s = np.asarray(s)
    if s.ndim == 3:
        return s[None], True
    if s.ndim == 4:
        return s, False
    raise ValueError(f"expected (1,H,W) or (B,1,H,W) input, got shape {s.shape}")


def net_forward(net, s, return_cache=False):
    """Evaluate the network on ``s`` of shape ``(1,H,W)`` or ``(B,1,H,W)``.

    Returns ``(g, h)`` with ``g`` shaped like ``s`` and ``h`` with 2 channels;
    with ``return_cache`` a cache for :func:`net_backward` is appended.
    """
    sb, single = _as_batch(s)
    if sb.shape[1] != 1:
        raise ValueError(f"expected a single input channel, got {sb.shape[1]}")
    dtype = net.dtype
    x = ((sb[:, 0] - net.offset) / net.scale).astype(dtype)[..., None]
    cache = []
    for layer in net.layers:
        shape = x.shape
        cols = _im2col(x)
        w2 = layer.weight.reshape(-1, layer.out_channels)
        y = cols @ w2 + layer.bias
        y = y.reshape(shape[:3] + (layer.out_channels,))
        if layer.activation == "relu":
            mask = y > 0
            y = y * mask
        else:
            mask = None
        cache.append((cols, shape, mask))
        x = y
    out = np.moveaxis(x, -1, 1).astype(np.float64) * net.scale
    g = sb.astype(np.float64) + out[:, :1]
    h = out[:, 1:3]
    if single:
        g, h = g[0], h[0]
    if return_cache:
        return g, h, (cache, single)
    return g, h


def net_backward(net, cache, d_g, d_h):
    """Weight gradients (list matching ``net.params()``) from upstream ``d_g``, ``d_h``."""
    layers_cache, single = cache
    d_g = np.asarray(d_g, dtype=np.float64)
    d_h = np.asarray(d_h, dtype=np.float64)
    if single:
        d_g, d_h = d_g[None], d_h[None]
    d_out = np.concatenate([d_g, d_h], axis=1) * net.scale
    dy = np.moveaxis(d_out, 1, -1).astype(net.dtype)
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        cols, shape, mask = layers_cache[i]
        if mask is not None:
            dy = dy * mask
        dyf = dy.reshape(-1, layer.out_channels)
        grads[2 * i] = (cols.T @ dyf).reshape(layer.weight.shape)
        grads[2 * i + 1] = dyf.sum(axis=0)
        if i > 0:
            dcols = dyf @ layer.weight.reshape(-1, layer.out_channels).T
            dy = _col2im(dcols, shape)
    return grads


def pretrain_loss(g, h, target):
    """``|g - t|^2 + |h - grad t|^2`` summed over all pixels (and batch members)."""
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    target = np.asarray(target, dtype=float)
    if g.shape != target.shape or h.shape[-2:] != target.shape[-2:]:
        raise ValueError("g, h and target must share their spatial size")
    rg = g - target
    rh = h - grid.grad(target)
    return float(np.sum(rg * rg) + np.sum(rh * rh))


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    epochs: int = 30
    patch_size: int = 32
    batch_size: int = 16
    rng_seed: int = 0
    clip_norm: float | None = None
    scalar_learning_rate: float | None = None
    train_net: bool = True
    train_scalars: bool = True
    log_every: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.patch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size, patch_size must be >= 1 and epochs >= 0")


def sgd_momentum_step(weights, grads, velocity, config):
    """Heavy-ball update: ``v <- momentum * v - lr * grad``; ``w <- w + v``."""
    new_w, new_v = [], []
    for w, g, v in zip(weights, grads, velocity):
        v = config.momentum * v - config.learning_rate * g
        new_v.append(v.astype(w.dtype) if hasattr(v, "astype") else v)
        new_w.append(w + new_v[-1])
    return new_w, new_v


def tile_patches(dataset, patch_size):
    """Cut every map into non-overlapping ``patch_size`` squares (remainders dropped)."""
    ins, tgts = dataset.inputs, dataset.targets
    n, c, hgt, wid = ins.shape
    ph, pw = hgt // patch_size, wid // patch_size
    if ph == 0 or pw == 0:
        raise ValueError(f"patch size {patch_size} exceeds map size {hgt}x{wid}")

    def cut(a):
        a = a[:, :, : ph * patch_size, : pw * patch_size]
        a = a.reshape(n, c, ph, patch_size, pw, patch_size)
        return a.transpose(0, 2, 4, 1, 3, 5).reshape(n * ph * pw, c, patch_size, patch_size)

    return cut(ins), cut(tgts)


def _clip(grads, clip_norm):
    if not clip_norm:
        return grads
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm > clip_norm:
        return [g * (clip_norm / norm) for g in grads]
    return grads


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    # sorted members keep the in-batch summation order independent of the shuffle
    return [np.sort(order[i : i + batch_size]) for i in range(0, n, batch_size)]


def _pretrain_batch(net, s, t):
    """Normalised pretraining loss of a batch and its weight gradients."""
    b = s.shape[0]
    g, h, cache = net_forward(net, s, return_cache=True)
    norm = b * net.scale**2
    rg = g - t
    rh = h - grid.grad(t)
    loss = float(np.sum(rg * rg) + np.sum(rh * rh)) / norm
    grads = net_backward(net, cache, 2.0 * rg / norm, 2.0 * rh / norm)
    return loss, grads


def train_pretrain(net, dataset, config):
    """First training stage: fit ``g`` to the target and ``h`` to its gradient.

    Returns ``(net, losses)`` where ``losses`` holds the mean normalised
    per-patch loss of every epoch. The input ``net`` is not modified.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    net = net.copy()
    s_all, t_all = tile_patches(dataset, config.patch_size)
    rng = np.random.default_rng(config.rng_seed)
    velocity = [np.zeros_like(p) for p in net.params()]
    curve = []
    step = 0
    for epoch in range(config.epochs):
        losses = []
        batches = _batches(rng, len(s_all), config.batch_size)
        for idx in batches:
            loss, grads = _pretrain_batch(net, s_all[idx], t_all[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch}, step {step}")
            grads = _clip(grads, config.clip_norm)
            weights, velocity = sgd_momentum_step(net.params(), grads, velocity, config)
            net.set_params(weights)
            losses.append(loss * len(idx))
            step += 1
        curve.append(math.fsum(losses) / len(s_all))
        if config.log_every and (epoch + 1) % config.log_every == 0:
            log.info("pretrain epoch %d: loss %.6g", epoch + 1, curve[-1])
    return net, curve


# scalars updated in log space keep their sign; theta is clipped to [0, 1]
_LINEAR_SCALARS = ("w_lambda", "theta")


def _scalar_vector(params):
    out = []
    for name in SCALAR_NAMES:
        val = getattr(params, name)
        out.append(val if name in _LINEAR_SCALARS else math.log(val))
    return np.array(out)


def _params_from_vector(params, vec):
    values = {}
    for name, x in zip(SCALAR_NAMES, vec):
        if name == "theta":
            values[name] = min(1.0, max(0.0, float(x)))
        elif name in _LINEAR_SCALARS:
            values[name] = float(x)
        else:
            values[name] = math.exp(float(x))
    return params.with_scalars(values)


def _scalar_grad_vector(params, d_scalars):
    out = []
    for name in SCALAR_NAMES:
        d = d_scalars[name]
        out.append(d if name in _LINEAR_SCALARS else d * getattr(params, name))
    return np.array(out)


def _joint_batch(net, params, s, t, need_grads=True):
    b = s.shape[0]
    norm = b * net.scale**2
    if need_grads:
        g, h, cache = net_forward(net, s, return_cache=True)
    else:
        g, h = net_forward(net, s)
    u, rec = forward_record(g, h, params)
    r = u - t
    loss = float(np.sum(r * r)) / norm
    if not need_grads:
        return loss, None, None
    bundle = solver_backward(rec, 2.0 * r / norm)
    grads = net_backward(net, cache, bundle.d_g, bundle.d_h)
    return loss, grads, bundle.d_scalars


def joint_loss(net, params, dataset, batch_size=16):
    """Mean normalised Euclidean loss of the full model over a dataset."""
    total = 0.0
    n = len(dataset)
    for i in range(0, n, batch_size):
        loss, _, _ = _joint_batch(
            net, params, dataset.inputs[i : i + batch_size], dataset.targets[i : i + batch_size], False
        )
        total += loss * min(batch_size, n - i)
    return total / n


def train_joint(net, params, dataset, config):
    """Second stage: train network and solver scalars through the unrolled solver.

    Returns ``(net, params, losses)``; inputs are left untouched.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    net = net.copy()
    s_all, t_all = tile_patches(dataset, config.patch_size)
    rng = np.random.default_rng(config.rng_seed)
    velocity = [np.zeros_like(p) for p in net.params()]
    svec = _scalar_vector(params)
    svel = np.zeros_like(svec)
    scalar_cfg = TrainConfig(
        learning_rate=(
            config.learning_rate if config.scalar_learning_rate is None else config.scalar_learning_rate
        ),
        momentum=config.momentum,
    )
    curve = []
    step = 0
    for epoch in range(config.epochs):
        losses = []
        batches = _batches(rng, len(s_all), config.batch_size)
        for idx in batches:
            loss, grads, d_scalars = _joint_batch(net, params, s_all[idx], t_all[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite joint loss at epoch {epoch}, step {step}")
            if config.train_net:
                grads = _clip(grads, config.clip_norm)
                weights, velocity = sgd_momentum_step(net.params(), grads, velocity, config)
                net.set_params(weights)
            if config.train_scalars and scalar_cfg.learning_rate > 0:
                sgrad = _scalar_grad_vector(params, d_scalars)
                (svec,), (svel,) = sgd_momentum_step([svec], [sgrad], [svel], scalar_cfg)
                svec[SCALAR_NAMES.index("theta")] = min(1.0, max(0.0, svec[SCALAR_NAMES.index("theta")]))
                params = _params_from_vector(params, svec)
            losses.append(loss * len(idx))
            step += 1
        curve.append(math.fsum(losses) / len(s_all))
        if config.log_every and (epoch + 1) % config.log_every == 0:
            log.info("joint epoch %d: loss %.6g", epoch + 1, curve[-1])
    return net, params, curve
