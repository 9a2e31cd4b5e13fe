"""Binary model checkpoints.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic  b"DSRCKPT\\0"
    8       4     uint32 format version (currently 1)
    12      8     uint64 byte length N of the JSON header
    20      N     UTF-8 JSON header (keys sorted)
    20+N    ...   float64 little-endian arrays, concatenated in header order

The header holds ``layers`` (kernel shape and activation per layer),
``offset``/``scale`` of the input normalisation, ``dtype`` the network ran
in, ``solver`` (every :class:`SolverParams` field), ``metadata`` (free-form
training information) and ``arrays`` (name, shape and element offset of each
stored array: ``w0, b0, w1, b1, ...``). Weights are always stored in 64 bits.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .cnn import ConvLayer, ConvNet
from .tgv import SolverParams

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"DSRCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net, params=None, metadata=None):
    arrays, entries = [], []
    pos = 0
    for i, layer in enumerate(net.layers):
        for tag, a in (("w", layer.weight), ("b", layer.bias)):
            a = np.ascontiguousarray(a, dtype="<f8")
            entries.append({"name": f"{tag}{i}", "shape": list(a.shape), "offset": pos})
            arrays.append(a)
            pos += a.size
    header = {
        "layers": [
            {"shape": list(l.weight.shape), "activation": l.activation} for l in net.layers
        ],
        "offset": net.offset,
        "scale": net.scale,
        "dtype": np.dtype(net.dtype).name,
        "solver": None if params is None else params.to_dict(),
        "metadata": metadata or {},
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(a.tobytes())


def load_checkpoint(path, dtype=None):
    """Return ``(net, params, metadata)``; ``params`` is None if none was stored.

    The network is cast to ``dtype`` (default: the dtype it was saved from).
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint")
    magic, version, n = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    data = np.frombuffer(raw, dtype="<f8", offset=start + n)
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + count > data.size:
            raise CheckpointError(f"{path}: truncated array data")
        arrays[e["name"]] = data[e["offset"] : e["offset"] + count].reshape(e["shape"])
    dtype = np.dtype(dtype or header.get("dtype", "float64"))
    layers = []
    for i, spec in enumerate(header["layers"]):
        w, b = arrays[f"w{i}"], arrays[f"b{i}"]
        if list(w.shape) != spec["shape"]:
            raise CheckpointError(f"{path}: layer {i} shape mismatch")
        layers.append(ConvLayer(w.astype(dtype), b.astype(dtype), spec["activation"]))
    net = ConvNet(layers, header["offset"], header["scale"])
    params = None if header["solver"] is None else SolverParams.from_dict(header["solver"])
    return net, params, header["metadata"]
