"""Reading and writing depth maps: PFM (float) and 8/16-bit PGM/PNG."""
from __future__ import annotations

import hashlib
import os

import numpy as np

__all__ = ["read_pfm", "write_pfm", "read_depth", "write_png16", "sha256_file"]


def write_pfm(path, depth, scale=1.0):
    """Write a single-channel float32 little-endian PFM.

    Layout: ``b"Pf\\n"``, ``b"<width> <height>\\n"``, ``b"<-scale>\\n"`` (a
    negative scale marks little-endian), then ``width*height`` float32 values
    stored bottom row first.
    """
    a = np.asarray(depth, dtype=float)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError(f"expected a single-channel field, got shape {a.shape}")
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {a.shape}")
    h, w = a.shape
    header = f"Pf\n{w} {h}\n{-abs(scale):.6f}\n".encode("ascii")
    data = np.flipud(a).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(data)


def _read_token_line(f):
    line = f.readline()
    while line.startswith(b"#"):
        line = f.readline()
    return line.decode("ascii").strip()


def read_pfm(path):
    """Read a PFM file; returns float64 ``(H, W)`` or ``(H, W, 3)``."""
    with open(path, "rb") as f:
        tag = _read_token_line(f)
        if tag == "Pf":
            channels = 1
        elif tag == "PF":
            channels = 3
        else:
            raise ValueError(f"{path}: not a PFM file (tag {tag!r})")
        dims = _read_token_line(f).split()
        if len(dims) != 2:
            raise ValueError(f"{path}: malformed size line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(_read_token_line(f))
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        data = np.frombuffer(f.read(4 * count), dtype=dtype)
    if data.size != count:
        raise ValueError(f"{path}: truncated PFM ({data.size} of {count} values)")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def read_depth(path):
    """Load a depth/disparity map as float64 ``(1, H, W)``.

    PFM is read natively; PNG/PGM (8 or 16 bit grayscale) go through Pillow.
    """
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        a = read_pfm(path)
        if a.ndim == 3:
            a = a[..., 0]
    else:
        from PIL import Image

        with Image.open(path) as im:
            a = np.array(im)
        if a.ndim == 3:
            a = a[..., 0]
        a = a.astype(np.float64)
    return a[None]


def write_png16(path, depth, vmax=None):
    """Write a field as a 16-bit PNG, linearly mapping ``[0, vmax]`` to ``[0, 65535]``."""
    from PIL import Image

    a = np.asarray(depth, dtype=float)
    if a.ndim == 3:
        a = a[0]
    vmax = float(np.max(a)) if vmax is None else float(vmax)
    scaled = np.clip(a / (vmax if vmax > 0 else 1.0), 0.0, 1.0) * 65535.0
    Image.fromarray(np.round(scaled).astype(np.uint16)).save(path)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
