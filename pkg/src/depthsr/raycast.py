"""Synthetic depth maps of random cuboids and spheres, and their degradation.

A pinhole camera sits at the origin looking down +z. Each pixel's ray is
``d = ((x - cx) / f, (y - cy) / f, 1)`` so the ray parameter of a hit equals
its z-depth (distance to the image plane).
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import grid
from .depthio import read_pfm, sha256_file, write_pfm

__all__ = [
    "Camera",
    "Cuboid",
    "Sphere",
    "Scene",
    "SceneSpec",
    "DegradationSpec",
    "DepthPairs",
    "sample_scene",
    "render_depth",
    "ray_directions",
    "intersect_cuboid",
    "intersect_sphere",
    "depth_noise",
    "degrade",
    "scene_rngs",
    "make_pair",
    "generate_dataset",
    "replay_manifest",
    "load_dataset",
]

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    focal: float
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, width, height, hfov_deg=90.0):
        focal = 0.5 * width / np.tan(np.deg2rad(hfov_deg) / 2.0)
        return cls(width, height, float(focal), (width - 1) / 2.0, (height - 1) / 2.0)


@dataclass(frozen=True)
class Cuboid:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray  # columns are the local axes in world coordinates


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float


@dataclass
class Scene:
    cuboids: list
    spheres: list
    background_depth: float
    camera: Camera


@dataclass(frozen=True)
class SceneSpec:
    """Scene sampling distribution. All lengths share the depth unit."""

    size: int = 64
    hfov_deg: float = 90.0
    min_cuboids: int = 24
    max_cuboids: int = 42
    max_spheres: int = 3
    volume_min: tuple = (-1800.0, -1800.0, 1500.0)
    volume_max: tuple = (1800.0, 1800.0, 4500.0)
    half_extent_range: tuple = (100.0, 800.0)
    radius_range: tuple = (100.0, 600.0)
    background_depth: float = 5000.0

    def camera(self):
        return Camera.from_fov(self.size, self.size, self.hfov_deg)


@dataclass(frozen=True)
class DegradationSpec:
    rho: int = 2
    noise_sigma: float = 0.0
    rng_seed: int = 0
    noise_reading: str = "std"  # "std": sigma/depth is the std; "variance": it is the variance
    downsample_mode: str = "average"

    def __post_init__(self):
        if int(self.rho) != self.rho or self.rho < 1:
            raise ValueError(f"rho must be a positive integer, got {self.rho}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.noise_reading not in ("std", "variance"):
            raise ValueError(f"unknown noise reading {self.noise_reading!r}")


def sample_scene(rng, spec=SceneSpec()):
    """Draw a random scene: 24-42 cuboids and 0-3 spheres inside the placement volume."""
    lo = np.asarray(spec.volume_min, dtype=float)
    hi = np.asarray(spec.volume_max, dtype=float)
    n_cub = int(rng.integers(spec.min_cuboids, spec.max_cuboids + 1))
    n_sph = int(rng.integers(0, spec.max_spheres + 1))
    cuboids = []
    for _ in range(n_cub):
        center = rng.uniform(lo, hi)
        half = rng.uniform(*spec.half_extent_range, size=3)
        rot = Rotation.random(random_state=rng).as_matrix()
        cuboids.append(Cuboid(center, half, rot))
    spheres = []
    for _ in range(n_sph):
        spheres.append(Sphere(rng.uniform(lo, hi), float(rng.uniform(*spec.radius_range))))
    return Scene(cuboids, spheres, float(spec.background_depth), spec.camera())


def ray_directions(camera):
    """Per-pixel ray directions ``(H, W, 3)`` with unit z component."""
    ys, xs = np.mgrid[0 : camera.height, 0 : camera.width].astype(float)
    return np.stack(
        [(xs - camera.cx) / camera.focal, (ys - camera.cy) / camera.focal, np.ones_like(xs)],
        axis=-1,
    )


def intersect_cuboid(dirs, cuboid):
    """Ray parameter of the first hit of rays from the origin, ``inf`` on a miss (slab method)."""
    r = cuboid.rotation
    o = r.T @ (-np.asarray(cuboid.center, dtype=float))
    d = dirs @ r  # world -> local for row vectors
    e = np.asarray(cuboid.half_extents, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-e - o) / d
        t2 = (e - o) / d
    tnear = np.max(np.minimum(t1, t2), axis=-1)
    tfar = np.min(np.maximum(t1, t2), axis=-1)
    hit = (tnear <= tfar) & (tfar > 0)
    t = np.where(tnear > 0, tnear, tfar)
    return np.where(hit, t, np.inf)


def intersect_sphere(dirs, sphere):
    """Ray parameter of the first hit with a sphere, ``inf`` on a miss."""
    c = np.asarray(sphere.center, dtype=float)
    a = np.sum(dirs * dirs, axis=-1)
    b = -2.0 * (dirs @ c)
    c0 = float(c @ c) - sphere.radius**2
    disc = b * b - 4.0 * a * c0
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    # numerically stable root pair
    qv = -0.5 * (b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = qv / a
        r2 = c0 / qv
    tmin = np.minimum(r1, r2)
    tmax = np.maximum(r1, r2)
    t = np.where(tmin > 0, tmin, np.where(tmax > 0, tmax, np.inf))
    return np.where(hit, t, np.inf)


def render_depth(scene):
    """z-depth of the closest surface per pixel, ``background_depth`` where nothing is hit."""
    dirs = ray_directions(scene.camera)
    depth = np.full(dirs.shape[:2], scene.background_depth)
    for cub in scene.cuboids:
        np.minimum(depth, intersect_cuboid(dirs, cub), out=depth)
    for sph in scene.spheres:
        np.minimum(depth, intersect_sphere(dirs, sph), out=depth)
    return depth[None]


def depth_noise(rng, depth, sigma, reading="std"):
    """Zero-mean Gaussian noise whose spread is ``sigma / depth``."""
    depth = np.asarray(depth, dtype=float)
    spread = sigma / depth
    std = spread if reading == "std" else np.sqrt(spread)
    return rng.standard_normal(depth.shape) * std


def degrade(t, spec, rng=None):
    """Produce ``(s_lr, s_mid)`` from a ground-truth map.

    ``s_lr`` is the (noisy) low-resolution map, ``s_mid`` its bilinear
    upsampling back to the size of ``t``. Upsampling matches pixel centres of
    the block-averaged grid.
    """
    t = np.asarray(t, dtype=float)
    if spec.rho == 1:
        s_lr = t.copy()
    else:
        s_lr = grid.downsample(t, spec.rho, mode=spec.downsample_mode)
    if spec.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(spec.rng_seed)
        s_lr = s_lr + depth_noise(rng, s_lr, spec.noise_sigma, spec.noise_reading)
    if spec.rho == 1:
        return s_lr, s_lr.copy()
    s_mid = grid.resize_bilinear(s_lr, t.shape[-2:], align_corners=False)
    return s_lr, s_mid


def scene_rngs(master_seed, index):
    """Independent (scene, noise) generators for sample ``index`` of a dataset."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def make_pair(master_seed, index, scene_spec, deg_spec):
    """Render and degrade sample ``index``; returns ``(t, s_lr, s_mid)``."""
    scene_rng, noise_rng = scene_rngs(master_seed, index)
    t = render_depth(sample_scene(scene_rng, scene_spec))
    s_lr, s_mid = degrade(t, deg_spec, noise_rng)
    return t, s_lr, s_mid


@dataclass
class DepthPairs:
    """In-memory dataset of mid-resolution inputs and ground truth, both ``(N, 1, H, W)``.

    ``lows`` optionally keeps the low-resolution maps the inputs were
    upsampled from (needed by interpolation baselines other than bilinear).
    """

    inputs: np.ndarray
    targets: np.ndarray
    names: list = field(default_factory=list)
    lows: np.ndarray | None = None

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise ValueError(f"inputs {self.inputs.shape} and targets {self.targets.shape} differ")
        if self.lows is not None and len(self.lows) != len(self.inputs):
            raise ValueError("lows and inputs differ in length")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx):
        idx = np.asarray(idx)
        names = [self.names[i] for i in idx] if self.names else []
        lows = None if self.lows is None else self.lows[idx]
        return DepthPairs(self.inputs[idx], self.targets[idx], names, lows)

    @classmethod
    def synthesize(cls, count, master_seed, scene_spec=SceneSpec(), deg_spec=DegradationSpec(), start=0):
        ins, tgts, lows = [], [], []
        for i in range(start, start + count):
            t, s_lr, s_mid = make_pair(master_seed, i, scene_spec, deg_spec)
            ins.append(s_mid)
            tgts.append(t)
            lows.append(s_lr)
        shape = (0, 1, scene_spec.size, scene_spec.size)
        return cls(
            np.stack(ins) if ins else np.zeros(shape),
            np.stack(tgts) if tgts else np.zeros(shape),
            [f"{i:05d}" for i in range(start, start + count)],
            np.stack(lows) if lows else None,
        )


def _write(path, a):
    try:
        write_pfm(path, a)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def generate_dataset(count, scene_spec, deg_spec, out_dir, master_seed=0):
    """Write ``count`` samples as PFM files plus ``manifest.json``; returns the manifest.

    Files per sample ``k``: ``gt_k.pfm`` (ground truth), ``lr_k.pfm``
    (noisy low resolution) and ``input_k.pfm`` (mid resolution).
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i in range(count):
        t, s_lr, s_mid = make_pair(master_seed, i, scene_spec, deg_spec)
        entry = {"index": i}
        for key, arr in (("gt", t), ("lr", s_lr), ("input", s_mid)):
            name = f"{key}_{i:05d}.pfm"
            path = os.path.join(out_dir, name)
            _write(path, arr)
            entry[key] = name
            entry[f"{key}_sha256"] = sha256_file(path)
        files.append(entry)
        if (i + 1) % 500 == 0:
            log.info("generated %d/%d samples", i + 1, count)
    manifest = {
        "version": MANIFEST_VERSION,
        "master_seed": int(master_seed),
        "count": int(count),
        "scene_spec": asdict(scene_spec),
        "degradation_spec": asdict(deg_spec),
        "files": files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def _specs_from_manifest(manifest):
    ss = dict(manifest["scene_spec"])
    for key in ("volume_min", "volume_max", "half_extent_range", "radius_range"):
        ss[key] = tuple(ss[key])
    return SceneSpec(**ss), DegradationSpec(**manifest["degradation_spec"])


def replay_manifest(manifest_path, out_dir):
    """Regenerate a dataset from its manifest into ``out_dir``."""
    with open(manifest_path) as f:
        manifest = json.load(f)
    scene_spec, deg_spec = _specs_from_manifest(manifest)
    return generate_dataset(manifest["count"], scene_spec, deg_spec, out_dir, manifest["master_seed"])


def load_dataset(data_dir):
    """Load a generated dataset (via its manifest) into memory."""
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    with open(path) as f:
        manifest = json.load(f)
    ins, tgts, lows, names = [], [], [], []
    for entry in manifest["files"]:
        ins.append(read_pfm(os.path.join(data_dir, entry["input"]))[None])
        tgts.append(read_pfm(os.path.join(data_dir, entry["gt"]))[None])
        lows.append(read_pfm(os.path.join(data_dir, entry["lr"]))[None])
        names.append(f"{entry['index']:05d}")
    if not ins:
        raise ValueError(f"dataset in {data_dir} is empty")
    return DepthPairs(np.stack(ins), np.stack(tgts), names, np.stack(lows))
