"""Procedural multi-view scenes with analytic ground truth.

Scenes are built from textured spheres, axis-aligned boxes, and finite
rectangles, lit by one directional light plus an ambient term, and observed
by a rig of M cameras on an arc facing the scene centroid.  Tracing is
closed-form per primitive, so RGB and depth ground truth carry no sampling
noise beyond float rounding.

Everything is deterministic in the scene seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .cameras import Camera, pixel_grid, ray_directions, save_camera
from .errors import ConfigError
from .imageio import save_pfm, save_pgm, save_ppm

DIFFICULTIES = ("plane", "shapes", "cluttered")

_EPS = 1e-9


# ---------------------------------------------------------------------------
# deterministic value-noise textures
# ---------------------------------------------------------------------------

_U = np.uint64


def _hash_lattice(ix, iy, iz, seed: int):
    """64-bit lattice hash -> floats in [0, 1). splitmix-style finalizer."""
    seed_mix = (int(seed) * 0xD6E8FEB86659FD93) % (1 << 64)
    h = (ix.astype(np.uint64) * _U(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * _U(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.uint64) * _U(0x165667B19E3779F9)
         ^ _U(seed_mix))
    h ^= h >> _U(30)
    h *= _U(0xBF58476D1CE4E5B9)
    h ^= h >> _U(27)
    h *= _U(0x94D049BB133111EB)
    h ^= h >> _U(31)
    return (h >> _U(11)).astype(np.float64) / float(1 << 53)


def value_noise(points: np.ndarray, seed: int, freq: float, octaves: int = 3):
    """3-octave value noise over world points [3, ...], output in [0, 1]."""
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape[1:]
    total = np.zeros(shape)
    norm = 0.0
    amp = 1.0
    f = freq
    for o in range(octaves):
        q = pts * f + 37.1 * (o + 1)
        i = np.floor(q)
        t = q - i
        t = t * t * (3.0 - 2.0 * t)  # smoothstep
        ii = i.astype(np.int64)
        acc = np.zeros(shape)
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    v = _hash_lattice(ii[0] + dx, ii[1] + dy, ii[2] + dz,
                                      seed + 101 * o)
                    w = ((t[0] if dx else 1 - t[0])
                         * (t[1] if dy else 1 - t[1])
                         * (t[2] if dz else 1 - t[2]))
                    acc += w * v
        total += amp * acc
        norm += amp
        amp *= 0.5
        f *= 2.0
    return total / norm


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Texture:
    seed: int
    freq: float
    c0: np.ndarray           # [3]
    c1: np.ndarray           # [3]
    amp: float = 1.0         # 0 -> texture-poor constant albedo

    def albedo(self, X: np.ndarray) -> np.ndarray:
        """Albedo at world points [3, ...] -> [3, ...]."""
        n = value_noise(X, self.seed, self.freq)
        t = 0.5 + (n - 0.5) * self.amp
        c0 = self.c0.reshape((3,) + (1,) * n.ndim)
        c1 = self.c1.reshape((3,) + (1,) * n.ndim)
        return c0 + (c1 - c0) * t


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    tex: Texture

    def intersect(self, ro: np.ndarray, rd: np.ndarray):
        """Nearest positive hit parameter, +inf on miss. ro [3], rd [3, P]."""
        oc = (ro - self.center).reshape(3, 1)
        a = (rd * rd).sum(0)
        b = 2.0 * (oc * rd).sum(0)
        c = (oc * oc).sum() - self.radius ** 2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > _EPS, t0, t1)
        return np.where(hit & (t > _EPS), t, np.inf)

    def normal(self, X: np.ndarray) -> np.ndarray:
        n = X - self.center.reshape(3, 1)
        return n / np.linalg.norm(n, axis=0, keepdims=True)

    def corners(self):
        c, r = self.center, self.radius
        signs = [(-1, -1, -1), (-1, -1, 1), (-1, 1, -1), (-1, 1, 1),
                 (1, -1, -1), (1, -1, 1), (1, 1, -1), (1, 1, 1)]
        return np.array([c + r * np.array(s, dtype=np.float64) for s in signs]).T


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    tex: Texture

    def intersect(self, ro: np.ndarray, rd: np.ndarray):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / rd
            t1 = (self.lo.reshape(3, 1) - ro.reshape(3, 1)) * inv
            t2 = (self.hi.reshape(3, 1) - ro.reshape(3, 1)) * inv
        tmin = np.minimum(t1, t2).max(axis=0)
        tmax = np.maximum(t1, t2).min(axis=0)
        hit = (tmax >= tmin) & (tmax > _EPS) & (tmin > _EPS)
        return np.where(hit, tmin, np.inf)

    def normal(self, X: np.ndarray) -> np.ndarray:
        # distance to each face; the closest face's axis carries the normal
        mid = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        rel = (X - mid.reshape(3, 1)) / half.reshape(3, 1)
        n = np.zeros_like(X)
        axis = np.argmax(np.abs(rel), axis=0)
        cols = np.arange(X.shape[1])
        n[axis, cols] = np.sign(rel[axis, cols])
        return n

    def corners(self):
        lo, hi = self.lo, self.hi
        pts = [(x, y, z) for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
               for z in (lo[2], hi[2])]
        return np.array(pts).T


@dataclass(frozen=True)
class Rect:
    origin: np.ndarray       # one corner
    e1: np.ndarray           # edge vectors, orthogonal
    e2: np.ndarray
    tex: Texture

    @property
    def n(self) -> np.ndarray:
        n = np.cross(self.e1, self.e2)
        return n / np.linalg.norm(n)

    def intersect(self, ro: np.ndarray, rd: np.ndarray):
        n = self.n.reshape(3, 1)
        denom = (rd * n).sum(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin.reshape(3, 1) - ro.reshape(3, 1)) * n).sum(0) / denom
        X = ro.reshape(3, 1) + t * rd
        rel = X - self.origin.reshape(3, 1)
        s1 = (rel * self.e1.reshape(3, 1)).sum(0) / (self.e1 @ self.e1)
        s2 = (rel * self.e2.reshape(3, 1)).sum(0) / (self.e2 @ self.e2)
        hit = (np.abs(denom) > _EPS) & (t > _EPS) & \
            (s1 >= 0) & (s1 <= 1) & (s2 >= 0) & (s2 <= 1)
        return np.where(hit, t, np.inf)

    def normal(self, X: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.n.reshape(3, 1), X.shape).copy()

    def corners(self):
        o, a, b = self.origin, self.e1, self.e2
        return np.array([o, o + a, o + b, o + a + b]).T


@dataclass(frozen=True)
class SyntheticScene:
    primitives: List
    light_dir: np.ndarray    # unit, points from the light toward the scene
    ambient: float
    cameras: List[Camera]
    centroid: np.ndarray
    seed: int
    difficulty: str


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _look_at(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    z = target - eye
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 1.0, 0.0])
    if abs(z @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, :3] = np.stack([x, y, z])
    T[:3, 3] = -T[:3, :3] @ eye
    return T


def _random_texture(rng, amp: float = 1.0) -> Texture:
    # two well-separated colors so the noise produces usable contrast
    c0 = rng.uniform(0.15, 0.9, 3)
    c1 = rng.uniform(0.15, 0.9, 3)
    while np.abs(c0 - c1).sum() < 0.8:
        c1 = rng.uniform(0.15, 0.9, 3)
    return Texture(seed=int(rng.integers(1, 2 ** 31)),
                   freq=float(rng.uniform(1.5, 3.5)), c0=c0, c1=c1, amp=amp)


def _scene_primitives(rng, difficulty: str, texture_poor: bool):
    prims = []
    if difficulty == "plane":
        tex = _random_texture(rng)
        w, h = 2.6, 2.1
        prims.append(Rect(np.array([-w / 2, -h / 2, 0.0]),
                          np.array([w, 0.0, 0.0]), np.array([0.0, h, 0.0]), tex))
        return prims

    if difficulty == "shapes":
        n = int(rng.integers(2, 5))
    else:
        n = int(rng.integers(5, 10))
        tex = _random_texture(rng)
        # large backdrop so every foreground ray has an occluded surface
        prims.append(Rect(np.array([-2.2, -1.8, 1.1]),
                          np.array([4.4, 0.0, 0.0]), np.array([0.0, 3.6, 0.0]), tex))

    for i in range(n):
        amp = 0.03 if (texture_poor and i == 0) else 1.0
        tex = _random_texture(rng, amp=amp)
        scale = float(np.exp(rng.uniform(np.log(0.22), np.log(0.75))))
        pos = np.array([rng.uniform(-0.9, 0.9), rng.uniform(-0.7, 0.7),
                        rng.uniform(-0.6, 0.6)])
        kind = rng.integers(0, 3)
        if kind == 0:
            prims.append(Sphere(pos, scale * 0.8, tex))
        elif kind == 1:
            half = np.array([scale * rng.uniform(0.5, 1.0) for _ in range(3)])
            prims.append(Box(pos - half, pos + half, tex))
        else:
            a = rng.standard_normal(3)
            a /= np.linalg.norm(a)
            b = rng.standard_normal(3)
            b -= (b @ a) * a
            b /= np.linalg.norm(b)
            e1 = a * scale * 1.6
            e2 = b * scale * 1.3
            prims.append(Rect(pos - e1 / 2 - e2 / 2, e1, e2, tex))
    return prims


def generate_scene(seed: int, difficulty: str = "shapes", n_views: int = 6,
                   height: int = 64, width: int = 80,
                   texture_poor: bool = False) -> SyntheticScene:
    """Deterministic scene + camera rig for the given seed."""
    if difficulty not in DIFFICULTIES:
        raise ConfigError(f"difficulty must be one of {DIFFICULTIES}")
    if height % 4 or width % 4:
        raise ConfigError("image size must be divisible by 4")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    prims = _scene_primitives(rng, difficulty, texture_poor)

    corners = np.concatenate([p.corners() for p in prims], axis=1)
    centroid = corners.mean(axis=1)
    radius = float(np.linalg.norm(corners - centroid[:, None], axis=0).max())
    radius = max(radius, 0.5)

    dist = 3.4 * radius
    angles = np.linspace(-0.42, 0.42, n_views)
    eyes = []
    for th in angles:
        eye = centroid + dist * np.array([
            np.sin(th), 0.22 * np.sin(2.3 * th + 0.4), -np.cos(th)])
        eyes.append(eye)

    # focal length from the widest corner tangent across the rig, with a
    # 12% border so every bbox corner projects inside every view
    rx = ry = 1e-9
    ch = np.vstack([corners, np.ones((1, corners.shape[1]))])
    for eye in eyes:
        T = _look_at(eye, centroid)
        xc = (T @ ch)[:3]
        rx = max(rx, float(np.abs(xc[0] / xc[2]).max()))
        ry = max(ry, float(np.abs(xc[1] / xc[2]).max()))
    f = min(0.88 * (width / 2.0) / rx, 0.88 * (height / 2.0) / ry)
    K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])

    dmin = min(np.linalg.norm(centroid - e) for e in eyes)
    dmax = max(np.linalg.norm(centroid - e) for e in eyes)
    near = max(0.25, dmin - radius - 0.25)
    far = dmax + radius + 0.25
    cams = []
    for eye in eyes:
        T = _look_at(eye, centroid)
        cams.append(Camera(K, T, width, height, (near, far)))

    light = np.array([0.35, -0.8, 0.5]) + 0.2 * rng.standard_normal(3)
    light = light / np.linalg.norm(light)
    return SyntheticScene(prims, light, 0.35, cams, centroid, seed, difficulty)


# ---------------------------------------------------------------------------
# tracing
# ---------------------------------------------------------------------------


def trace_rays(scene: SyntheticScene, ro: np.ndarray, rd: np.ndarray):
    """Nearest-hit trace for rays (ro [3], rd [3, P]).

    Returns (t [P] hit parameter or +inf, prim_index [P] or -1).
    """
    p = rd.shape[1]
    best_t = np.full(p, np.inf)
    best_i = np.full(p, -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t = prim.intersect(ro, rd)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    return best_t, best_i


def shade(scene: SyntheticScene, X: np.ndarray, normals: np.ndarray,
          prim_idx: np.ndarray) -> np.ndarray:
    """Lambertian shading at hit points X [3, P]."""
    out = np.zeros_like(X)
    lam = np.maximum(0.0, -(normals * scene.light_dir.reshape(3, 1)).sum(0))
    gain = scene.ambient + (1.0 - scene.ambient) * lam
    for i, prim in enumerate(scene.primitives):
        sel = prim_idx == i
        if not sel.any():
            continue
        out[:, sel] = prim.tex.albedo(X[:, sel]) * gain[sel]
    return np.clip(out, 0.0, 1.0)


def trace_view(scene: SyntheticScene, cam: Camera):
    """Render one view analytically.

    Returns (image [3, H, W] in [0,1], depth [H, W], mask [H, W] bool).
    Rays march in camera-frame depth: the hit parameter t *is* z.  Misses
    get depth = far and mask = False.
    """
    h, w = cam.height, cam.width
    uv = pixel_grid(h, w).reshape(2, -1)
    rd = ray_directions(cam, uv, unit=False)   # z-depth parameterization
    ro = cam.center
    t, idx = trace_rays(scene, ro, rd)
    mask = np.isfinite(t)
    t_safe = np.where(mask, t, cam.depth_range[1])
    X = ro.reshape(3, 1) + t_safe * rd

    img = np.zeros((3, h * w))
    if mask.any():
        normals = np.zeros((3, mask.sum()))
        sub = np.zeros(mask.sum(), dtype=np.int64)
        Xh = X[:, mask]
        for i, prim in enumerate(scene.primitives):
            sel = idx[mask] == i
            if sel.any():
                normals[:, sel] = prim.normal(Xh[:, sel])
                sub[sel] = i
        # flip normals to face the viewer so grazing surfaces stay lit
        facing = (normals * rd[:, mask]).sum(0)
        normals[:, facing > 0] *= -1.0
        img[:, mask] = shade(scene, Xh, normals, sub)

    return (img.reshape(3, h, w), t_safe.reshape(h, w), mask.reshape(h, w))


# ---------------------------------------------------------------------------
# dataset emission
# ---------------------------------------------------------------------------


def source_selection(cameras: Sequence[Camera], centroid: np.ndarray,
                     n_sources: int) -> List[List[int]]:
    """For each view, the n angularly-nearest other views."""
    dirs = []
    for cam in cameras:
        v = cam.center - centroid
        dirs.append(v / np.linalg.norm(v))
    out = []
    for i in range(len(cameras)):
        angs = []
        for j in range(len(cameras)):
            if j == i:
                continue
            cosa = float(np.clip(dirs[i] @ dirs[j], -1.0, 1.0))
            angs.append((np.arccos(cosa), j))
        angs.sort()
        out.append([j for _, j in angs[:n_sources]])
    return out


def emit_dataset(scene: SyntheticScene, out_dir, n_sources: int = 3) -> None:
    """Write one scene directory: cameras, RGB, depth, masks, manifest."""
    os.makedirs(out_dir, exist_ok=True)
    for i, cam in enumerate(scene.cameras):
        img, depth, mask = trace_view(scene, cam)
        save_camera(os.path.join(out_dir, f"cam_{i:02d}.txt"), cam)
        save_ppm(os.path.join(out_dir, f"rgb_{i:02d}.ppm"), img)
        save_pfm(os.path.join(out_dir, f"depth_{i:02d}.pfm"), depth)
        save_pgm(os.path.join(out_dir, f"mask_{i:02d}.pgm"), mask)
    pairs = source_selection(scene.cameras, scene.centroid, n_sources)
    lines = [f"{i:02d} " + " ".join(f"{j:02d}" for j in srcs)
             for i, srcs in enumerate(pairs)]
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


@dataclass
class SceneData:
    """One scene directory loaded back into memory."""

    cameras: List[Camera]
    images: List[np.ndarray]      # [3, H, W] floats
    depths: List[np.ndarray]      # [H, W]
    masks: List[np.ndarray]       # [H, W] bool
    manifest: List[List[int]]     # manifest[i] = [target, src1, ...]

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def sources_for(self, target: int) -> List[int]:
        for row in self.manifest:
            if row[0] == target:
                return row[1:]
        raise KeyError(f"view {target} not in manifest")


def scene_to_data(scene: SyntheticScene, n_sources: int = 3) -> SceneData:
    """Trace every view and assemble the dataset without touching disk."""
    images, depths, masks = [], [], []
    for cam in scene.cameras:
        img, depth, mask = trace_view(scene, cam)
        images.append(img)
        depths.append(depth)
        masks.append(mask)
    pairs = source_selection(scene.cameras, scene.centroid, n_sources)
    manifest = [[i] + list(srcs) for i, srcs in enumerate(pairs)]
    return SceneData(list(scene.cameras), images, depths, masks, manifest)


def load_dataset(scene_dir) -> SceneData:
    from .cameras import load_camera
    from .imageio import load_pfm, load_pgm, load_ppm

    with open(os.path.join(scene_dir, "manifest.txt")) as f:
        manifest = [[int(tok) for tok in line.split()]
                    for line in f.read().splitlines() if line.strip()]
    images, depths, masks, cameras = [], [], [], []
    i = 0
    while os.path.exists(os.path.join(scene_dir, f"rgb_{i:02d}.ppm")):
        img = load_ppm(os.path.join(scene_dir, f"rgb_{i:02d}.ppm"))
        h, w = img.shape[1:]
        images.append(img)
        depths.append(load_pfm(os.path.join(scene_dir, f"depth_{i:02d}.pfm")))
        masks.append(load_pgm(os.path.join(scene_dir, f"mask_{i:02d}.pgm")))
        cameras.append(load_camera(os.path.join(scene_dir, f"cam_{i:02d}.txt"), w, h))
        i += 1
    return SceneData(cameras, images, depths, masks, manifest)
