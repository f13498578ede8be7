"""Calibrated pinhole cameras: projection, warping, rays.

All camera math is plain fp64 numpy, outside the autodiff graph; poses and
intrinsics are fixed inputs, never optimized.

Pixel convention: integer (row, col) addresses a texel whose center sits at
continuous coordinates (u, v) = (col + 0.5, row + 0.5).  Homogeneous pixel
vectors are (u, v, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, GeometryError


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera rigid transform."""

    K: np.ndarray            # 3x3 intrinsics, pixels
    T_w2c: np.ndarray        # 4x4 rigid transform
    width: int
    height: int
    depth_range: tuple       # (near, far), world units

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        T = np.asarray(self.T_w2c, dtype=np.float64)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T_w2c", T)
        if K.shape != (3, 3) or T.shape != (4, 4):
            raise GeometryError("camera matrices must be 3x3 and 4x4")
        if abs(K[1, 0]) > 1e-12 or abs(K[2, 0]) > 1e-12 or abs(K[2, 1]) > 1e-12:
            raise GeometryError("intrinsics must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or abs(K[2, 2] - 1.0) > 1e-9:
            raise GeometryError("focal lengths must be positive and K[2,2] == 1")
        R = T[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise GeometryError("rotation block is not orthonormal")
        if np.linalg.det(R) < 0:
            raise GeometryError("rotation block must have determinant +1")
        if not np.allclose(T[3], [0, 0, 0, 1], atol=1e-12):
            raise GeometryError("last transform row must be [0 0 0 1]")
        near, far = self.depth_range
        if not (0 < near < far):
            raise GeometryError(f"need 0 < near < far, got {self.depth_range}")
        object.__setattr__(self, "depth_range", (float(near), float(far)))

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        R, t = self.T_w2c[:3, :3], self.T_w2c[:3, 3]
        return -R.T @ t

    def scaled(self, s: float) -> "Camera":
        """Camera for an image downscaled by integer factor s.

        Under the pixel-center convention the continuous coordinate map is
        u_l = u / s, which is exactly diag(1/s, 1/s, 1) · K.
        """
        s = float(s)
        S = np.diag([1.0 / s, 1.0 / s, 1.0])
        return Camera(S @ self.K, self.T_w2c, int(self.width // s),
                      int(self.height // s), self.depth_range)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray       # world point
    direction: np.ndarray    # unit world vector
    pixel: tuple             # (row, col)


def relative_transform(ref: Camera, src: Camera) -> np.ndarray:
    """Transform taking ref-camera coordinates to src-camera coordinates."""
    return src.T_w2c @ np.linalg.inv(ref.T_w2c)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Continuous center coordinates of every pixel, shape [2, H, W] as (u, v)."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u + 0.5, v + 0.5])


def unproject(cam: Camera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """World points for continuous pixels uv [2, ...] at camera-frame depth."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    ones = np.ones_like(uv[0])
    p = np.stack([uv[0], uv[1], ones])                      # [3, ...]
    x_cam = np.tensordot(cam.K_inv, p, axes=1) * depth      # z == depth
    R, t = cam.T_w2c[:3, :3], cam.T_w2c[:3, 3]
    return np.tensordot(R.T, x_cam - t.reshape((3,) + (1,) * (x_cam.ndim - 1)), axes=1)


def project(cam: Camera, X: np.ndarray):
    """Project world points [3, ...] -> (uv [2, ...], z [...])."""
    X = np.asarray(X, dtype=np.float64)
    R, t = cam.T_w2c[:3, :3], cam.T_w2c[:3, 3]
    x_cam = np.tensordot(R, X, axes=1) + t.reshape((3,) + (1,) * (X.ndim - 1))
    p = np.tensordot(cam.K, x_cam, axes=1)
    z = p[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = p[:2] / z
    return uv, z


def inverse_warp_pixels(uv: np.ndarray, depth: np.ndarray, ref: Camera,
                        src: Camera):
    """Warp reference pixels at given depths into the source view.

    uv: [2, ...] continuous reference coordinates; depth: [...] > 0.
    Returns (uv_src [2, ...], z_src [...], valid [...]).  valid is False
    where the point lands behind the source camera; uv_src is clamped to
    finite numbers there so downstream sampling stays well-defined.
    """
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    T = relative_transform(ref, src)
    ones = np.ones_like(uv[0])
    p = np.stack([uv[0], uv[1], ones])
    x_ref = np.tensordot(ref.K_inv, p, axes=1) * depth
    R, t = T[:3, :3], T[:3, 3]
    x_src = np.tensordot(R, x_ref, axes=1) + t.reshape((3,) + (1,) * (x_ref.ndim - 1))
    q = np.tensordot(src.K, x_src, axes=1)
    z = q[2]
    valid = z > 1e-9
    safe_z = np.where(valid, z, 1.0)
    uv_src = q[:2] / safe_z
    uv_src = np.where(valid, uv_src, 0.0)
    return uv_src, z, valid


def inverse_warp_pixel(p, d: float, ref: Camera, src: Camera):
    """Single-pixel wrapper: p = (u, v) continuous, d > 0.

    Returns ((u_src, v_src), valid).
    """
    uv = np.asarray(p, dtype=np.float64).reshape(2, 1)
    uv_src, _, valid = inverse_warp_pixels(uv, np.array([float(d)]), ref, src)
    return (float(uv_src[0, 0]), float(uv_src[1, 0])), bool(valid[0])


def generate_rays(cam: Camera, pixels: Sequence) -> list:
    """Unit-direction world rays through the centers of (row, col) pixels."""
    R = cam.T_w2c[:3, :3]
    origin = cam.center
    out = []
    for row, col in pixels:
        p = np.array([col + 0.5, row + 0.5, 1.0])
        d = R.T @ (cam.K_inv @ p)
        d = d / np.linalg.norm(d)
        out.append(Ray(origin.copy(), d, (int(row), int(col))))
    return out


def ray_directions(cam: Camera, uv: np.ndarray, unit: bool = True) -> np.ndarray:
    """World directions for continuous pixels uv [2, ...].

    With unit=False the direction is R⁻¹K⁻¹(u,v,1), whose camera-frame z
    component is 1, so origin + d * dir sits at camera depth exactly d.
    """
    uv = np.asarray(uv, dtype=np.float64)
    p = np.stack([uv[0], uv[1], np.ones_like(uv[0])])
    R = cam.T_w2c[:3, :3]
    d = np.tensordot(R.T @ cam.K_inv, p, axes=1)
    if unit:
        d = d / np.linalg.norm(d, axis=0, keepdims=True)
    return d


def delta_directions(p, d: float, ref: Camera, srcs: Sequence[Camera]) -> np.ndarray:
    """Concatenated differences of unit viewing directions, shape [3N].

    For the world point X seen at continuous pixel p and depth d in ref,
    block i is unit(X - c_i) - unit(X - c_ref).
    """
    uv = np.asarray(p, dtype=np.float64).reshape(2, 1)
    X = unproject(ref, uv, np.array([float(d)]))[:, 0]

    def unit_from(center):
        v = X - center
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise GeometryError("point coincides with a camera center")
        return v / n

    d_ref = unit_from(ref.center)
    blocks = [unit_from(s.center) - d_ref for s in srcs]
    return np.concatenate(blocks)


def delta_directions_grid(ref: Camera, srcs: Sequence[Camera], uv: np.ndarray,
                          depth: np.ndarray) -> np.ndarray:
    """Vectorized delta_directions over a pixel/depth grid.

    uv [2, ...], depth [...] -> [3N, ...].
    """
    X = unproject(ref, uv, depth)                            # [3, ...]

    def unit_from(center):
        v = X - center.reshape((3,) + (1,) * (X.ndim - 1))
        n = np.linalg.norm(v, axis=0, keepdims=True)
        if np.any(n < 1e-12):
            raise GeometryError("point coincides with a camera center")
        return v / n

    d_ref = unit_from(ref.center)
    return np.concatenate([unit_from(s.center) - d_ref for s in srcs], axis=0)


# ---------------------------------------------------------------------------
# camera text files
# ---------------------------------------------------------------------------


def save_camera(path, cam: Camera) -> None:
    lines = ["extrinsic"]
    for row in cam.T_w2c:
        lines.append(" ".join(repr(float(x)) for x in row))
    lines.append("intrinsic")
    for row in cam.K:
        lines.append(" ".join(repr(float(x)) for x in row))
    lines.append(f"{cam.depth_range[0]!r} {cam.depth_range[1]!r}")
    lines.append("")
    with open(path, "w") as f:
        f.write("\n".join(lines))


def load_camera(path, width: int, height: int) -> Camera:
    with open(path) as f:
        tokens = f.read().split()
    try:
        i = tokens.index("extrinsic")
        T = np.array([float(x) for x in tokens[i + 1:i + 17]]).reshape(4, 4)
        j = tokens.index("intrinsic")
        K = np.array([float(x) for x in tokens[j + 1:j + 10]]).reshape(3, 3)
        near, far = float(tokens[j + 10]), float(tokens[j + 11])
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: malformed camera file") from e
    return Camera(K, T, width, height, (near, far))
