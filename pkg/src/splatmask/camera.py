"""Pinhole cameras, orbit viewpoints, rigid head poses and viewpoint sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import substream
from .scene import Scene

DEFAULT_ORBIT_RADIUS = 3.0
# Fraction of the half-frame a unit sphere's silhouette may fill.
_FRAME_FILL = 1.0 / 1.15


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b``; ``b`` may be an (N,4) array."""
    aw, ax, ay, az = a
    b = np.asarray(b, dtype=np.float64)
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_left_matrix(a) -> np.ndarray:
    """Matrix L(a) with ``a * b == L(a) @ b``."""
    w, x, y, z = a
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _check_rotation(r: np.ndarray, what: str) -> None:
    if r.shape != (3, 3):
        raise ValueError(f"{what} must be 3x3")
    if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0) or np.linalg.det(r) < 0:
        raise ValueError(f"{what} must be orthonormal with determinant +1")


@dataclass(frozen=True, eq=False)
class CameraView:
    """World-to-camera transform ``x_cam = rotation @ x + translation`` plus intrinsics.

    The camera looks down its +z axis; image x grows with camera x, image y with
    camera y. Pixel (col, row) sits at integer coordinates.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal_point: tuple[float, float]
    width: int
    height: int

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r, "camera rotation")
        if self.width < 16 or self.height < 16:
            raise ValueError(f"image size must be at least 16x16, got {self.width}x{self.height}")
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))
        object.__setattr__(self, "focal", float(self.focal))

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def same_as(self, other: CameraView) -> bool:
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and (self.focal, self.principal_point, self.width, self.height)
            == (other.focal, other.principal_point, other.width, other.height)
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid head transform applied to the scene before rendering."""

    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = tuple(float(c) for c in self.rotation)
        if abs(math.sqrt(sum(c * c for c in q)) - 1.0) > 1e-9:
            raise ValueError("pose rotation must be a unit quaternion")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", tuple(float(c) for c in self.translation))

    @property
    def is_identity(self) -> bool:
        return self.rotation == (1.0, 0.0, 0.0, 0.0) and self.translation == (0.0, 0.0, 0.0)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def inverse(self) -> Pose:
        w, x, y, z = self.rotation
        qi = (w, -x, -y, -z)
        t = -quat_to_matrix(qi) @ np.asarray(self.translation)
        return Pose(qi, tuple(t))


NEUTRAL_POSE = Pose()


@dataclass(frozen=True, eq=False)
class ViewpointDistribution:
    pitch_range: tuple[float, float] = (-0.5, 0.5)
    yaw_range: tuple[float, float] = (-0.5, 0.5)
    base_view: CameraView | None = None

    def __post_init__(self):
        for name in ("pitch_range", "yaw_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.base_view is None:
            object.__setattr__(self, "base_view", default_frontal(64, 64))


def default_frontal(width: int, height: int, radius: float = DEFAULT_ORBIT_RADIUS) -> CameraView:
    """Camera on the +z axis looking at the origin; a unit sphere fills ~87% of the frame."""
    if width < 16 or height < 16:
        raise ValueError(f"image size must be at least 16x16, got {width}x{height}")
    rot = np.diag([1.0, -1.0, -1.0])  # world +y up maps to image rows growing downward
    focal = 0.5 * min(width, height) * math.sqrt(radius * radius - 1.0) * _FRAME_FILL
    return CameraView(rot, np.array([0.0, 0.0, radius]), focal, (width / 2, height / 2), width, height)


def rotate_view(base: CameraView, pitch: float, yaw: float) -> CameraView:
    """Orbit the camera about the world origin: pitch about x first, then yaw about y."""
    orbit = rot_y(yaw) @ rot_x(pitch)
    # Orbiting about the origin leaves the world-to-camera translation unchanged.
    return CameraView(base.rotation @ orbit.T, base.translation, base.focal,
                      base.principal_point, base.width, base.height)


def sample_angles(dist: ViewpointDistribution, k: int, seed: int, iteration: int = 0) -> np.ndarray:
    """(k, 2) array of (pitch, yaw); sample ``j`` uses substream (seed, iteration, j)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out = np.empty((k, 2))
    (plo, phi), (ylo, yhi) = dist.pitch_range, dist.yaw_range
    for j in range(k):
        u = substream(seed, "views", iteration, j).random(2)
        out[j, 0] = plo + (phi - plo) * u[0]
        out[j, 1] = ylo + (yhi - ylo) * u[1]
    return out


def sample_viewpoints(dist: ViewpointDistribution, k: int, seed: int, iteration: int = 0) -> list[CameraView]:
    angles = sample_angles(dist, k, seed, iteration)
    return [rotate_view(dist.base_view, p, y) for p, y in angles]


def grid_angles(dist: ViewpointDistribution, rows: int, cols: int) -> list[tuple[float, float]]:
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be >= 1")

    def lin(lo, hi, m):
        return [0.5 * (lo + hi)] if m == 1 else list(np.linspace(lo, hi, m))

    pitches = lin(*dist.pitch_range, rows)
    yaws = lin(*dist.yaw_range, cols)
    return [(float(p), float(y)) for p in pitches for y in yaws]


def grid_viewpoints(dist: ViewpointDistribution, rows: int, cols: int) -> list[CameraView]:
    """Row-major grid: rows step through pitch, columns through yaw."""
    return [rotate_view(dist.base_view, p, y) for p, y in grid_angles(dist, rows, cols)]


def apply_pose(scene: Scene, pose: Pose | None) -> Scene:
    if pose is None or pose.is_identity:
        return scene
    if pose.rotation == (1.0, 0.0, 0.0, 0.0):
        return scene.replace(means=scene.means + np.asarray(pose.translation))
    r = pose.matrix()
    means = scene.means @ r.T + np.asarray(pose.translation)
    rots = quat_multiply(pose.rotation, scene.rotations)
    rots /= np.linalg.norm(rots, axis=1, keepdims=True)
    return scene.replace(means=means, rotations=rots)
