"""Pinhole camera model: unprojection of depth pixels into world space.

Conventions used throughout the toolkit:

* Pixel coordinates (u, v): u is the column index, v the row index, and an
  integer pair addresses the center of that pixel.  Depth arrays are indexed
  ``raw[v, u]``.
* Depth frames store raw integer sensor units; metric depth along the
  camera z axis is ``raw / depth_divisor``.  Raw value 0 is invalid, and
  anything beyond the configured max range (default 10 m) is discarded.
* Intrinsics are the usual fx, fy, cx, cy.
* A pose stores the world-to-camera rotation ``R`` and translation ``T``:
  ``p_cam = R @ p_world + T``.  Pose *files* hold the inverse of this (a
  camera-to-world matrix); use :meth:`CameraPose.from_camera_to_world`.

Unprojection of pixel (u, v) at metric depth s:

    p_cam   = s * [(u - cx) / fx, (v - cy) / fy, 1]
    p_world = R^T @ (p_cam - T)

R is validated orthonormal at construction, so its transpose is its inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidDepthError, InvalidPoseError, MalformedInputError

DEFAULT_DEPTH_DIVISOR = 1000.0
DEFAULT_MAX_DEPTH = 10.0
_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        for name in ("fx", "fy", "cx", "cy"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"intrinsic {name} is not finite")

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "CameraIntrinsics":
        """Build from a 3x3 (or padded 4x4) intrinsic matrix."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((3, 3), (4, 4)):
            raise MalformedInputError(f"intrinsic matrix must be 3x3 or 4x4, got {m.shape}")
        return cls(fx=float(m[0, 0]), fy=float(m[1, 1]), cx=float(m[0, 2]), cy=float(m[1, 2]))

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: p_cam = rotation @ p_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3):
            raise MalformedInputError(f"rotation must be 3x3, got {r.shape}")
        if t.shape != (3,):
            raise MalformedInputError(f"translation must have 3 entries, got {t.shape}")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise InvalidPoseError("pose contains non-finite values")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise InvalidPoseError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise InvalidPoseError("rotation determinant is not +1 within 1e-6")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_camera_to_world(cls, m: np.ndarray) -> "CameraPose":
        """Build from a 4x4 camera-to-world matrix (the on-disk pose format)."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise MalformedInputError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=_ORTHO_TOL):
            raise InvalidPoseError("pose matrix last row must be [0, 0, 0, 1]")
        r_cw = m[:3, :3]
        # Validate on the stored orientation, then invert by transpose so the
        # world-to-camera rotation is exactly orthonormal too.
        probe = cls(r_cw, np.zeros(3))
        r_wc = probe.rotation.T
        return cls(r_wc, -r_wc @ m[:3, 3])

    def camera_to_world_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = -self.rotation.T @ self.translation
        return m


@dataclass(frozen=True)
class DepthFrame:
    """A single depth image in raw sensor units."""

    width: int
    height: int
    raw: np.ndarray
    depth_divisor: float = DEFAULT_DEPTH_DIVISOR

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise MalformedInputError(f"frame size must be positive, got {self.width}x{self.height}")
        if self.depth_divisor <= 0:
            raise ConfigError(f"depth divisor must be positive, got {self.depth_divisor}")
        raw = np.ascontiguousarray(self.raw)
        if raw.size != self.width * self.height:
            raise MalformedInputError(
                f"depth array has {raw.size} values, expected {self.width * self.height}"
            )
        raw = raw.reshape(self.height, self.width)
        if raw.size and raw.min() < 0:
            raise MalformedInputError("raw depth values must be nonnegative")
        raw.flags.writeable = False
        object.__setattr__(self, "raw", raw)

    def depth_meters(self) -> np.ndarray:
        """Metric depth per pixel; invalid (zero raw) pixels become 0.0."""
        return self.raw.astype(np.float64) / self.depth_divisor


def unproject_pixel(
    u: float, v: float, depth_m: float, intrinsics: CameraIntrinsics, pose: CameraPose
) -> np.ndarray:
    """Map one pixel at metric depth to a world-space point (float64, shape (3,))."""
    if not depth_m > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth_m}")
    p_cam = depth_m * np.array(
        [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0]
    )
    return pose.rotation.T @ (p_cam - pose.translation)


def project_point(
    point: np.ndarray, intrinsics: CameraIntrinsics, pose: CameraPose
) -> tuple[float, float, float] | None:
    """Map a world point to fractional (u, v) and camera depth.

    Returns None when the point is at or behind the camera plane.  Pixels
    outside the image rectangle are still returned; bounds are the caller's
    concern.
    """
    p = np.asarray(point, dtype=np.float64).reshape(3)
    p_cam = pose.rotation @ p + pose.translation
    z = p_cam[2]
    if z <= 0:
        return None
    u = intrinsics.fx * p_cam[0] / z + intrinsics.cx
    v = intrinsics.fy * p_cam[1] / z + intrinsics.cy
    return (float(u), float(v), float(z))


def unproject_frame(
    frame: DepthFrame,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
    stride: int = 1,
    max_depth: float = DEFAULT_MAX_DEPTH,
) -> tuple[np.ndarray, np.ndarray]:
    """Unproject every valid depth pixel on the stride lattice.

    Returns ``(pixels, points)`` where pixels is (N, 2) int64 holding (u, v)
    and points is (N, 3) float64 world coordinates.  A pixel participates iff
    it lies on the lattice (u % stride == 0 and v % stride == 0), its raw
    depth is nonzero, and its metric depth is <= max_depth.  Output order is
    row-major over the lattice.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if max_depth <= 0:
        raise ConfigError(f"max depth must be positive, got {max_depth}")
    us = np.arange(0, frame.width, stride, dtype=np.int64)
    vs = np.arange(0, frame.height, stride, dtype=np.int64)
    grid_u, grid_v = np.meshgrid(us, vs)
    raw = frame.raw[::stride, ::stride]
    depth = raw.astype(np.float64) / frame.depth_divisor
    valid = (raw > 0) & (depth <= max_depth)

    u = grid_u[valid].astype(np.float64)
    v = grid_v[valid].astype(np.float64)
    s = depth[valid]
    dirs = np.stack(
        [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)],
        axis=1,
    )
    p_cam = dirs * s[:, None]
    points = (p_cam - pose.translation) @ pose.rotation
    pixels = np.stack([grid_u[valid], grid_v[valid]], axis=1)
    return pixels, points
