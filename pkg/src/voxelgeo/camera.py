"""Pinhole cameras with world-to-camera poses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import MalformedMatrixError, NonRigidPoseError, ShapeError

RIGID_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise MalformedMatrixError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise MalformedMatrixError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K, width, height):
        K = np.asarray(K, dtype=float)
        if K.shape != (3, 3):
            raise MalformedMatrixError(f"K must be 3x3, got {K.shape}")
        if K[0, 1] != 0 or K[1, 0] != 0 or np.any(K[2] != (0, 0, 1)):
            raise MalformedMatrixError("K must be zero-skew with last row (0, 0, 1)")
        return cls(K[0, 0], K[1, 1], K[0, 2], K[1, 2], int(width), int(height))


def check_rigid(T, tol=RIGID_TOL):
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4):
        raise MalformedMatrixError(f"pose must be 4x4, got {T.shape}")
    if not np.all(np.isfinite(T)):
        raise MalformedMatrixError("pose has non-finite entries")
    if np.max(np.abs(T[3] - (0, 0, 0, 1))) > tol:
        raise NonRigidPoseError("pose last row must be (0, 0, 0, 1)")
    R = T[:3, :3]
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise NonRigidPoseError("pose rotation is not orthonormal")
    if np.linalg.det(R) < 0:
        raise NonRigidPoseError("pose rotation has det -1 (reflection)")
    return T


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform."""

    T: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "T", check_rigid(self.T).copy())

    @property
    def R(self):
        return self.T[:3, :3]

    @property
    def t(self):
        return self.T[:3, 3]

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def inverse(self) -> np.ndarray:
        Ti = np.eye(4)
        Ti[:3, :3] = self.R.T
        Ti[:3, 3] = self.center
        return Ti

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        """Camera at ``eye`` looking at ``target``; x right, y down, z forward."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        if np.linalg.norm(x) < 1e-12:
            raise ValueError("look_at: viewing direction parallel to up vector")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ eye
        return cls(T)


@dataclass(eq=False)
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    features: np.ndarray  # [C, H_f, W_f]
    depth: Optional[np.ndarray] = None  # [H, W] meters, 0 = invalid
    stride: int = field(init=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ShapeError(f"feature map must be [C, H, W], got {self.features.shape}")
        _, fh, fw = self.features.shape
        w, h = self.intrinsics.width, self.intrinsics.height
        if w % fw or h % fh or w // fw != h // fh or w // fw < 1:
            raise ShapeError(
                f"feature map {fh}x{fw} does not divide image {h}x{w} by one integer stride"
            )
        self.stride = w // fw
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != (h, w):
                raise ShapeError(f"depth map must be {h}x{w}, got {self.depth.shape}")


def project_points(points, view):
    """Vectorized pinhole projection of ``[N, 3]`` world points.

    Returns ``(u, v, depth)`` arrays; ``depth <= 0`` marks points behind the camera.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = p @ view.pose.R.T + view.pose.t
    lam = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = cam @ view.intrinsics.K.T
        u = pix[:, 0] / lam
        v = pix[:, 1] / lam
    return u, v, lam


def project(point, view):
    """Project one world point; returns ``(u, v, depth)`` or ``None`` if behind."""
    u, v, lam = project_points(np.asarray(point, dtype=float)[None], view)
    if lam[0] <= 0:
        return None
    return float(u[0]), float(v[0]), float(lam[0])


def in_frustum_mask(u, v, lam, intrinsics):
    return (lam > 0) & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)


def in_frustum(point, view) -> bool:
    u, v, lam = project_points(np.asarray(point, dtype=float)[None], view)
    return bool(in_frustum_mask(u, v, lam, view.intrinsics)[0])


def pixel_to_feature_index(u, v, view_or_stride, feature_shape=None):
    """Nearest feature cell ``(row, col)`` for pixel coordinates.

    Pixel ``i`` spans ``[i, i+1)``; the feature cell is ``floor(x / stride + 0.5)``
    clamped into the map. Accepts scalars or arrays.
    """
    if isinstance(view_or_stride, CameraView):
        stride = view_or_stride.stride
        fh, fw = view_or_stride.features.shape[1:]
    else:
        stride = int(view_or_stride)
        fh, fw = feature_shape
    col = np.floor(np.asarray(u, dtype=float) / stride + 0.5).astype(np.int64)
    row = np.floor(np.asarray(v, dtype=float) / stride + 0.5).astype(np.int64)
    col = np.clip(col, 0, fw - 1)
    row = np.clip(row, 0, fh - 1)
    if col.ndim == 0:
        return int(row), int(col)
    return row, col


def pixel_ray(u, v, view):
    """World-space origin and unit direction of the ray through pixel ``(u, v)``."""
    K = view.intrinsics
    d_cam = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    d = view.pose.R.T @ d_cam
    return view.pose.center, d / np.linalg.norm(d)


def unproject(u, v, depth, view):
    """World point at optical depth ``depth`` along pixel ``(u, v)``."""
    K = view.intrinsics
    cam = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    return view.pose.R.T @ (cam - view.pose.t)
