"""Voxel grids and multi-view feature volumes (masked mean and variance)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import in_frustum_mask, pixel_to_feature_index, project_points
from .errors import InvalidGridError, NumericError, ShapeError
from .tensor import read_tensor, write_tensor

VARIANCE_TOL = 1e-9


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned grid; voxel ``(i, j, k)`` is centered at
    ``origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``."""

    origin: tuple[float, float, float]
    voxel_size: float
    extents: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "extents", tuple(int(v) for v in self.extents))
        if len(self.origin) != 3 or len(self.extents) != 3:
            raise InvalidGridError("grid origin and extents need 3 components")
        if not self.voxel_size > 0:
            raise InvalidGridError(f"voxel size must be positive, got {self.voxel_size}",
                                   field="voxel_size")
        if min(self.extents) < 1:
            raise InvalidGridError(f"grid extents must be >= 1, got {self.extents}",
                                   field="extents")

    @classmethod
    def default(cls, origin=(-3.2, -3.2, 0.0)):
        """6.4 x 6.4 x 2.56 m at 0.16 m voxels (40 x 40 x 16)."""
        return cls(origin, 0.16, (40, 40, 16))

    @classmethod
    def centered_on_poses(cls, centers, voxel_size, extents, z_origin=0.0):
        """Grid whose x/y center is the mean of the given camera centers."""
        c = np.mean(np.asarray(centers, dtype=float), axis=0)
        half = 0.5 * voxel_size * np.asarray(extents[:2], dtype=float)
        return cls((c[0] - half[0], c[1] - half[1], z_origin), voxel_size, extents)

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.extents))

    @property
    def size_m(self) -> np.ndarray:
        return np.asarray(self.extents, dtype=float) * self.voxel_size

    def centers(self) -> np.ndarray:
        """Voxel centers as ``[nx, ny, nz, 3]``."""
        axes = [self.origin[a] + (np.arange(n) + 0.5) * self.voxel_size
                for a, n in enumerate(self.extents)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def center_of(self, index) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(index, dtype=float) + 0.5) * self.voxel_size

    def voxel_of(self, points) -> np.ndarray:
        """Integer voxel indices containing ``points`` (may be out of range)."""
        p = np.asarray(points, dtype=float)
        return np.floor((p - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)

    def contains_index(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.extents)), axis=-1)

    def downsample(self, factor: int) -> "VoxelGridSpec":
        if any(n % factor for n in self.extents):
            raise ShapeError(f"extents {self.extents} not divisible by {factor}")
        return VoxelGridSpec(self.origin, self.voxel_size * factor,
                             tuple(n // factor for n in self.extents))

    def translated(self, offset) -> "VoxelGridSpec":
        return VoxelGridSpec(tuple(np.asarray(self.origin) + np.asarray(offset)),
                             self.voxel_size, self.extents)

    def header(self) -> str:
        o = " ".join(repr(v) for v in self.origin)
        e = " ".join(str(v) for v in self.extents)
        return f"grid {o} {self.voxel_size!r} {e}"

    @classmethod
    def from_header(cls, line: str) -> "VoxelGridSpec":
        parts = line.split()
        if len(parts) != 8 or parts[0] != "grid":
            raise InvalidGridError(f"malformed grid header {line!r}")
        vals = [float(v) for v in parts[1:5]]
        return cls(tuple(vals[:3]), vals[3], tuple(int(v) for v in parts[5:8]))


@dataclass(eq=False)
class FeatureVolume:
    spec: VoxelGridSpec
    mean: np.ndarray  # [C, nx, ny, nz]
    variance: np.ndarray  # [C, nx, ny, nz]
    coverage: np.ndarray  # [nx, ny, nz] int
    masks: Optional[list] = None

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def backproject_view(view, spec: VoxelGridSpec):
    """Copy each in-frustum voxel center's feature-map cell into the grid.

    Returns ``(volume [C, nx, ny, nz], mask [nx, ny, nz] bool)``; voxels outside
    the view frustum are zero.
    """
    centers = spec.centers().reshape(-1, 3)
    u, v, lam = project_points(centers, view)
    mask = in_frustum_mask(u, v, lam, view.intrinsics)
    c = view.features.shape[0]
    out = np.zeros((c, centers.shape[0]))
    if mask.any():
        row, col = pixel_to_feature_index(u[mask], v[mask], view)
        out[:, mask] = view.features[:, row, col]
    return out.reshape(c, *spec.extents), mask.reshape(spec.extents)


def fuse_views(volumes: Sequence[np.ndarray], masks: Sequence[np.ndarray],
               spec: VoxelGridSpec, keep_masks: bool = False) -> FeatureVolume:
    """Masked mean and population variance across views.

    Views are reduced in the given order. Voxels no view covers get mean 0
    and variance 0.
    """
    if len(volumes) == 0 or len(volumes) != len(masks):
        raise ShapeError("need at least one view and one mask per view")
    shape = volumes[0].shape
    if shape[1:] != spec.extents:
        raise ShapeError(f"volume extents {shape[1:]} != grid {spec.extents}")
    total = np.zeros(shape)
    total_sq = np.zeros(shape)
    count = np.zeros(spec.extents, dtype=np.int64)
    for vol, m in zip(volumes, masks):
        if vol.shape != shape or m.shape != spec.extents:
            raise ShapeError("per-view volumes/masks have mismatched shapes")
        mf = m.astype(np.float64)
        total += vol * mf
        total_sq += vol * vol * mf
        count += m.astype(np.int64)
    covered = count > 0
    inv = np.zeros(spec.extents)
    inv[covered] = 1.0 / count[covered]
    mean = total * inv
    var = total_sq * inv - mean * mean
    scale = np.maximum(1.0, total_sq * inv)
    if np.any(var < -VARIANCE_TOL * scale):
        raise NumericError("variance cancellation beyond tolerance")
    var = np.maximum(var, 0.0)
    return FeatureVolume(spec, mean, var, count,
                         list(masks) if keep_masks else None)


def build_volume(views, spec: VoxelGridSpec, keep_masks=False) -> FeatureVolume:
    vols, masks = [], []
    for view in views:
        v, m = backproject_view(view, spec)
        vols.append(v)
        masks.append(m)
    return fuse_views(vols, masks, spec, keep_masks=keep_masks)


def concat_mean_var(volume: FeatureVolume) -> np.ndarray:
    """Channel concatenation ``[mean; variance]`` -> ``[2C, nx, ny, nz]``."""
    return np.concatenate([volume.mean, volume.variance], axis=0)


def save_volume(path, array, spec: VoxelGridSpec):
    with open(path, "wb") as fh:
        fh.write((spec.header() + "\n").encode("ascii"))
        write_tensor(fh, array)


def load_volume(path):
    with open(path, "rb") as fh:
        spec = VoxelGridSpec.from_header(fh.readline().decode("ascii"))
        return read_tensor(fh), spec
