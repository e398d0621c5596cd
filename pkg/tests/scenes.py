"""Random cameras and grids for oracle tests."""
import numpy as np

from voxelgeo.camera import CameraIntrinsics, CameraPose, CameraView
from voxelgeo.volume import VoxelGridSpec


def random_grid(rng, max_extent=16):
    ext = tuple(int(n) for n in rng.integers(2, max_extent + 1, size=3))
    size = float(rng.uniform(0.05, 0.3))
    origin = tuple(-0.5 * size * np.asarray(ext) + rng.normal(0, 0.1, 3))
    return VoxelGridSpec(origin, size, ext)


def random_view(rng, spec, channels=3, stride=None, width=32, height=24):
    stride = stride or int(rng.choice([1, 2, 4]))
    intr = CameraIntrinsics(float(rng.uniform(15, 40)), float(rng.uniform(15, 40)),
                            width / 2 + rng.uniform(-3, 3), height / 2 + rng.uniform(-3, 3),
                            width, height)
    center = np.asarray(spec.origin) + 0.5 * spec.size_m
    eye = center + rng.normal(0, 1, 3) * np.max(spec.size_m) * 1.5
    target = center + rng.normal(0, 0.2, 3) * np.max(spec.size_m)
    pose = CameraPose.look_at(eye, target)
    feats = rng.normal(size=(channels, height // stride, width // stride))
    return CameraView(intr, pose, feats)


def small_scene(seed=1, num_boxes=2):
    """A 16x16x8 synthetic scene that trains at a few steps per second."""
    from voxelgeo.synthetic import generate_synthetic_scene
    from voxelgeo.volume import VoxelGridSpec
    spec = VoxelGridSpec((-2.4, -2.4, 0.0), 0.3, (16, 16, 8))
    return generate_synthetic_scene(
        seed=seed, spec=spec, num_boxes=num_boxes, num_views=4, points_per_box=500,
        ring_radius=3.5, intrinsics=dict(fx=40.0, fy=40.0, cx=24.0, cy=16.0,
                                         width=48, height=32))
