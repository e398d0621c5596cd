"""Desk-scale synthetic scenes: yawed boxes seen by a ring of cameras."""
from __future__ import annotations

import math

import numpy as np

from .boxes import OrientedBox, rotated_iou
from .camera import CameraIntrinsics, CameraPose, CameraView
from .errors import PlacementError
from .scene import SceneBundle
from .volume import VoxelGridSpec

DEFAULT_INTRINSICS = dict(fx=40.0, fy=40.0, cx=32.0, cy=24.0, width=64, height=48)


def ray_box_hits(origins, directions, box: OrientedBox):
    """Entry distance of each ray into ``box`` (``inf`` on a miss).

    ``origins``/``directions`` are ``[N, 3]``; distances are in units of the
    direction vectors.
    """
    o = box.to_local(origins)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = np.asarray(directions, dtype=float)
    dl = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
    half = 0.5 * box.size
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / dl
        t2 = (half - o) / dl
    tmin = np.where(dl == 0, np.where(np.abs(o) <= half, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(dl == 0, np.where(np.abs(o) <= half, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    hit = (t_near <= t_far) & (t_far > 0)
    return np.where(hit, np.maximum(t_near, 0.0), np.inf)


def render(intrinsics: CameraIntrinsics, pose: CameraPose, boxes):
    """Optical depth map and index of the first box hit per pixel (-1 = none)."""
    h, w = intrinsics.height, intrinsics.width
    vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    d_cam = np.stack([(uu - intrinsics.cx) / intrinsics.fx,
                      (vv - intrinsics.cy) / intrinsics.fy,
                      np.ones_like(uu)], axis=-1).reshape(-1, 3)
    # unnormalized so that the ray parameter equals optical depth
    d_world = d_cam @ pose.R
    origins = np.broadcast_to(pose.center, d_world.shape)
    best = np.full(d_world.shape[0], np.inf)
    which = np.full(d_world.shape[0], -1, dtype=np.int64)
    for i, box in enumerate(boxes):
        t = ray_box_hits(origins, d_world, box)
        closer = t < best
        best[closer] = t[closer]
        which[closer] = i
    depth = np.where(np.isfinite(best), best, 0.0).reshape(h, w)
    return depth, which.reshape(h, w)


def sample_box_surface(box: OrientedBox, count: int, rng) -> np.ndarray:
    """Area-weighted uniform samples on the six faces of ``box``."""
    sx, sy, sz = box.size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(count, 3)) * box.size
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    uv[np.arange(count), axis] = sign * box.size[axis]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(uv)
    world[:, 0] = c * uv[:, 0] - s * uv[:, 1] + box.x
    world[:, 1] = s * uv[:, 0] + c * uv[:, 1] + box.y
    world[:, 2] = uv[:, 2] + box.z
    return world


def _place_boxes(rng, spec, num_boxes, size_range, height_range, margin, retries):
    lo = np.asarray(spec.origin)
    hi = lo + spec.size_m
    boxes = []
    for label in range(num_boxes):
        for _ in range(retries):
            w, l = rng.uniform(*size_range, size=2)
            h = rng.uniform(*height_range)
            yaw = rng.uniform(-math.pi, math.pi)
            r = 0.5 * math.hypot(w, l)
            if hi[0] - lo[0] < 2 * (r + margin) or hi[1] - lo[1] < 2 * (r + margin):
                continue
            x = rng.uniform(lo[0] + r + margin, hi[0] - r - margin)
            y = rng.uniform(lo[1] + r + margin, hi[1] - r - margin)
            z = lo[2] + 0.5 * h
            if z + 0.5 * h > hi[2]:
                continue
            cand = OrientedBox(x, y, z, w, h, l, yaw, label=label)
            # keep footprints apart so every object is visible
            if all(math.hypot(x - b.x, y - b.y) > r + 0.5 * math.hypot(b.w, b.l) + margin
                   for b in boxes):
                boxes.append(cand)
                break
        else:
            raise PlacementError(f"could not place box {label} after {retries} attempts")
    return boxes


def generate_synthetic_scene(seed=0, spec: VoxelGridSpec | None = None, num_boxes=3,
                             num_views=8, feature_channels=4, noise=0.05,
                             ring_radius=4.0, camera_height=1.8, points_per_box=4000,
                             size_range=(0.7, 1.5), height_range=(0.5, 1.1),
                             intrinsics=None, retries=200) -> SceneBundle:
    """Random yaw-oriented boxes (one class each) viewed by a camera ring.

    Feature maps hold a per-class constant vector plus seeded noise where a
    box is hit and a background constant elsewhere; depth is the exact
    ray-box distance (0 where nothing is hit).
    """
    rng = np.random.default_rng(seed)
    spec = spec or VoxelGridSpec.default()
    boxes = _place_boxes(rng, spec, num_boxes, size_range, height_range, 0.3, retries)
    intr = CameraIntrinsics(**(intrinsics or DEFAULT_INTRINSICS))
    palette = rng.normal(0.0, 1.0, size=(num_boxes + 1, feature_channels))
    background, class_vecs = palette[0], palette[1:]
    center = np.asarray(spec.origin) + 0.5 * spec.size_m
    target = np.array([center[0], center[1], spec.origin[2] + 0.4])
    views = []
    for i in range(num_views):
        ang = 2 * math.pi * i / max(num_views, 1)
        eye = target[:2] + ring_radius * np.array([math.cos(ang), math.sin(ang)])
        pose = CameraPose.look_at([eye[0], eye[1], camera_height], target)
        depth, which = render(intr, pose, boxes)
        feats = np.broadcast_to(background[:, None, None],
                                (feature_channels, intr.height, intr.width)).copy()
        hit = which >= 0
        if hit.any():
            labels = np.array([b.label for b in boxes])[which[hit]]
            feats[:, hit] = class_vecs[labels].T
            feats[:, hit] += noise * rng.normal(size=(feature_channels, int(hit.sum())))
        views.append(CameraView(intr, pose, feats, depth))
    if boxes:
        points = np.concatenate([sample_box_surface(b, points_per_box, rng) for b in boxes])
    else:
        points = np.zeros((0, 3))
    classes = [f"class{i}" for i in range(num_boxes)]
    return SceneBundle(spec, views, boxes, classes, points)
