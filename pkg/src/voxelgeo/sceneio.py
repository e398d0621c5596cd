"""Scene directories: a line-oriented manifest plus tensor and text payloads.

Manifest (``scene.txt``)::

    voxelgeo-scene 1
    origin_policy explicit            (or "poses": x/y centered on the cameras)
    grid_origin <ox> <oy> <oz>
    voxel_size <s>
    extents <nx> <ny> <nz>
    classes <name> <name> ...
    points points.txt                 (optional, "x y z [r g b]" per line)
    boxes boxes.txt                   (optional)
    view
    intrinsics <fx> <fy> <cx> <cy> <width> <height>
    pose <16 row-major world-to-camera entries>
    features view000_features.bin
    depth view000_depth.bin           (optional)
    end
    ...
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .boxes import read_boxes, write_boxes
from .camera import CameraIntrinsics, CameraPose, CameraView
from .errors import (InvalidGridError, MalformedMatrixError, MissingFileError,
                     NonRigidPoseError, ShapeError, SizeMismatchError, ValidationError)
from .scene import SceneBundle
from .tensor import load as load_tensor, save as save_tensor
from .volume import VoxelGridSpec

MANIFEST = "scene.txt"
MAGIC = "voxelgeo-scene 1"
ORIGIN_POLICIES = ("explicit", "poses")


def worker_count(default=None) -> int:
    """Worker cap from ``VOXELGEO_THREADS`` (at least 1)."""
    raw = os.environ.get("VOXELGEO_THREADS")
    if raw is None:
        return default or min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"VOXELGEO_THREADS must be an integer, got {raw!r}",
                              field="VOXELGEO_THREADS") from None
    if n < 1:
        raise ValidationError("VOXELGEO_THREADS must be >= 1", field="VOXELGEO_THREADS")
    return n


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_scene(scene: SceneBundle, directory) -> Path:
    """Write ``scene`` into ``directory`` (created if needed)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    spec = scene.spec
    lines = [MAGIC,
             f"origin_policy {scene.origin_policy}",
             f"grid_origin {_fmt(spec.origin)}",
             f"voxel_size {spec.voxel_size!r}",
             "extents " + " ".join(str(n) for n in spec.extents),
             "classes " + " ".join(scene.classes)]
    if scene.points is not None:
        pts = scene.points if scene.colors is None else np.hstack([scene.points, scene.colors])
        np.savetxt(d / "points.txt", pts, fmt="%.17g")
        lines.append("points points.txt")
    if scene.boxes is not None:
        write_boxes(d / "boxes.txt", scene.boxes, scene.classes)
        lines.append("boxes boxes.txt")
    for i, v in enumerate(scene.views):
        k = v.intrinsics
        lines += ["view",
                  f"intrinsics {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}",
                  f"pose {_fmt(v.pose.T.ravel())}",
                  f"features view{i:03d}_features.bin"]
        save_tensor(d / f"view{i:03d}_features.bin", v.features)
        if v.depth is not None:
            save_tensor(d / f"view{i:03d}_depth.bin", v.depth)
            lines.append(f"depth view{i:03d}_depth.bin")
        lines.append("end")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def _floats(parts, n, path, field):
    if len(parts) != n:
        raise MalformedMatrixError(f"expected {n} numbers, got {len(parts)}", path=path,
                                   field=field)
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise MalformedMatrixError("non-numeric entry", path=path, field=field) from None


def _read_payload(path, field):
    if not path.is_file():
        raise MissingFileError("referenced file does not exist", path=str(path), field=field)
    try:
        return load_tensor(path)
    except (ShapeError, EOFError) as exc:
        raise SizeMismatchError(str(exc), path=str(path), field=field) from None


def _parse_manifest(path):
    head, views, cur = {}, [], None
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise ValidationError("missing manifest magic line", path=str(path), field="magic")
    for n, raw in enumerate(lines[1:], 2):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        key, rest = parts[0], parts[1:]
        if key == "view":
            if cur is not None:
                raise ValidationError("nested view block", path=str(path), field=f"line {n}")
            cur = {}
        elif key == "end":
            if cur is None:
                raise ValidationError("'end' outside a view block", path=str(path),
                                      field=f"line {n}")
            views.append(cur)
            cur = None
        elif cur is not None:
            cur[key] = rest
        else:
            head[key] = rest
    if cur is not None:
        raise ValidationError("unterminated view block", path=str(path), field="view")
    return head, views


def _load_view(d, manifest, i, block):
    where = f"view {i}"
    for key in ("intrinsics", "pose", "features"):
        if key not in block:
            raise ValidationError(f"{where} lacks '{key}'", path=str(manifest), field=key)
    k = _floats(block["intrinsics"], 6, str(manifest), f"{where} intrinsics")
    if k[4] != int(k[4]) or k[5] != int(k[5]):
        raise MalformedMatrixError("image size must be integral", path=str(manifest),
                                   field=f"{where} intrinsics")
    try:
        intr = CameraIntrinsics(k[0], k[1], k[2], k[3], int(k[4]), int(k[5]))
    except MalformedMatrixError as exc:
        raise MalformedMatrixError(str(exc), path=str(manifest),
                                   field=f"{where} intrinsics") from None
    T = np.array(_floats(block["pose"], 16, str(manifest), f"{where} pose")).reshape(4, 4)
    try:
        pose = CameraPose(T)
    except NonRigidPoseError as exc:
        raise NonRigidPoseError(str(exc), path=str(manifest), field=f"{where} pose") from None
    except MalformedMatrixError as exc:
        raise MalformedMatrixError(str(exc), path=str(manifest), field=f"{where} pose") from None
    fpath = d / block["features"][0]
    feats = _read_payload(fpath, f"{where} features")
    depth = None
    if "depth" in block:
        dpath = d / block["depth"][0]
        depth = _read_payload(dpath, f"{where} depth")
        if depth.shape != (intr.height, intr.width):
            raise SizeMismatchError(
                f"depth has shape {depth.shape} ({depth.size} values), expected "
                f"{intr.height}x{intr.width}", path=str(dpath), field=f"{where} depth")
    try:
        return CameraView(intr, pose, feats, depth)
    except ShapeError as exc:
        raise SizeMismatchError(str(exc), path=str(fpath), field=f"{where} features") from None


def _grid(head, manifest, views, policy):
    def need(key, n):
        if key not in head:
            raise ValidationError(f"manifest lacks '{key}'", path=str(manifest), field=key)
        return _floats(head[key], n, str(manifest), key)

    origin = need("grid_origin", 3)
    size = need("voxel_size", 1)[0]
    ext = need("extents", 3)
    if any(e != int(e) for e in ext):
        raise InvalidGridError("extents must be integers", path=str(manifest), field="extents")
    ext = tuple(int(e) for e in ext)
    try:
        if policy == "poses":
            return VoxelGridSpec.centered_on_poses([v.pose.center for v in views], size, ext,
                                                   z_origin=origin[2])
        return VoxelGridSpec(tuple(origin), size, ext)
    except InvalidGridError as exc:
        raise InvalidGridError(str(exc).split(" field=")[0], path=str(manifest),
                               field=exc.field) from None


def load_scene(directory) -> SceneBundle:
    """Load and validate a scene directory written by :func:`save_scene`."""
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.is_file():
        raise MissingFileError("scene manifest not found", path=str(manifest))
    head, blocks = _parse_manifest(manifest)
    policy = (head.get("origin_policy") or ["explicit"])[0]
    if policy not in ORIGIN_POLICIES:
        raise ValidationError(f"unknown origin policy {policy!r}", path=str(manifest),
                              field="origin_policy")
    # grid validation is cheap, so run it before touching any payload
    if "voxel_size" in head:
        size = _floats(head["voxel_size"], 1, str(manifest), "voxel_size")[0]
        if not size > 0:
            raise InvalidGridError(f"voxel size must be positive, got {size}",
                                   path=str(manifest), field="voxel_size")
    if not blocks:
        raise ValidationError("scene has no views", path=str(manifest), field="view")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        views = list(pool.map(lambda a: _load_view(d, manifest, *a), enumerate(blocks)))
    spec = _grid(head, manifest, views, policy)
    classes = list(head.get("classes", []))

    points = colors = None
    if "points" in head:
        ppath = d / head["points"][0]
        if not ppath.is_file():
            raise MissingFileError("referenced file does not exist", path=str(ppath),
                                   field="points")
        try:
            arr = np.loadtxt(ppath, ndmin=2)
        except ValueError as exc:
            raise ValidationError(str(exc), path=str(ppath), field="points") from None
        if arr.size == 0:
            arr = np.zeros((0, 3))
        if arr.shape[1] not in (3, 6):
            raise SizeMismatchError(f"points need 3 or 6 columns, got {arr.shape[1]}",
                                    path=str(ppath), field="points")
        points = arr[:, :3].copy()
        colors = arr[:, 3:].copy() if arr.shape[1] == 6 else None

    boxes = []
    if "boxes" in head:
        bpath = d / head["boxes"][0]
        if not bpath.is_file():
            raise MissingFileError("referenced file does not exist", path=str(bpath),
                                   field="boxes")
        boxes, box_classes = read_boxes(bpath)
        if not classes and box_classes:
            classes = box_classes
        for b in boxes:
            if b.label is None or not 0 <= b.label < max(len(classes), 1):
                raise ValidationError(f"box label {b.label} outside the class list",
                                      path=str(bpath), field="label")
    return SceneBundle(spec, views, boxes, classes, points, colors, origin_policy=policy)
