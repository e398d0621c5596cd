"""Command line entry point: ``voxelgeo <subcommand> ...``.

Exit codes: 0 ok, 2 validation error, 3 numeric failure (NaN/Inf).
Every output is written to a temporary sibling and renamed on success.
"""
from __future__ import annotations

import argparse
import io
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .boxes import format_box, read_boxes
from .checkpoint import atomic_write, dumps_checkpoint, load_checkpoint
from .errors import NumericError, VoxelGeoError
from .evaluation import per_class_ap
from .model import NetConfig
from .sceneio import load_scene, save_scene, worker_count
from .shaping import apply_shaping, surface_labels
from .synthetic import generate_synthetic_scene
from .tensor import check_finite, write_tensor
from .train import TrainConfig, default_net_config, train_toy
from .volume import build_volume, concat_mean_var

log = logging.getLogger("voxelgeo")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


def _ranged(low, high, kind=float):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a valid {kind.__name__}: {text!r}") from None
        if not low <= v <= high:
            raise argparse.ArgumentTypeError(f"flag-range error: {v} outside [{low}, {high}]")
        return v
    return parse


def _scene_dir(text):
    p = Path(text)
    if not (p / "scene.txt").is_file():
        raise argparse.ArgumentTypeError(f"no scene manifest in {text}")
    return p


def _existing(text):
    if not Path(text).is_file():
        raise argparse.ArgumentTypeError(f"file not found: {text}")
    return Path(text)


def _volume_bytes(array, spec) -> bytes:
    buf = io.BytesIO()
    buf.write((spec.header() + "\n").encode("ascii"))
    write_tensor(buf, array)
    return buf.getvalue()


def _detections_text(dets) -> str:
    return "".join(format_box(d) + "\n" for d in dets)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args):
    scene = generate_synthetic_scene(seed=args.seed, num_boxes=args.boxes,
                                     num_views=args.views, feature_channels=args.channels)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".tmp")
    if tmp.exists():
        for f in tmp.iterdir():
            f.unlink()
    save_scene(scene, tmp)
    if out.exists():
        for f in out.iterdir():
            f.unlink()
        out.rmdir()
    tmp.rename(out)
    print(f"wrote scene with {len(scene.views)} views, {len(scene.boxes)} boxes to {out}")


def cmd_build_volume(args):
    scene = load_scene(args.scene_dir)
    vol = build_volume(scene.views, scene.spec)
    data = concat_mean_var(vol)
    check_finite(data, "feature volume")
    atomic_write(args.out, _volume_bytes(data, scene.spec))
    print(f"wrote [{data.shape[0]}, {' x '.join(map(str, data.shape[1:]))}] volume to {args.out}")


def _surface(net, vol):
    s = net.predict_surface(vol).values
    check_finite(s, "surface probabilities")
    return s


def cmd_shape(args):
    scene = load_scene(args.scene_dir)
    net = load_checkpoint(args.checkpoint)
    net.check_grid(scene.spec.extents)
    vol = build_volume(scene.views, scene.spec)
    s = _surface(net, vol)
    if args.binary:
        s = (s >= args.surface_threshold).astype(float)
    atomic_write(args.out, _volume_bytes(s, scene.spec))
    print(f"surface voxels >= {args.surface_threshold}: {int((s >= args.surface_threshold).sum())}"
          f" of {s.size}")


def cmd_detect(args):
    scene = load_scene(args.scene_dir)
    net = load_checkpoint(args.checkpoint)
    net.check_grid(scene.spec.extents)
    vol = build_volume(scene.views, scene.spec)
    dets = net.detect(vol, score_threshold=args.score_threshold)
    for d in dets:
        check_finite(d.as_array(), "detections")
    payloads = {}
    if args.dump_volumes:
        s = _surface(net, vol)
        shaped = apply_shaping(vol.mean, s) if net.shaping is not None else vol.mean
        for name, arr in (("mean", vol.mean), ("variance", vol.variance), ("surface", s),
                          ("shaped", shaped)):
            payloads[Path(args.dump_volumes) / f"{name}.bin"] = _volume_bytes(arr, scene.spec)
    # write only once everything has been computed
    text = f"# classes {' '.join(scene.classes)}\n" + _detections_text(dets)
    if payloads:
        Path(args.dump_volumes).mkdir(parents=True, exist_ok=True)
        for path, blob in payloads.items():
            atomic_write(path, blob)
    atomic_write(args.out, text)
    print(f"wrote {len(dets)} detections to {args.out}")


def cmd_train_toy(args):
    scene = load_scene(args.scene_dir)
    cfg = default_net_config(scene, surface_weight=args.surface_weight,
                             use_shaping=not args.no_shaping)
    tcfg = TrainConfig(seed=args.seed, steps=args.steps, lr=args.lr, clip_norm=args.clip_norm,
                       log_every=args.log_every)
    result = train_toy([scene], cfg, tcfg)
    last = result.trace[-1] if result.trace else None
    if last is not None and not np.isfinite(last.total):
        raise NumericError("training loss became non-finite")
    atomic_write(args.out, dumps_checkpoint(result.net))
    if args.trace:
        lines = ["step total cls centerness box surface"]
        lines += [f"{i} {s.total!r} {s.cls!r} {s.centerness!r} {s.box!r} {s.surface!r}"
                  for i, s in enumerate(result.trace)]
        atomic_write(args.trace, "\n".join(lines) + "\n")
    if last is not None:
        print(f"steps {args.steps} total {last.total:.6f} detection {last.detection:.6f} "
              f"surface {last.surface:.6f}")
    print(f"wrote checkpoint to {args.out}")


def cmd_eval_map(args):
    dets, det_classes = read_boxes(args.detections)
    if args.scene_dir is not None:
        scene = load_scene(args.scene_dir)
        gts, classes = scene.boxes, scene.classes
    else:
        gts, classes = read_boxes(args.gt)
        classes = classes or det_classes or []
    table = {t: per_class_ap(dets, gts, t) for t in (0.25, 0.5)}
    for t, name in ((0.25, "0.25"), (0.5, "0.50")):
        aps = table[t]
        value = float(np.mean(list(aps.values()))) if aps else 0.0
        print(f"mAP@{name} {value:.6f}")
    print(f"{'class':<16} {'AP@0.25':>8} {'AP@0.50':>8}")
    for c in sorted(table[0.25]):
        name = classes[c] if classes and 0 <= c < len(classes) else str(c)
        print(f"{name:<16} {table[0.25][c]:>8.4f} {table[0.5][c]:>8.4f}")


def cmd_dump_surface(args):
    scene = load_scene(args.scene_dir)
    if args.checkpoint is not None:
        net = load_checkpoint(args.checkpoint)
        net.check_grid(scene.spec.extents)
        s = _surface(net, build_volume(scene.views, scene.spec))
    else:
        if scene.points is None or not scene.has_depth:
            raise VoxelGeoError("label dump needs depth maps and a point cloud "
                                "(or pass --checkpoint)")
        s = surface_labels(scene.points, scene.views, scene.spec, args.margin).values
    idx = np.argwhere(s >= args.surface_threshold)
    centers = scene.spec.centers()[tuple(idx.T)]
    p = s[tuple(idx.T)]
    # probability ramp: blue (threshold) -> red (certain)
    colors = np.stack([p, np.zeros_like(p), 1.0 - p], axis=1)
    buf = io.StringIO()
    np.savetxt(buf, np.hstack([centers, colors]), fmt="%.9g")
    atomic_write(args.out, buf.getvalue())
    print(f"wrote {len(idx)} surface voxels to {args.out}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxelgeo",
                                description="Geometry-aware multi-view 3D detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="render a synthetic scene directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--boxes", type=_ranged(1, 16, int), default=3)
    g.add_argument("--views", type=_ranged(1, 64, int), default=8)
    g.add_argument("--channels", type=_ranged(1, 64, int), default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synthetic)

    b = sub.add_parser("build-volume", help="fuse views into a [mean, variance] volume")
    b.add_argument("--scene-dir", type=_scene_dir, required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_volume)

    s = sub.add_parser("shape", help="predict the surface probability volume S")
    s.add_argument("--scene-dir", type=_scene_dir, required=True)
    s.add_argument("--checkpoint", type=_existing, required=True)
    s.add_argument("--surface-threshold", type=_ranged(0.0, 1.0), default=0.5)
    s.add_argument("--binary", action="store_true", help="write the thresholded mask")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_shape)

    d = sub.add_parser("detect", help="run the full pipeline and write detections")
    d.add_argument("--scene-dir", type=_scene_dir, required=True)
    d.add_argument("--checkpoint", type=_existing, required=True)
    d.add_argument("--score-threshold", type=_ranged(0.0, 1.0), default=None)
    d.add_argument("--dump-volumes", metavar="DIR", default=None,
                   help="also write mean/variance/surface/shaped volumes")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    t = sub.add_parser("train-toy", help="train on one scene and write a checkpoint")
    t.add_argument("--scene-dir", type=_scene_dir, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=_ranged(0, 10**7, int), default=1000)
    t.add_argument("--lr", type=_ranged(0.0, 1.0), default=3e-3)
    t.add_argument("--clip-norm", type=_ranged(1e-12, 1e12), default=35.0)
    t.add_argument("--surface-weight", type=_ranged(0.0, 1e6), default=10.0)
    t.add_argument("--no-shaping", action="store_true", help="ablation: S = 1 everywhere")
    t.add_argument("--log-every", type=int, default=0)
    t.add_argument("--trace", default=None, help="write the per-step loss trace here")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_toy)

    e = sub.add_parser("eval-map", help="mAP@0.25 / mAP@0.50 of a detections file")
    e.add_argument("--detections", type=_existing, required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene-dir", type=_scene_dir)
    src.add_argument("--gt", type=_existing)
    e.set_defaults(func=cmd_eval_map)

    u = sub.add_parser("dump-surface", help="thresholded surface voxels as 'x y z r g b'")
    u.add_argument("--scene-dir", type=_scene_dir, required=True)
    u.add_argument("--checkpoint", type=_existing, default=None,
                   help="predicted S (default: ground-truth labels)")
    u.add_argument("--surface-threshold", type=_ranged(0.0, 1.0), default=0.5)
    u.add_argument("--margin", type=_ranged(0, 64, int), default=4)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_dump_surface)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "log_every", 0)
                        else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=worker_count()):
            with np.errstate(invalid="ignore"):
                args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VoxelGeoError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
