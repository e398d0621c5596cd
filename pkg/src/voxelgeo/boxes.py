"""Yaw-oriented 3D boxes: containment, exact rotated IoU, NMS and text I/O.

A box is ``(x, y, z, w, h, l, yaw)``: center in meters, ``w`` the extent
along the box's local x axis, ``l`` along its local y axis, ``h`` the
vertical extent, and ``yaw`` a rotation about +z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError


def normalize_yaw(yaw: float) -> float:
    """Wrap to ``(-pi, pi]``."""
    y = math.fmod(yaw, 2 * math.pi)
    if y <= -math.pi:
        y += 2 * math.pi
    elif y > math.pi:
        y -= 2 * math.pi
    return y


@dataclass(frozen=True)
class OrientedBox:
    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    yaw: float = 0.0
    label: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.l > 0):
            raise ValueError(f"box sizes must be positive, got {(self.w, self.h, self.l)}")
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.w, self.l, self.h])  # local x, local y, z

    @property
    def volume(self) -> float:
        return self.w * self.h * self.l

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.h, self.l, self.yaw])

    @classmethod
    def from_array(cls, a, label=None, score=None):
        return cls(*(float(v) for v in a[:7]), label=label, score=score)

    def with_score(self, score):
        return replace(self, score=score)

    def translated(self, offset):
        return replace(self, x=self.x + offset[0], y=self.y + offset[1], z=self.z + offset[2])

    def footprint(self) -> list:
        """Counter-clockwise xy corners as four ``(x, y)`` tuples."""
        hw, hl = 0.5 * self.w, 0.5 * self.l
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return [(self.x + c * px - s * py, self.y + s * px + c * py)
                for px, py in ((-hw, -hl), (hw, -hl), (hw, hl), (-hw, hl))]

    def to_local(self, points) -> np.ndarray:
        """Points expressed in the box frame (rotated by ``-yaw`` about the center)."""
        p = np.asarray(points, dtype=float) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = c * p[..., 0] + s * p[..., 1]
        ly = -s * p[..., 0] + c * p[..., 1]
        return np.stack([lx, ly, p[..., 2]], axis=-1)


def box_volume(box: OrientedBox) -> float:
    return box.volume


def contains(box: OrientedBox, points) -> np.ndarray:
    """Inside test (boundary inclusive) for one point or ``[..., 3]`` points."""
    local = box.to_local(points)
    half = 0.5 * box.size
    inside = np.all(np.abs(local) <= half, axis=-1)
    return bool(inside) if inside.ndim == 0 else inside


def polygon_area(poly) -> float:
    """Shoelace area of a simple polygon given as ``(x, y)`` pairs."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        acc += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return 0.5 * abs(acc)


def clip_polygon(subject, clip):
    """Sutherland-Hodgman: ``subject`` clipped by the convex CCW polygon ``clip``."""
    output = [(float(p[0]), float(p[1])) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        prev_side = side(prev)
        for cur in inp:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    output.append(_intersect(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0:
                output.append(_intersect(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return output


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def footprint_overlap(a: OrientedBox, b: OrientedBox) -> float:
    # cheap circumscribed-circle rejection
    ra = 0.5 * math.hypot(a.w, a.l)
    rb = 0.5 * math.hypot(b.w, b.l)
    if math.hypot(a.x - b.x, a.y - b.y) > ra + rb:
        return 0.0
    return polygon_area(clip_polygon(a.footprint(), b.footprint()))


def intersection_volume(a: OrientedBox, b: OrientedBox) -> float:
    dz = min(a.z + 0.5 * a.h, b.z + 0.5 * b.h) - max(a.z - 0.5 * a.h, b.z - 0.5 * b.h)
    if dz <= 0:
        return 0.0
    return footprint_overlap(a, b) * dz


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    inter = intersection_volume(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, inter / union)


def iou_matrix(boxes_a: Sequence[OrientedBox], boxes_b: Sequence[OrientedBox]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = rotated_iou(a, b)
    return out


def nms(boxes: Sequence[OrientedBox], iou_threshold: float = 0.25,
        class_agnostic: bool = False) -> list[int]:
    """Greedy per-class NMS; returns kept indices in descending-score order.

    Equal scores keep the lower input index first.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-(boxes[i].score or 0.0), i))
    kept: list[int] = []
    for i in order:
        bi = boxes[i]
        suppressed = False
        for j in kept:
            if not class_agnostic and boxes[j].label != bi.label:
                continue
            if rotated_iou(bi, boxes[j]) >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# text format: one box per line, "x y z w h l yaw label [score]"
# ---------------------------------------------------------------------------

def format_box(b: OrientedBox) -> str:
    fields = [repr(float(v)) for v in b.as_array()]
    fields.append(str(-1 if b.label is None else int(b.label)))
    if b.score is not None:
        fields.append(repr(float(b.score)))
    return " ".join(fields)


def parse_box(line: str, path=None, lineno=None) -> OrientedBox:
    parts = line.split()
    if len(parts) not in (8, 9):
        raise ValidationError(f"expected 8 or 9 fields, got {len(parts)}", path=path,
                              field=f"line {lineno}")
    try:
        vals = [float(v) for v in parts[:7]]
        label = int(parts[7])
        score = float(parts[8]) if len(parts) == 9 else None
        return OrientedBox(*vals, label=label, score=score)
    except ValueError as exc:
        raise ValidationError(str(exc), path=path, field=f"line {lineno}") from exc


def write_boxes(path, boxes, classes: Optional[Sequence[str]] = None):
    lines = []
    if classes is not None:
        lines.append("# classes " + " ".join(classes))
    lines.extend(format_box(b) for b in boxes)
    text = "\n".join(lines) + ("\n" if lines else "")
    with open(path, "w") as fh:
        fh.write(text)


def read_boxes(path):
    """Returns ``(boxes, classes or None)``."""
    boxes, classes = [], None
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                tokens = s[1:].split()
                if tokens and tokens[0] == "classes":
                    classes = tokens[1:]
                continue
            boxes.append(parse_box(s, path=path, lineno=n))
    return boxes, classes
