"""Multiscale tower, anchor-free volumetric head, positive-sample assignment
and the detection losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .boxes import OrientedBox, contains, nms, rotated_iou
from .errors import ShapeError
from .layers import Conv3d, Module, Sequential, conv_block, log_sigmoid, sigmoid
from .shaping import focal_loss_with_logits
from .volume import VoxelGridSpec

UNASSIGNED = -1
REG_CHANNELS = 8  # dx, dy, dz, log w, log h, log l, sin yaw, cos yaw
MAX_LOG_SIZE = 20.0


# ---------------------------------------------------------------------------
# tower and head
# ---------------------------------------------------------------------------

def pyramid_specs(spec: VoxelGridSpec, num_scales: int) -> list[VoxelGridSpec]:
    factor = 2 ** (num_scales - 1)
    if any(n % factor for n in spec.extents):
        raise ShapeError(f"grid extents {spec.extents} not divisible by {factor}")
    return [spec.downsample(2 ** i) if i else spec for i in range(num_scales)]


class MultiscaleTower(Module):
    """Scale 0: two conv blocks at full resolution. Scale i+1: a stride-2 conv
    block on scale i followed by one conv block."""

    def __init__(self, in_channels, width, num_scales=3, eps=1e-5, rng=None):
        rng = np.random.default_rng(rng)
        self.num_scales = num_scales
        self.stages = [Sequential(conv_block(in_channels, width, eps=eps, rng=rng),
                                  conv_block(width, width, eps=eps, rng=rng))]
        for _ in range(1, num_scales):
            self.stages.append(Sequential(conv_block(width, width, stride=2, eps=eps, rng=rng),
                                          conv_block(width, width, eps=eps, rng=rng)))

    def forward(self, x):
        factor = 2 ** (self.num_scales - 1)
        if any(n % factor for n in x.shape[1:]):
            raise ShapeError(f"extents {x.shape[1:]} not divisible by {factor}")
        outs = []
        for stage in self.stages:
            x = stage.forward(x)
            outs.append(x)
        return outs

    def backward(self, grads):
        g = grads[-1]
        for i in reversed(range(self.num_scales)):
            g = self.stages[i].backward(g)
            if i:
                g = g + grads[i - 1]
        return g


@dataclass
class HeadOutput:
    cls: list  # per scale [K, nx, ny, nz]
    ctr: list  # per scale [nx, ny, nz]
    reg: list  # per scale [8, nx, ny, nz]

    @property
    def num_scales(self):
        return len(self.cls)


class DetectionHead(Module):
    """One k3 conv per scale producing ``K`` class logits, a centerness logit
    and the eight regression channels."""

    def __init__(self, width, num_classes, num_scales=3, prior_prob=0.01, rng=None):
        rng = np.random.default_rng(rng)
        self.num_classes = num_classes
        out = num_classes + 1 + REG_CHANNELS
        self.convs = [Conv3d(width, out, 3, rng=rng) for _ in range(num_scales)]
        for conv in self.convs:
            conv.weight.data *= 0.1
            conv.bias.data[:num_classes] = -math.log((1 - prior_prob) / prior_prob)
            # identity yaw code: sin 0, cos 1
            conv.bias.data[num_classes + 1 + 7] = 1.0

    def forward(self, feats) -> HeadOutput:
        k = self.num_classes
        cls, ctr, reg = [], [], []
        for conv, f in zip(self.convs, feats):
            o = conv.forward(f)
            cls.append(o[:k])
            ctr.append(o[k])
            reg.append(o[k + 1:])
        return HeadOutput(cls, ctr, reg)

    def backward(self, grads: HeadOutput):
        out = []
        for i, conv in enumerate(self.convs):
            g = np.concatenate([grads.cls[i], grads.ctr[i][None], grads.reg[i]], axis=0)
            out.append(conv.backward(g))
        return out


# ---------------------------------------------------------------------------
# box coding
# ---------------------------------------------------------------------------

def encode_box(box: OrientedBox, location) -> np.ndarray:
    loc = np.asarray(location, dtype=float)
    return np.array([box.x - loc[0], box.y - loc[1], box.z - loc[2],
                     math.log(box.w), math.log(box.h), math.log(box.l),
                     math.sin(box.yaw), math.cos(box.yaw)])


def decode_box(code, location, label=None, score=None) -> OrientedBox:
    c = [float(v) for v in code]
    loc = [float(v) for v in location]
    w, h, l = (math.exp(min(max(v, -MAX_LOG_SIZE), MAX_LOG_SIZE)) for v in c[3:6])
    return OrientedBox(loc[0] + c[0], loc[1] + c[1], loc[2] + c[2], w, h, l,
                       math.atan2(c[6], c[7]), label=label, score=score)


def centerness_target(box: OrientedBox, points) -> np.ndarray:
    """Cube root of the per-axis ``min(d-, d+) / max(d-, d+)`` product."""
    local = box.to_local(points)
    half = 0.5 * box.size
    lo = np.clip(local + half, 0.0, None)
    hi = np.clip(half - local, 0.0, None)
    ratio = np.minimum(lo, hi) / np.maximum(np.maximum(lo, hi), 1e-12)
    return np.cbrt(np.prod(ratio, axis=-1))


def decode_detections(out: HeadOutput, specs: Sequence[VoxelGridSpec], score_threshold=0.05,
                      pre_nms=200, iou_threshold=0.25, max_detections=50) -> list[OrientedBox]:
    """Score every location as sigmoid(class) * sigmoid(centerness), keep the
    best class per location, then run per-class NMS."""
    cands = []
    for i, spec in enumerate(specs):
        cls_p = sigmoid(out.cls[i])
        ctr_p = sigmoid(out.ctr[i])
        scores = cls_p * ctr_p[None]
        best = scores.argmax(axis=0)
        best_score = np.take_along_axis(scores, best[None], axis=0)[0]
        idx = np.argwhere(best_score >= score_threshold)
        for ix, iy, iz in idx:
            cands.append((float(best_score[ix, iy, iz]), i, (int(ix), int(iy), int(iz)),
                          int(best[ix, iy, iz])))
    # deterministic: score desc, then scale, then voxel index
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    cands = cands[:pre_nms]
    boxes = []
    for score, i, vox, label in cands:
        loc = specs[i].center_of(vox)
        code = out.reg[i][(slice(None),) + vox]
        boxes.append(decode_box(code, loc, label=label, score=min(max(score, 0.0), 1.0)))
    keep = nms(boxes, iou_threshold)
    return [boxes[j] for j in keep[:max_detections]]


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

@dataclass
class AssignmentResult:
    target: list  # per scale int array [nx, ny, nz]; UNASSIGNED or box index
    centerness: list  # per scale float array [nx, ny, nz]
    chosen_scale: list = field(default_factory=list)  # per box

    def positives(self):
        """``(scale, ix, iy, iz, box)`` tuples in scale-then-index order."""
        out = []
        for s, t in enumerate(self.target):
            for ix, iy, iz in np.argwhere(t != UNASSIGNED):
                out.append((s, int(ix), int(iy), int(iz), int(t[ix, iy, iz])))
        return out

    @property
    def num_positives(self):
        return int(sum(np.count_nonzero(t != UNASSIGNED) for t in self.target))

    def index_sets(self) -> dict:
        """Box index -> set of ``(scale, ix, iy, iz)`` it was assigned."""
        sets: dict = {}
        for s, ix, iy, iz, b in self.positives():
            sets.setdefault(b, set()).add((s, ix, iy, iz))
        return sets


def assign_targets(gt_boxes: Sequence[OrientedBox], specs: Sequence[VoxelGridSpec],
                   min_points: int = 27, top_k: int = 18, strict: bool = True) -> AssignmentResult:
    """Select positive locations with the four rules.

    1. drop locations outside every box;
    2. per box keep only the coarsest scale whose count of interior voxel
       centers exceeds ``min_points`` (``>=`` when ``strict`` is False),
       falling back to the finest scale when none does;
    3. per box keep the ``top_k`` interior locations nearest its center
       (ties: lexicographic voxel index);
    4. a location claimed by several boxes goes to the smallest volume
       (ties: lower box index).
    """
    if min_points < 1 or top_k < 1:
        raise ValueError("min_points and top_k must be >= 1")
    centers = [s.centers() for s in specs]
    targets = [np.full(s.extents, UNASSIGNED, dtype=np.int64) for s in specs]
    ctr = [np.zeros(s.extents) for s in specs]
    claims: dict = {}
    chosen = []
    for b, box in enumerate(gt_boxes):
        inside = [contains(box, c) for c in centers]
        counts = [int(m.sum()) for m in inside]
        ok = [(n > min_points) if strict else (n >= min_points) for n in counts]
        scale = max((s for s in range(len(specs)) if ok[s]), default=0)
        chosen.append(scale)
        idx = np.argwhere(inside[scale])
        if len(idx) == 0:
            continue
        pts = centers[scale][idx[:, 0], idx[:, 1], idx[:, 2]]
        dist = np.linalg.norm(pts - box.center, axis=1)
        order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], dist))
        for row in order[:top_k]:
            key = (scale,) + tuple(int(v) for v in idx[row])
            claims.setdefault(key, []).append(b)
    for key, owners in claims.items():
        b = min(owners, key=lambda j: (gt_boxes[j].volume, j))
        s, ix, iy, iz = key
        targets[s][ix, iy, iz] = b
        ctr[s][ix, iy, iz] = centerness_target(gt_boxes[b], centers[s][ix, iy, iz])
    return AssignmentResult(targets, ctr, chosen)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class DetectionLosses:
    cls: float
    centerness: float
    box: float
    grads: Optional[HeadOutput] = None

    @property
    def total(self):
        return self.cls + self.centerness + self.box


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy and its logit gradient."""
    z = np.asarray(logits, dtype=float)
    t = np.asarray(targets, dtype=float)
    loss = -(t * log_sigmoid(z) + (1.0 - t) * log_sigmoid(-z))
    return loss, sigmoid(z) - t


def box_iou_loss(code, location, gt: OrientedBox) -> float:
    return 1.0 - rotated_iou(decode_box(code, location), gt)


def box_iou_loss_grad(code, location, gt: OrientedBox, step=1e-6):
    """Central-difference gradient of ``1 - IoU`` over the eight code channels."""
    code = np.asarray(code, dtype=float)
    grad = np.zeros_like(code)
    probe = code.copy()
    for j in range(code.size):
        probe[j] = code[j] + step
        up = box_iou_loss(probe, location, gt)
        probe[j] = code[j] - step
        down = box_iou_loss(probe, location, gt)
        probe[j] = code[j]
        grad[j] = (up - down) / (2 * step)
    return grad


def detection_losses(out: HeadOutput, assignment: AssignmentResult,
                     gt_boxes: Sequence[OrientedBox], specs: Sequence[VoxelGridSpec],
                     gamma=2.0, alpha=0.25, with_grads=True) -> DetectionLosses:
    """Classification focal loss, centerness BCE and ``1 - rotated IoU``.

    The focal loss is summed over every location and class and divided by the
    number of positives (by the number of entries when there are none), so a
    scene without boxes reports the per-entry mean. Centerness and box terms
    are means over positives.
    """
    positives = assignment.positives()
    norm = len(positives) or sum(c.size for c in out.cls)
    cls_loss = 0.0
    g_cls = []
    for s in range(out.num_scales):
        tgt = np.zeros_like(out.cls[s])
        t = assignment.target[s]
        pos = np.argwhere(t != UNASSIGNED)
        for ix, iy, iz in pos:
            lab = gt_boxes[t[ix, iy, iz]].label
            tgt[0 if lab is None else lab, ix, iy, iz] = 1.0
        loss, g = focal_loss_with_logits(out.cls[s], tgt, gamma, alpha, reduction="sum")
        cls_loss += loss / norm
        g_cls.append(g / norm)
    g_ctr = [np.zeros_like(c) for c in out.ctr]
    g_reg = [np.zeros_like(r) for r in out.reg]
    ctr_loss = box_loss = 0.0
    n = len(positives)
    for s, ix, iy, iz, b in positives:
        z = out.ctr[s][ix, iy, iz]
        loss, g = bce_with_logits(z, assignment.centerness[s][ix, iy, iz])
        ctr_loss += float(loss) / n
        g_ctr[s][ix, iy, iz] = float(g) / n
        loc = specs[s].center_of((ix, iy, iz))
        code = out.reg[s][:, ix, iy, iz]
        box_loss += box_iou_loss(code, loc, gt_boxes[b]) / n
        if with_grads:
            g_reg[s][:, ix, iy, iz] = box_iou_loss_grad(code, loc, gt_boxes[b]) / n
    grads = HeadOutput(g_cls, g_ctr, g_reg) if with_grads else None
    return DetectionLosses(cls_loss, ctr_loss, box_loss, grads)
