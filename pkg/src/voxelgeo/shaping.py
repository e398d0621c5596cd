"""Surface supervision and the surface-probability network that reweights
the feature volume."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import unproject
from .errors import KindError, ShapeError, StateError
from .layers import Linear, Module, Sequential, conv_block, log_sigmoid, sigmoid, up_block
from .volume import VoxelGridSpec


@dataclass(eq=False)
class SurfaceVolume:
    spec: VoxelGridSpec
    values: np.ndarray  # [nx, ny, nz]
    kind: str  # "predicted" or "label"

    def __post_init__(self):
        if self.kind not in ("predicted", "label"):
            raise KindError(f"unknown surface volume kind {self.kind!r}")
        if self.values.shape != self.spec.extents:
            raise ShapeError(f"surface values {self.values.shape} != grid {self.spec.extents}")

    def threshold(self, level=0.5) -> np.ndarray:
        return self.values > level


# ---------------------------------------------------------------------------
# ray traversal
# ---------------------------------------------------------------------------

def _slab_interval(origin, direction, lo, hi):
    t0, t1 = -math.inf, math.inf
    for a in range(3):
        if direction[a] == 0.0:
            if origin[a] < lo[a] or origin[a] > hi[a]:
                return None
            continue
        ta = (lo[a] - origin[a]) / direction[a]
        tb = (hi[a] - origin[a]) / direction[a]
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
    if t1 <= max(t0, 0.0):
        return None
    return max(t0, 0.0), t1


def traverse_grid(origin, direction, spec: VoxelGridSpec, t_max=math.inf):
    """Voxels pierced by the ray ``origin + t * direction`` in order.

    Integer-stepping DDA. Returns ``(voxels [N, 3] int, t_enter [N], t_exit [N])``
    where the ``t`` values are in the units of ``direction``.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    lo = np.asarray(spec.origin)
    hi = lo + spec.size_m
    span = _slab_interval(o, d, lo, hi)
    empty = (np.zeros((0, 3), dtype=np.int64), np.zeros(0), np.zeros(0))
    if span is None:
        return empty
    t, t_end = span
    t_end = min(t_end, t_max)
    if t >= t_end:
        return empty
    size = spec.voxel_size
    ext = spec.extents
    # start voxel from a point nudged inside the grid along the ray
    p = o + d * t
    idx = [min(max(int(math.floor((p[a] - lo[a]) / size)), 0), ext[a] - 1) for a in range(3)]
    step, t_next, t_delta = [0, 0, 0], [math.inf] * 3, [math.inf] * 3
    for a in range(3):
        if d[a] > 0:
            step[a] = 1
            t_next[a] = (lo[a] + (idx[a] + 1) * size - o[a]) / d[a]
            t_delta[a] = size / d[a]
        elif d[a] < 0:
            step[a] = -1
            t_next[a] = (lo[a] + idx[a] * size - o[a]) / d[a]
            t_delta[a] = -size / d[a]
    voxels, enters, exits = [], [], []
    while True:
        axis = min(range(3), key=lambda a: t_next[a])
        t_out = min(t_next[axis], t_end)
        voxels.append(tuple(idx))
        enters.append(t)
        exits.append(t_out)
        if t_next[axis] >= t_end:
            break
        t = t_next[axis]
        idx[axis] += step[axis]
        if not 0 <= idx[axis] < ext[axis]:
            break
        t_next[axis] += t_delta[axis]
    return (np.asarray(voxels, dtype=np.int64).reshape(-1, 3),
            np.asarray(enters), np.asarray(exits))


def ray_margin_voxels(origin, direction, hit_distance, spec, margin, sides="both"):
    """Voxels within ``margin`` traversal steps of the voxel holding the ray hit.

    ``hit_distance`` is measured along the unit ``direction``. ``sides`` is
    ``"both"``, ``"front"`` (camera side only) or ``"back"``. Returns an
    ``[N, 3]`` index array (empty when the hit lies outside the grid).
    """
    voxels, t_in, t_out = traverse_grid(origin, direction, spec)
    if len(voxels) == 0:
        return voxels
    inside = np.nonzero((t_in <= hit_distance) & (hit_distance < t_out))[0]
    if len(inside) == 0:
        return voxels[:0]
    i = int(inside[0])
    before = margin if sides in ("both", "front") else 0
    after = margin if sides in ("both", "back") else 0
    return voxels[max(0, i - before):i + after + 1]


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------

def _isotropic_dilate(mask, margin):
    from scipy.ndimage import binary_dilation

    if margin <= 0:
        return mask
    r = margin
    g = np.arange(-r, r + 1)
    ball = (g[:, None, None] ** 2 + g[None, :, None] ** 2 + g[None, None, :] ** 2) <= r * r
    return mask | binary_dilation(mask, structure=ball)


def surface_labels(points, views: Sequence, spec: VoxelGridSpec, margin: int = 4,
                   mode: str = "ray", sides: str = "both",
                   pixel_step: int = 1) -> SurfaceVolume:
    """Binary surface-voxel labels from a point cloud and depth-bearing views.

    A voxel is positive if it holds at least one point. In ``"ray"`` mode every
    depth-valid pixel ray additionally marks the ``margin`` voxels it traverses
    on each side of the voxel containing its depth hit. ``"isotropic"`` mode
    instead dilates the point voxels by a ball of radius ``margin``.
    """
    if mode not in ("ray", "isotropic"):
        raise ValueError(f"unknown margin mode {mode!r}")
    if sides not in ("both", "front", "back"):
        raise ValueError(f"unknown margin sides {sides!r}")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    labels = np.zeros(spec.extents, dtype=bool)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts):
        idx = spec.voxel_of(pts)
        ok = spec.contains_index(idx)
        idx = idx[ok]
        labels[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    if mode == "isotropic":
        labels = _isotropic_dilate(labels, margin)
        return SurfaceVolume(spec, labels.astype(np.float64), "label")
    for view in views:
        if view.depth is None:
            continue
        labels |= _ray_labels(view, spec, margin, sides, pixel_step)
    return SurfaceVolume(spec, labels.astype(np.float64), "label")


def _ray_labels(view, spec, margin, sides, pixel_step):
    out = np.zeros(spec.extents, dtype=bool)
    depth = view.depth
    center = view.pose.center
    rows, cols = np.nonzero(depth > 0)
    for r, c in zip(rows, cols):
        if r % pixel_step or c % pixel_step:
            continue
        u, v = c + 0.5, r + 0.5
        hit = unproject(u, v, depth[r, c], view)
        ray = hit - center
        dist = float(np.linalg.norm(ray))
        if dist == 0.0:
            continue
        vox = ray_margin_voxels(center, ray / dist, dist, spec, margin, sides)
        if len(vox):
            out[vox[:, 0], vox[:, 1], vox[:, 2]] = True
    return out


# ---------------------------------------------------------------------------
# focal loss
# ---------------------------------------------------------------------------

def focal_loss_with_logits(logits, targets, gamma=2.0, alpha=0.25, reduction="mean"):
    """Sigmoid focal loss and its gradient with respect to the logits.

    Positive entries cost ``-alpha (1-p)^gamma log p``, negatives
    ``-(1-alpha) p^gamma log(1-p)``. Returns ``(loss, grad)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    p = sigmoid(z)
    log_p = log_sigmoid(z)
    log_q = log_sigmoid(-z)
    q = 1.0 - p
    pos = y > 0.5
    pw = np.where(pos, q, p) ** gamma
    loss = np.where(pos, -alpha * pw * log_p, -(1.0 - alpha) * pw * log_q)
    grad_pos = alpha * pw * (gamma * p * log_p - q)
    grad_neg = (1.0 - alpha) * pw * (p - gamma * q * log_q)
    grad = np.where(pos, grad_pos, grad_neg)
    if reduction == "mean":
        n = max(loss.size, 1)
        return float(loss.sum() / n), grad / n
    if reduction == "sum":
        return float(loss.sum()), grad
    return loss, grad


def focal_loss(probs, targets, gamma=2.0, alpha=0.25, with_grad=False):
    """Mean focal loss on probabilities (clipped away from 0 and 1).

    With ``with_grad`` returns ``(loss, d loss / d probs)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    p = np.clip(probs, 1e-300, 1.0)
    q = np.clip(1.0 - probs, 1e-300, 1.0)
    pos = np.asarray(targets) > 0.5
    loss = np.where(pos, -alpha * q ** gamma * np.log(p),
                    -(1.0 - alpha) * p ** gamma * np.log(q))
    value = float(loss.mean()) if loss.size else 0.0
    if not with_grad:
        return value
    n = max(loss.size, 1)
    g_pos = alpha * (gamma * q ** (gamma - 1) * np.log(p) - q ** gamma / p)
    g_neg = (1.0 - alpha) * (p ** gamma / q - gamma * p ** (gamma - 1) * np.log(q))
    return value, np.where(pos, g_pos, g_neg) / n


def surface_loss(predicted: SurfaceVolume, labels: SurfaceVolume, gamma=2.0, alpha=0.25):
    """Mean focal loss of a prediction against labels; returns ``(loss, grad)``."""
    if labels.kind != "label":
        raise KindError("surface_loss expects a label volume as target")
    if predicted.kind != "predicted":
        raise KindError("surface_loss expects a predicted volume")
    if predicted.spec.extents != labels.spec.extents:
        raise ShapeError("prediction and label grids differ")
    return focal_loss(predicted.values, labels.values, gamma, alpha, with_grad=True)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class ShapingNetConfig:
    in_channels: int
    base_channels: int = 16
    stages: int = 2
    margin: int = 4
    residual: bool = True
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("need at least one encoder stage")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


class ShapingNet(Module):
    """Residual encoder-decoder producing a per-voxel surface probability.

    Each encoder is a stride-2 conv block followed by two stride-1 conv blocks
    whose output is added back (channels double per stage). Each decoder is a
    k2/s2 transposed-conv block and a conv block, plus a skip connection from
    the encoder output at the same resolution (the network input at full
    resolution). A per-voxel linear projection to one channel and a sigmoid
    finish the network.
    """

    def __init__(self, config: ShapingNetConfig, rng=None):
        rng = np.random.default_rng(rng)
        self.config = config
        c_in, b, eps = config.in_channels, config.base_channels, config.bn_eps
        widths = [c_in] + [b * 2 ** i for i in range(config.stages)]
        self.down = [conv_block(widths[i], widths[i + 1], stride=2, eps=eps, rng=rng)
                     for i in range(config.stages)]
        self.res = [Sequential(conv_block(w, w, eps=eps, rng=rng), conv_block(w, w, eps=eps, rng=rng))
                    for w in widths[1:]]
        self.up = [up_block(widths[i + 1], widths[i], eps=eps, rng=rng)
                   for i in reversed(range(config.stages))]
        self.dec = [conv_block(widths[i], widths[i], eps=eps, rng=rng)
                    for i in reversed(range(config.stages))]
        self.proj = Linear(c_in, 1, rng=rng)
        self._logits = None

    @property
    def factor(self):
        return 2 ** self.config.stages

    def forward_logits(self, x):
        if x.shape[0] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x.shape[0]}")
        if any(n % self.factor for n in x.shape[1:]):
            raise ShapeError(f"extents {x.shape[1:]} not divisible by {self.factor}")
        skips = [x]
        h = x
        for down, res in zip(self.down, self.res):
            h = down.forward(h)
            if self.config.residual:
                h = h + res.forward(h)
            else:
                h = res.forward(h)
            skips.append(h)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            h = dec.forward(up.forward(h))
            skip = skips.pop()
            if self.config.residual:
                h = h + skip
        self._logits = self.proj.forward(h)[0]
        return self._logits

    def forward(self, x):
        return sigmoid(self.forward_logits(x))

    def backward_logits(self, grad_logits):
        """Backpropagate a gradient on the logits; returns the input gradient."""
        if self._logits is None:
            raise StateError("ShapingNet.backward called before forward")
        residual = self.config.residual
        stages = self.config.stages
        g = self.proj.backward(grad_logits[None])
        skip_grad = [None] * stages  # indexed by resolution level, 0 = input
        for j in reversed(range(stages)):
            skip_grad[stages - 1 - j] = g
            g = self.up[j].backward(self.dec[j].backward(g))
        for i in reversed(range(stages)):
            r = self.res[i].backward(g)
            g = self.down[i].backward(g + r if residual else r)
            if residual:
                g = g + skip_grad[i]
        return g

    def backward(self, grad_probs):
        s = sigmoid(self._logits)
        return self.backward_logits(grad_probs * s * (1.0 - s))

    def predict_surface(self, x, spec) -> SurfaceVolume:
        return SurfaceVolume(spec, self.forward(x), "predicted")


def apply_shaping(mean: np.ndarray, surface) -> np.ndarray:
    """Weight every channel of the feature volume by the surface probability."""
    s = surface.values if isinstance(surface, SurfaceVolume) else np.asarray(surface)
    if s.shape != mean.shape[1:]:
        raise ShapeError(f"surface grid {s.shape} != feature grid {mean.shape[1:]}")
    return mean * s[None]


def apply_shaping_backward(grad_out, mean):
    """Gradient of the weighted volume with respect to the surface values."""
    return np.sum(grad_out * mean, axis=0)
