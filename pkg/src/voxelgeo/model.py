"""The full network: surface shaping -> multiscale tower -> detection head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .head import (DetectionHead, HeadOutput, MultiscaleTower, assign_targets,
                   decode_detections, detection_losses, pyramid_specs)
from .layers import Module, sigmoid
from .shaping import (ShapingNet, ShapingNetConfig, SurfaceVolume, apply_shaping,
                      apply_shaping_backward, focal_loss_with_logits)
from .volume import FeatureVolume, concat_mean_var


@dataclass
class NetConfig:
    feature_channels: int
    num_classes: int
    shaping_base: int = 8
    shaping_stages: int = 2
    tower_width: int = 8
    num_scales: int = 3
    bn_eps: float = 1e-5
    use_shaping: bool = True
    surface_weight: float = 10.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    min_points: int = 27
    top_k: int = 18
    strict_points: bool = True
    margin: int = 4
    score_threshold: float = 0.05
    nms_threshold: float = 0.25

    def __post_init__(self):
        if self.feature_channels < 1 or self.num_classes < 1:
            raise ConfigError("feature_channels and num_classes must be >= 1")
        if self.num_scales < 1:
            raise ConfigError("num_scales must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in names:
                raise ConfigError(f"unknown config key {k!r}")
            kwargs[k] = v
        return cls(**kwargs)

    @property
    def grid_factor(self) -> int:
        f = 2 ** (self.num_scales - 1)
        if self.use_shaping:
            f = max(f, 2 ** self.shaping_stages)
        return f


@dataclass
class StepLosses:
    cls: float
    centerness: float
    box: float
    surface: float
    surface_weight: float

    @property
    def detection(self) -> float:
        return self.cls + self.centerness + self.box

    @property
    def total(self) -> float:
        return self.detection + self.surface_weight * self.surface


class GeometryAwareNet(Module):
    def __init__(self, config: NetConfig, seed=0):
        rng = np.random.default_rng(seed)
        self.config = config
        c = config.feature_channels
        if config.use_shaping:
            self.shaping = ShapingNet(ShapingNetConfig(2 * c, config.shaping_base,
                                                       config.shaping_stages, config.margin,
                                                       bn_eps=config.bn_eps), rng=rng)
        else:
            self.shaping = None
        self.tower = MultiscaleTower(c, config.tower_width, config.num_scales,
                                     eps=config.bn_eps, rng=rng)
        self.head = DetectionHead(config.tower_width, config.num_classes, config.num_scales,
                                  rng=rng)
        self._state = None

    def check_grid(self, extents):
        f = self.config.grid_factor
        if any(n % f for n in extents):
            raise ShapeError(f"grid extents {tuple(extents)} incompatible with network "
                             f"strides (need multiples of {f})")

    def forward(self, volume: FeatureVolume):
        """Returns ``(surface probabilities or None, HeadOutput)``."""
        self.check_grid(volume.spec.extents)
        mean = volume.mean
        if self.shaping is not None:
            logits = self.shaping.forward_logits(concat_mean_var(volume))
            surface = sigmoid(logits)
            shaped = apply_shaping(mean, surface)
        else:
            logits = surface = None
            shaped = mean
        feats = self.tower.forward(shaped)
        out = self.head.forward(feats)
        self._state = (mean, logits, surface)
        return surface, out

    def backward(self, head_grads: HeadOutput, surface_logit_grad=None):
        if self._state is None:
            raise StateError("backward called before forward")
        mean, logits, surface = self._state
        g_feats = self.head.backward(head_grads)
        g_shaped = self.tower.backward(g_feats)
        if self.shaping is not None:
            g_s = apply_shaping_backward(g_shaped, mean)
            g_logits = g_s * surface * (1.0 - surface)
            if surface_logit_grad is not None:
                g_logits = g_logits + surface_logit_grad
            self.shaping.backward_logits(g_logits)

    def compute_loss(self, volume, specs, assignment, gt_boxes, labels=None,
                     with_grads=True) -> StepLosses:
        """Forward, losses and (optionally) backward into the parameter grads."""
        cfg = self.config
        surface, out = self.forward(volume)
        det = detection_losses(out, assignment, gt_boxes, specs, cfg.focal_gamma,
                               cfg.focal_alpha, with_grads=with_grads)
        s_loss, s_grad = 0.0, None
        weight = cfg.surface_weight if (self.shaping is not None and labels is not None) else 0.0
        if weight:
            _, logits, _ = self._state
            s_loss, s_grad = focal_loss_with_logits(logits, labels.values, cfg.focal_gamma,
                                                    cfg.focal_alpha)
            s_grad = weight * s_grad
        if with_grads:
            self.zero_grad()
            self.backward(det.grads, s_grad)
        return StepLosses(det.cls, det.centerness, det.box, s_loss, weight)

    def predict_surface(self, volume) -> SurfaceVolume:
        if self.shaping is None:
            return SurfaceVolume(volume.spec, np.ones(volume.spec.extents), "predicted")
        s = self.shaping.forward(concat_mean_var(volume))
        return SurfaceVolume(volume.spec, s, "predicted")

    def detect(self, volume, score_threshold=None, iou_threshold=None):
        cfg = self.config
        _, out = self.forward(volume)
        specs = pyramid_specs(volume.spec, cfg.num_scales)
        return decode_detections(out, specs,
                                 cfg.score_threshold if score_threshold is None else score_threshold,
                                 iou_threshold=cfg.nms_threshold if iou_threshold is None else iou_threshold)

    def assign(self, volume_spec, gt_boxes):
        cfg = self.config
        specs = pyramid_specs(volume_spec, cfg.num_scales)
        return specs, assign_targets(gt_boxes, specs, cfg.min_points, cfg.top_k,
                                     strict=cfg.strict_points)
