"""End-to-end desk-scale training of shaping and detection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .model import GeometryAwareNet, NetConfig, StepLosses
from .optim import Adam, StepSchedule, clip_gradients
from .shaping import surface_labels
from .tensor import check_finite
from .volume import build_volume

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 1000
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float = 35.0
    epochs: int = 12
    milestones: tuple = (9, 12)
    lr_decay: float = 0.1
    log_every: int = 0


@dataclass
class PreparedScene:
    scene: object
    volume: object
    labels: object
    specs: list
    assignment: object


@dataclass
class TrainResult:
    net: GeometryAwareNet
    trace: list = field(default_factory=list)  # StepLosses per step
    grad_norms: list = field(default_factory=list)
    prepared: list = field(default_factory=list)

    @property
    def total_trace(self):
        return [s.total for s in self.trace]

    @property
    def detection_trace(self):
        return [s.detection for s in self.trace]


def default_net_config(scene, **overrides) -> NetConfig:
    kw = dict(feature_channels=scene.feature_channels,
              num_classes=max(len(scene.classes), 1))
    kw.update(overrides)
    return NetConfig(**kw)


def prepare_scene(scene, net: GeometryAwareNet) -> PreparedScene:
    cfg = net.config
    net.check_grid(scene.spec.extents)
    volume = build_volume(scene.views, scene.spec)
    labels = None
    if cfg.use_shaping and cfg.surface_weight:
        if scene.points is None or not scene.has_depth:
            raise ConfigError("surface supervision needs depth maps and a point cloud; "
                              "disable it with surface_weight=0")
        labels = surface_labels(scene.points, scene.views, scene.spec, cfg.margin)
    specs, assignment = net.assign(scene.spec, scene.boxes)
    return PreparedScene(scene, volume, labels, specs, assignment)


def epoch_of_step(step: int, steps: int, epochs: int) -> int:
    """1-based epoch containing zero-based ``step`` when ``steps`` span ``epochs``."""
    return 1 + (step * epochs) // max(steps, 1)


def train_toy(scenes: Sequence, net_config: Optional[NetConfig] = None,
              config: Optional[TrainConfig] = None, net: Optional[GeometryAwareNet] = None,
              callback=None) -> TrainResult:
    """Jointly optimize the shaping net and detector on ``scenes`` (one per step)."""
    config = config or TrainConfig()
    if not scenes:
        raise ConfigError("train_toy needs at least one scene")
    if net is None:
        net = GeometryAwareNet(net_config or default_net_config(scenes[0]), seed=config.seed)
    prepared = [prepare_scene(s, net) for s in scenes]
    params = net.parameters()
    opt = Adam(params, lr=config.lr, betas=config.betas, eps=config.adam_eps,
               weight_decay=config.weight_decay)
    schedule = StepSchedule(config.milestones, config.lr_decay, config.epochs)
    result = TrainResult(net, prepared=prepared)
    for step in range(config.steps):
        p = prepared[step % len(prepared)]
        losses: StepLosses = net.compute_loss(p.volume, p.specs, p.assignment,
                                              p.scene.boxes, p.labels)
        grads = [t.grad for t in params]
        for g in grads:
            check_finite(g, "gradient")
        grads, norm = clip_gradients(grads, config.clip_norm)
        opt.lr = schedule.lr_at(config.lr, epoch_of_step(step, config.steps, config.epochs))
        opt.step(grads)
        result.trace.append(losses)
        result.grad_norms.append(norm)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d total %.5f cls %.5f ctr %.5f box %.5f surf %.5f",
                     step, losses.total, losses.cls, losses.centerness, losses.box,
                     losses.surface)
        if callback is not None:
            callback(step, losses, net)
    return result
