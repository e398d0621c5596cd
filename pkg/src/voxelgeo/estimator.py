"""scikit-learn style wrappers around volume building and the detector.

``X`` is always a scene or a sequence of :class:`SceneBundle`; ``y`` is unused
because the boxes (and depth/points for surface labels) live in the scenes.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, ValidationError
from .evaluation import evaluate_scenes
from .model import GeometryAwareNet, NetConfig
from .scene import SceneBundle
from .train import TrainConfig, default_net_config, train_toy
from .volume import build_volume, concat_mean_var


def check_scenes(X) -> list[SceneBundle]:
    """Normalize ``X`` to a non-empty list of scenes with one channel count."""
    scenes = [X] if isinstance(X, SceneBundle) else list(X)
    if not scenes:
        raise ValidationError("expected at least one scene")
    for i, s in enumerate(scenes):
        if not isinstance(s, SceneBundle):
            raise ValidationError(f"item {i} is {type(s).__name__}, not SceneBundle")
        if not s.views:
            raise ValidationError(f"scene {i} has no views")
    channels = {s.feature_channels for s in scenes}
    if len(channels) != 1:
        raise ValidationError(f"scenes mix feature channel counts {sorted(channels)}")
    return scenes


def check_range(name, value, low, high, inclusive=True):
    ok = low <= value <= high if inclusive else low < value < high
    if not ok:
        raise ValidationError(f"{name}={value} outside [{low}, {high}]", field=name)
    return value


class FeatureVolumeTransformer(TransformerMixin, BaseEstimator):
    """Scenes -> fused feature volumes.

    ``output="volume"`` returns :class:`FeatureVolume` objects, ``"array"``
    stacks ``[mean, variance]`` channels into ``[n, 2C, nx, ny, nz]`` (all
    scenes must then share a grid).
    """

    def __init__(self, output="volume"):
        self.output = output

    def fit(self, X, y=None):
        if self.output not in ("volume", "array"):
            raise ConfigError(f"output must be 'volume' or 'array', got {self.output!r}")
        scenes = check_scenes(X)
        self.n_channels_ = scenes[0].feature_channels
        return self

    def transform(self, X):
        check_is_fitted(self, "n_channels_")
        scenes = check_scenes(X)
        if scenes[0].feature_channels != self.n_channels_:
            raise ValidationError(f"fitted on {self.n_channels_} channels, got "
                                  f"{scenes[0].feature_channels}")
        vols = [build_volume(s.views, s.spec) for s in scenes]
        if self.output == "volume":
            return vols
        if len({v.spec.extents for v in vols}) != 1:
            raise ValidationError("array output needs one grid extent for all scenes")
        return np.stack([concat_mean_var(v) for v in vols])


class GeometryAwareDetector(BaseEstimator):
    """Surface shaping plus anchor-free 3D detection, trained by ``fit``."""

    def __init__(self, steps=1000, lr=3e-3, clip_norm=35.0, weight_decay=1e-4,
                 surface_weight=10.0, use_shaping=True, shaping_base=8, tower_width=8,
                 num_scales=3, margin=4, score_threshold=0.05, nms_threshold=0.25,
                 seed=0):
        self.steps = steps
        self.lr = lr
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.surface_weight = surface_weight
        self.use_shaping = use_shaping
        self.shaping_base = shaping_base
        self.tower_width = tower_width
        self.num_scales = num_scales
        self.margin = margin
        self.score_threshold = score_threshold
        self.nms_threshold = nms_threshold
        self.seed = seed

    def _net_config(self, scene) -> NetConfig:
        return default_net_config(
            scene, use_shaping=bool(self.use_shaping), surface_weight=float(self.surface_weight),
            shaping_base=int(self.shaping_base), tower_width=int(self.tower_width),
            num_scales=int(self.num_scales), margin=int(self.margin),
            score_threshold=float(self.score_threshold),
            nms_threshold=float(self.nms_threshold))

    def fit(self, X, y=None):
        scenes = check_scenes(X)
        if int(self.steps) < 0:
            raise ValidationError("steps must be >= 0", field="steps")
        check_range("lr", self.lr, 0.0, np.inf)
        check_range("score_threshold", self.score_threshold, 0.0, 1.0)
        check_range("nms_threshold", self.nms_threshold, 0.0, 1.0)
        result = train_toy(scenes, self._net_config(scenes[0]),
                           TrainConfig(seed=int(self.seed), steps=int(self.steps),
                                       lr=float(self.lr), clip_norm=float(self.clip_norm),
                                       weight_decay=float(self.weight_decay)))
        self.net_ = result.net
        self.loss_trace_ = result.trace
        self.classes_ = list(scenes[0].classes)
        return self

    @classmethod
    def from_net(cls, net: GeometryAwareNet, classes: Sequence[str] = ()):
        """Wrap an already trained network (e.g. from a checkpoint)."""
        c = net.config
        est = cls(use_shaping=c.use_shaping, surface_weight=c.surface_weight,
                  shaping_base=c.shaping_base, tower_width=c.tower_width,
                  num_scales=c.num_scales, margin=c.margin,
                  score_threshold=c.score_threshold, nms_threshold=c.nms_threshold)
        est.net_ = net
        est.loss_trace_ = []
        est.classes_ = list(classes)
        return est

    def predict(self, X):
        """Detections per scene (a list of box lists)."""
        check_is_fitted(self, "net_")
        scenes = check_scenes(X)
        return [self.net_.detect(build_volume(s.views, s.spec)) for s in scenes]

    def predict_surface(self, X):
        check_is_fitted(self, "net_")
        return [self.net_.predict_surface(build_volume(s.views, s.spec))
                for s in check_scenes(X)]

    def score(self, X, y=None, iou_threshold=0.25):
        """mAP at ``iou_threshold`` pooled over the scenes' ground truth."""
        scenes = check_scenes(X)
        aps = evaluate_scenes(self.predict(scenes), [s.boxes for s in scenes], iou_threshold)
        return float(np.mean(list(aps.values()))) if aps else 0.0
