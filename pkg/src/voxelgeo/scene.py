"""In-memory scene bundle shared by the generator, loaders and pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .boxes import OrientedBox
from .camera import CameraView
from .volume import VoxelGridSpec


@dataclass(eq=False)
class SceneBundle:
    spec: VoxelGridSpec
    views: list  # list[CameraView]
    boxes: list = field(default_factory=list)  # list[OrientedBox]
    classes: list = field(default_factory=list)
    points: Optional[np.ndarray] = None  # [N, 3] world xyz
    colors: Optional[np.ndarray] = None  # [N, 3] optional
    origin_policy: str = "explicit"

    @property
    def has_depth(self) -> bool:
        return all(v.depth is not None for v in self.views)

    @property
    def feature_channels(self) -> int:
        return self.views[0].features.shape[0]
