"""voxelgeo: multi-view voxel feature volumes, geometry shaping and 3D detection."""
from .boxes import OrientedBox, iou_matrix, nms, rotated_iou
from .camera import CameraIntrinsics, CameraPose, CameraView, project, project_points
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (ConfigError, MalformedMatrixError, MissingFileError, NonRigidPoseError,
                     NumericError, ShapeError, SizeMismatchError, ValidationError,
                     VoxelGeoError)
from .estimator import FeatureVolumeTransformer, GeometryAwareDetector
from .evaluation import average_precision, map_at, match_detections
from .model import GeometryAwareNet, NetConfig
from .scene import SceneBundle
from .sceneio import load_scene, save_scene
from .shaping import ShapingNet, surface_labels
from .synthetic import generate_synthetic_scene
from .tensor import Tensor
from .train import TrainConfig, train_toy
from .volume import FeatureVolume, VoxelGridSpec, build_volume

__version__ = "0.1.0"
