"""Body shape and posture estimation from dressed, noisy 3-D scan sequences.

The fit runs in four stages: landmark tracking, skeletal posture fitting,
per-frame non-rigid shape fitting, and restriction of the fitted shapes to a
posture-invariant statistical shape space.
"""

from .mesh import TriangleMesh, MeshError
from .optimize import MinimizeOptions, minimize, check_gradient
from .shape_space import ShapeFeature, ShapeSpace, shape_feature, train_shape_space, reconstruct_mesh
from .skeleton import PostureParams, RiggedTemplate, Skeleton
from .landmarks import LandmarkModel, LandmarkTopology, train_landmark_model, track_landmarks
from .nonrigid import DeformField, fit_shape
from .pipeline import PipelineConfig, TrainedModels, FitReport, train_models, fit_sequence

__version__ = "0.1.0"

__all__ = [
    "TriangleMesh", "MeshError", "MinimizeOptions", "minimize", "check_gradient",
    "ShapeFeature", "ShapeSpace", "shape_feature", "train_shape_space", "reconstruct_mesh",
    "PostureParams", "RiggedTemplate", "Skeleton", "LandmarkModel", "LandmarkTopology",
    "train_landmark_model", "track_landmarks", "DeformField", "fit_shape",
    "PipelineConfig", "TrainedModels", "FitReport", "train_models", "fit_sequence",
]
