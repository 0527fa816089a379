"""Skeleton-prior guided point cloud registration."""
from .cloud import PointCloud, SpatialIndex, apply_transform, icp_refine, knn, voxel_downsample
from .config import ModelConfig, forest_config, toy_config
from .params import AdamState, ParameterStore, adam_step
from .pipeline import RegistrationResult, TrainSample, register, train, train_epoch
from .transform import RigidTransform

__all__ = [
    "AdamState", "ModelConfig", "ParameterStore", "PointCloud", "RegistrationResult", "RigidTransform",
    "SpatialIndex", "TrainSample", "adam_step", "apply_transform", "forest_config", "icp_refine", "knn",
    "register", "toy_config", "train", "train_epoch", "voxel_downsample",
]
__version__ = "0.1.0"
