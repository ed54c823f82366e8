"""Dense RGB-D fusion for 6D object pose estimation, on numpy."""
from .estimator import DenseFusion
from .geometry import CameraIntrinsics, PointCloud, Pose, compose, inverse

__version__ = "0.1.0"

__all__ = ["DenseFusion", "Pose", "CameraIntrinsics", "PointCloud", "compose", "inverse"]
