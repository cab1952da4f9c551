"""Shape-prior pseudo ground truth for instance disparity.

Fits a PCA-TSDF shape model to instance point clouds inside their 3D boxes,
renders the fitted surfaces to dense instance disparity, and evaluates
disparity and depth errors.
"""

from .disparity import (InstanceDisparityMap, RoiPair, StereoRig, backproject, full_to_instance,
                        instance_to_full, lift_instance_cloud, normalize_disparity,
                        smooth_l1_disparity_loss)
from .geometry import DepthMap, ObjectPose, TriangleMesh, marching_cubes, render_depth
from .metrics import eval_containment, eval_disparity
from .shape_fit import Box3, FitConfig, FitResult, optimize_shape
from .shape_model import ShapeBasis, TsdfVolume, VolumeMeta, decode, pca_fit, phi, phi_grad_z

__all__ = [
    "Box3", "DepthMap", "FitConfig", "FitResult", "InstanceDisparityMap", "ObjectPose",
    "RoiPair", "ShapeBasis", "StereoRig", "TriangleMesh", "TsdfVolume", "VolumeMeta",
    "backproject", "decode", "eval_containment", "eval_disparity", "full_to_instance",
    "instance_to_full", "lift_instance_cloud", "marching_cubes", "normalize_disparity",
    "optimize_shape", "pca_fit", "phi", "phi_grad_z", "render_depth", "smooth_l1_disparity_loss",
]
__version__ = "0.1.0"
