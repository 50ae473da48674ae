"""Surface reconstruction with flattened 3D Gaussians (surfels), CPU reference implementation."""

from .surfel import SurfelSet, activate, build_geometry, evaluate_kernel, random_init
from .projection import CameraView, project_surfels
from .rasterizer import RenderConfig, render, render_backward
from .trainer import TrainConfig, train
from .surface import OccupancyGrid, OrientedPointCloud, accumulate_grid, chamfer_distance, cut_points, fuse_views

__all__ = [
    "CameraView",
    "OccupancyGrid",
    "OrientedPointCloud",
    "RenderConfig",
    "SurfelSet",
    "TrainConfig",
    "accumulate_grid",
    "activate",
    "build_geometry",
    "chamfer_distance",
    "cut_points",
    "evaluate_kernel",
    "fuse_views",
    "project_surfels",
    "random_init",
    "render",
    "render_backward",
    "train",
]
