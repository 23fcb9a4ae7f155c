"""Seed-guided 2D Gaussian surfel splatting for indoor surface reconstruction.

CPU-only pipeline: differentiable surfel rasterization, seed-point
densification, monocular-prior and multi-view-consistency losses, TSDF mesh
extraction, and geometric evaluation.
"""

from .scene import (Camera, GaussianScene, SeedConfig, SfmPoint,
                    filter_points, voxelize_seeds)
from .rasterizer import RasterConfig, RenderOutput, render
from .gradients import ParamGrads, backward
from .losses import LossWeights, MvConfig
from .densify import DensifyConfig
from .trainer import Configs, TrainConfig, fit, load_checkpoint, train_step
from .meshing import TsdfConfig, TriangleMesh, reconstruct_mesh
from .evaluation import EvalConfig, compute_metrics, sample_mesh
from .synthetic import SyntheticRoomSpec, generate_synthetic_room
from .dataset import Dataset, FrameBundle, load_dataset

__version__ = "0.1.0"

__all__ = [
    "Camera", "GaussianScene", "SeedConfig", "SfmPoint", "filter_points",
    "voxelize_seeds", "RasterConfig", "RenderOutput", "render", "ParamGrads",
    "backward", "LossWeights", "MvConfig", "DensifyConfig", "Configs",
    "TrainConfig", "fit", "load_checkpoint", "train_step", "TsdfConfig",
    "TriangleMesh", "reconstruct_mesh", "EvalConfig", "compute_metrics",
    "sample_mesh", "SyntheticRoomSpec", "generate_synthetic_room", "Dataset",
    "FrameBundle", "load_dataset",
]
