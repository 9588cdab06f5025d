"""Spatiotemporal implicit neural representations of longitudinal volumes,
with weight-space classification of their aging trajectories."""

from .config import PipelineConfig, derive_seed, load_config
from .estimators import SpatiotemporalINR, StreamStacker, WeightSpaceClassifier
from .inr import InrArchitecture, InrParams, build_inr, inr_forward, parameter_count
from .metrics import accuracy, mse, psnr, ssim3d
from .phantom import Grid, Volume, generate_phantom, read_volume, write_volume
from .trajectory import DeviationParams, integrate_brain_age

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig", "derive_seed", "load_config",
    "SpatiotemporalINR", "StreamStacker", "WeightSpaceClassifier",
    "InrArchitecture", "InrParams", "build_inr", "inr_forward", "parameter_count",
    "accuracy", "mse", "psnr", "ssim3d",
    "Grid", "Volume", "generate_phantom", "read_volume", "write_volume",
    "DeviationParams", "integrate_brain_age",
]
