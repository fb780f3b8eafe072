"""roadfusion: lightweight RGB + LiDAR road segmentation.

Geometric preprocessing (altitude-difference imaging), a dual-stream fusion
network built on an in-package autodiff engine, the composite objective,
KITTI-style metrics, and a training/eval/benchmark CLI.
"""

from .tensor import Tensor, no_grad, seed_all
from .network import ModelConfig, RoadFusionNet, build_model

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "seed_all", "ModelConfig", "RoadFusionNet", "build_model", "__version__"]
