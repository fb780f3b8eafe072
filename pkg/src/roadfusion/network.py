"""Full network assembly with ablation switches matching the studied ladder:
RGB-only baseline, + LiDAR (additive fusion), + attention fusion, + bridge.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .decoder import Decoder, LargeKernelBridge, SegmentationOutput
from .encoders import PYRAMID_CHANNELS, FeaturePyramid, LidarEncoder, MobileNetV3Encoder
from .fusion import DEFAULT_TOKEN_CAP, MultiScaleFusion
from .nn import Module, count_parameters
from .tensor import Tensor

__all__ = ["ModelConfig", "RoadFusionNet", "build_model"]


@dataclass
class ModelConfig:
    use_lidar: bool = True
    use_fusion: bool = True      # attention fusion; False falls back to addition
    use_bridge: bool = True
    token_cap: Optional[int] = DEFAULT_TOKEN_CAP

    def validate(self) -> None:
        if self.use_fusion and not self.use_lidar:
            raise ValueError("attention fusion requires the LiDAR stream (use_lidar=true)")


class RoadFusionNet(Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.config.validate()
        self.rgb_stream = MobileNetV3Encoder()
        self.lidar_stream = LidarEncoder() if self.config.use_lidar else None
        self.fusion = (
            MultiScaleFusion(PYRAMID_CHANNELS, self.config.token_cap)
            if self.config.use_fusion
            else None
        )
        self.bridge = LargeKernelBridge() if self.config.use_bridge else None
        self.decoder = Decoder(PYRAMID_CHANNELS[-1], PYRAMID_CHANNELS[:4])

    def fused_pyramid(self, rgb: Tensor, adi: Optional[Tensor]) -> FeaturePyramid:
        rgb_pyr = self.rgb_stream(rgb)
        if self.lidar_stream is None:
            return rgb_pyr
        if adi is None:
            raise ValueError("model was built with a LiDAR stream; the ADI input is required")
        lidar_pyr = self.lidar_stream(adi)
        if self.fusion is not None:
            return self.fusion(rgb_pyr, lidar_pyr)
        return FeaturePyramid(tuple(a + b for a, b in zip(rgb_pyr, lidar_pyr)))

    def forward(self, rgb: Tensor, adi: Optional[Tensor] = None) -> SegmentationOutput:
        pyramid = self.fused_pyramid(rgb, adi)
        deepest = pyramid[4]
        if self.bridge is not None:
            deepest = self.bridge(deepest)
        return self.decoder(deepest, pyramid)

    def parameter_breakdown(self) -> dict[str, int]:
        table: dict[str, int] = {"rgb_stream": count_parameters(self.rgb_stream)}
        if self.lidar_stream is not None:
            table["lidar_stream"] = count_parameters(self.lidar_stream)
        if self.fusion is not None:
            table["fusion"] = count_parameters(self.fusion)
        if self.bridge is not None:
            table["bridge"] = count_parameters(self.bridge)
        table["decoder"] = count_parameters(self.decoder)
        table["total"] = count_parameters(self)
        return table


def build_model(config: ModelConfig | None = None, seed: Optional[int] = None,
                rng: Optional[np.random.Generator] = None) -> RoadFusionNet:
    """Construct and deterministically initialize the network."""
    model = RoadFusionNet(config)
    if rng is None:
        rng = np.random.default_rng(0 if seed is None else seed)
    model.init_weights(rng)
    return model
