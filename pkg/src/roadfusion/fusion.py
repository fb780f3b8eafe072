"""Per-scale cross-modal fusion of the RGB and LiDAR pyramids.

Each scale runs: channel reduction to half width, efficient channel
attention on the RGB half and coordinate attention on the LiDAR half,
bidirectional cross-modal attention between them, and a learned gate that
blends the cross features with the enhanced unimodal sum before a 1x1
conv recovers the original width.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import functional as F
from .encoders import PYRAMID_CHANNELS, FeaturePyramid
from .nn import Conv2d, Module, ModuleList, Parameter
from .tensor import Tensor, concat

__all__ = [
    "eca_kernel_size",
    "EfficientChannelAttention",
    "CoordinateAttention",
    "CrossModalAttention",
    "GatedFusion",
    "ScaleFusion",
    "MultiScaleFusion",
    "DEFAULT_TOKEN_CAP",
]

DEFAULT_TOKEN_CAP = 1024


def eca_kernel_size(channels: int, gamma: int = 2, beta: int = 1) -> int:
    """Adaptive odd kernel width for the channel-descriptor convolution."""
    t = int(abs(math.log2(channels) + beta) / gamma)
    return t if t % 2 else t + 1


class EfficientChannelAttention(Module):
    """Channel gate from a 1-D conv over globally pooled descriptors."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.kernel_size = eca_kernel_size(channels)
        self.weight = Parameter(np.zeros((1, 1, 1, self.kernel_size)))

    def reset_parameters(self, rng: np.random.Generator) -> None:
        bound = math.sqrt(6.0 / self.kernel_size)
        self.weight.data = rng.uniform(-bound, bound, self.weight.data.shape).astype(
            self.weight.data.dtype
        )

    def forward(self, x: Tensor) -> Tensor:
        B, C = x.data.shape[:2]
        desc = F.global_avg_pool(x).reshape(B, 1, 1, C)
        gate = F.conv2d(desc, self.weight, padding=(0, self.kernel_size // 2))
        gate = F.sigmoid(gate).reshape(B, C, 1, 1)
        return x * gate


class CoordinateAttention(Module):
    """Positional channel gates factored along the two spatial axes."""

    def __init__(self, channels: int, reduction: int = 32, floor: int = 8):
        super().__init__()
        mid = max(floor, channels // reduction)
        self.shared = Conv2d(channels, mid, 1, bias=True)
        self.gate_h = Conv2d(mid, channels, 1, bias=True)
        self.gate_w = Conv2d(mid, channels, 1, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.data.shape
        pooled_h = x.mean(axis=3, keepdims=True)                      # [B,C,H,1]
        pooled_w = x.mean(axis=2, keepdims=True).permute(0, 1, 3, 2)  # [B,C,W,1]
        joint = F.hard_swish(self.shared(concat([pooled_h, pooled_w], axis=2)))
        gh = F.sigmoid(self.gate_h(joint[:, :, :H, :]))               # [B,C,H,1]
        gw = F.sigmoid(self.gate_w(joint[:, :, H:, :].permute(0, 1, 3, 2)))  # [B,C,1,W]
        return x * gh * gw


class CrossModalAttention(Module):
    """Bidirectional single-head attention between two same-shape maps.

    Keys and values may be average-pooled down to ``token_cap`` tokens
    (queries keep full resolution), bounding the cost at O(N * cap).
    """

    def __init__(self, channels: int, token_cap: Optional[int] = DEFAULT_TOKEN_CAP):
        super().__init__()
        self.channels = channels
        self.token_cap = token_cap
        self.scale = 1.0 / math.sqrt(channels)
        self.q_rgb = Conv2d(channels, channels, 1, bias=False)
        self.k_rgb = Conv2d(channels, channels, 1, bias=False)
        self.v_rgb = Conv2d(channels, channels, 1, bias=False)
        self.q_lidar = Conv2d(channels, channels, 1, bias=False)
        self.k_lidar = Conv2d(channels, channels, 1, bias=False)
        self.v_lidar = Conv2d(channels, channels, 1, bias=False)

    def _kv_grid(self, H: int, W: int) -> Optional[tuple[int, int]]:
        if self.token_cap is None or H * W <= self.token_cap:
            return None
        side = int(math.sqrt(self.token_cap))
        return min(H, side), min(W, side)

    @staticmethod
    def _tokens(x: Tensor) -> Tensor:
        B, C, H, W = x.data.shape
        return x.reshape(B, C, H * W).permute(0, 2, 1)  # [B, N, C]

    def _attend(self, q_map: Tensor, k_map: Tensor, v_map: Tensor) -> Tensor:
        B, C, H, W = q_map.data.shape
        grid = self._kv_grid(k_map.data.shape[2], k_map.data.shape[3])
        if grid is not None:
            k_map = F.adaptive_avg_pool2d(k_map, grid)
            v_map = F.adaptive_avg_pool2d(v_map, grid)
        q = self._tokens(q_map) * self.scale         # [B, N, C]; scale on the small side
        k = self._tokens(k_map)                      # [B, M, C]
        v = self._tokens(v_map)                      # [B, M, C]
        attn = F.softmax(q @ k.permute(0, 2, 1), axis=-1)  # normalized over key tokens
        out = attn @ v                               # [B, N, C]
        return out.permute(0, 2, 1).reshape(B, C, H, W)

    def forward(self, f_rgb: Tensor, f_lidar: Tensor) -> Tensor:
        if f_rgb.data.shape != f_lidar.data.shape:
            raise ValueError(
                f"cross-modal attention needs matching shapes, got {f_rgb.data.shape} vs {f_lidar.data.shape}"
            )
        rgb_reads_lidar = self._attend(self.q_rgb(f_rgb), self.k_lidar(f_lidar), self.v_lidar(f_lidar))
        lidar_reads_rgb = self._attend(self.q_lidar(f_lidar), self.k_rgb(f_rgb), self.v_rgb(f_rgb))
        return rgb_reads_lidar + lidar_reads_rgb


class GatedFusion(Module):
    """sigmoid gate over [rgb; lidar; cross] picks between cross and unimodal sum."""

    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        self.gate = Conv2d(3 * channels, channels, 1, bias=True)
        self.recover = Conv2d(channels, out_channels, 1, bias=True)

    def forward(self, f_rgb: Tensor, f_lidar: Tensor, f_cross: Tensor) -> Tensor:
        g = F.sigmoid(self.gate(concat([f_rgb, f_lidar, f_cross], axis=1)))
        blended = g * f_cross + (1.0 - g) * (f_rgb + f_lidar)
        return self.recover(blended)


class ScaleFusion(Module):
    """The full fusion block for one pyramid level; output shape = input shape."""

    def __init__(self, channels: int, token_cap: Optional[int] = DEFAULT_TOKEN_CAP):
        super().__init__()
        if channels % 2:
            raise ValueError(f"fusion requires an even channel count, got {channels}")
        half = channels // 2
        self.channels = channels
        self.reduce_rgb = Conv2d(channels, half, 1, bias=True)
        self.reduce_lidar = Conv2d(channels, half, 1, bias=True)
        self.rgb_attention = EfficientChannelAttention(half)
        self.lidar_attention = CoordinateAttention(half)
        self.cross = CrossModalAttention(half, token_cap)
        self.gated = GatedFusion(half, channels)

    def forward(self, f_rgb: Tensor, f_lidar: Tensor) -> Tensor:
        if f_rgb.data.shape != f_lidar.data.shape:
            raise ValueError(
                f"fusion inputs must share shape, got {f_rgb.data.shape} vs {f_lidar.data.shape}"
            )
        r = self.rgb_attention(self.reduce_rgb(f_rgb))
        l = self.lidar_attention(self.reduce_lidar(f_lidar))
        c = self.cross(r, l)
        return self.gated(r, l, c)


class MultiScaleFusion(Module):
    def __init__(self, channels=PYRAMID_CHANNELS, token_cap: Optional[int] = DEFAULT_TOKEN_CAP):
        super().__init__()
        self.scales = ModuleList([ScaleFusion(c, token_cap) for c in channels])

    def forward(self, rgb: FeaturePyramid, lidar: FeaturePyramid) -> FeaturePyramid:
        return FeaturePyramid(tuple(
            scale(fr, fl) for scale, fr, fl in zip(self.scales, rgb, lidar)
        ))
