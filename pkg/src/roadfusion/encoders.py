"""Dual-stream feature extraction.

RGB stream: MobileNetV3-Large realized from its published layer table,
tapped at the last layer of each stride for a five-level pyramid with
channels [16, 24, 40, 112, 960]. LiDAR stream: five stride-2 depthwise
separable blocks over the same channel ladder (~0.12M parameters).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import functional as F
from .nn import Conv2d, ConvBNAct, Module, ModuleList
from .tensor import Tensor

__all__ = ["FeaturePyramid", "PYRAMID_CHANNELS", "MobileNetV3Encoder", "LidarEncoder", "DSConvBlock"]

PYRAMID_CHANNELS = (16, 24, 40, 112, 960)
PYRAMID_STRIDES = (2, 4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    """Per-scale feature maps at 1/2 .. 1/32 of the input extents."""

    levels: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ValueError(f"expected 5 pyramid levels, got {len(self.levels)}")

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(level.shape[1] for level in self.levels)


def _check_divisible(x: Tensor) -> None:
    H, W = x.data.shape[2], x.data.shape[3]
    if H % 32 or W % 32:
        need_h = (32 - H % 32) % 32
        need_w = (32 - W % 32) % 32
        raise ValueError(
            f"input extents {H}x{W} must be divisible by 32; pad by {need_h} rows and {need_w} cols"
        )


def _make_divisible(v: float, divisor: int = 8) -> int:
    out = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if out < 0.9 * v:
        out += divisor
    return out


class SqueezeExcite(Module):
    def __init__(self, channels: int, reduced: int):
        super().__init__()
        self.fc1 = Conv2d(channels, reduced, 1, bias=True)
        self.fc2 = Conv2d(reduced, channels, 1, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        s = F.global_avg_pool(x)
        s = F.relu(self.fc1(s))
        s = F.hard_sigmoid(self.fc2(s))
        return x * s


class InvertedResidual(Module):
    """MobileNetV3 bottleneck: expand 1x1, depthwise kxk, optional SE, project 1x1."""

    def __init__(self, cin: int, expansion: int, cout: int, kernel: int,
                 stride: int, use_se: bool, act: str):
        super().__init__()
        self.use_residual = stride == 1 and cin == cout
        self.expand = ConvBNAct(cin, expansion, 1, act=act) if expansion != cin else None
        self.depthwise = ConvBNAct(expansion, expansion, kernel, stride=stride,
                                   padding=kernel // 2, groups=expansion, act=act)
        self.se = SqueezeExcite(expansion, _make_divisible(expansion // 4)) if use_se else None
        self.project = ConvBNAct(expansion, cout, 1, act=None)

    def forward(self, x: Tensor) -> Tensor:
        y = self.expand(x) if self.expand is not None else x
        y = self.depthwise(y)
        if self.se is not None:
            y = self.se(y)
        y = self.project(y)
        if self.use_residual:
            y = y + x
        return y


# kernel, expansion, out, squeeze-excite, activation, stride
_MOBILENETV3_LARGE = (
    (3, 16, 16, False, "relu", 1),
    (3, 64, 24, False, "relu", 2),
    (3, 72, 24, False, "relu", 1),
    (5, 72, 40, True, "relu", 2),
    (5, 120, 40, True, "relu", 1),
    (5, 120, 40, True, "relu", 1),
    (3, 240, 80, False, "hard_swish", 2),
    (3, 200, 80, False, "hard_swish", 1),
    (3, 184, 80, False, "hard_swish", 1),
    (3, 184, 80, False, "hard_swish", 1),
    (3, 480, 112, True, "hard_swish", 1),
    (3, 672, 112, True, "hard_swish", 1),
    (5, 672, 160, True, "hard_swish", 2),
    (5, 960, 160, True, "hard_swish", 1),
    (5, 960, 160, True, "hard_swish", 1),
)
# pyramid taps: last block at each stride, plus the final 960-channel expansion
_TAP_AFTER_BLOCK = {0: 0, 2: 1, 5: 2, 11: 3}


class MobileNetV3Encoder(Module):
    def __init__(self):
        super().__init__()
        self.stem = ConvBNAct(3, 16, 3, stride=2, padding=1, act="hard_swish")
        blocks = []
        cin = 16
        for kernel, expansion, cout, use_se, act, stride in _MOBILENETV3_LARGE:
            blocks.append(InvertedResidual(cin, expansion, cout, kernel, stride, use_se, act))
            cin = cout
        self.blocks = ModuleList(blocks)
        self.final = ConvBNAct(cin, 960, 1, act="hard_swish")

    def forward(self, x: Tensor) -> FeaturePyramid:
        _check_divisible(x)
        taps: list[Tensor] = []
        y = self.stem(x)
        for i, block in enumerate(self.blocks):
            y = block(y)
            if _TAP_AFTER_BLOCK.get(i) is not None:
                taps.append(y)
        taps.append(self.final(y))
        return FeaturePyramid(tuple(taps))


class DSConvBlock(Module):
    """Depthwise 3x3 (stride 2) then pointwise 1x1, batchnorm + ReLU after each."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.depthwise = ConvBNAct(cin, cin, 3, stride=2, padding=1, groups=cin, act="relu")
        self.pointwise = ConvBNAct(cin, cout, 1, act="relu")

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class LidarEncoder(Module):
    """Tiny five-stage stream aligned level-for-level with the RGB pyramid."""

    def __init__(self):
        super().__init__()
        widths = (3,) + PYRAMID_CHANNELS
        self.blocks = ModuleList([DSConvBlock(widths[i], widths[i + 1]) for i in range(5)])

    def forward(self, x: Tensor) -> FeaturePyramid:
        _check_divisible(x)
        taps = []
        y = x
        for block in self.blocks:
            y = block(y)
            taps.append(y)
        return FeaturePyramid(tuple(taps))
