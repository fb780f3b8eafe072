"""Large-kernel semantic bridge and the U-Net style decoder with aux heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import functional as F
from .encoders import FeaturePyramid
from .nn import BatchNorm2d, Conv2d, Dropout2d, Module, ModuleList
from .tensor import Tensor, concat

__all__ = ["LargeKernelBridge", "UpBlock", "Decoder", "SegmentationOutput"]

DECODER_WIDTHS = (128, 64, 32, 16, 16)  # bottleneck + four up-blocks


class LargeKernelBridge(Module):
    """Bottlenecked 7x7 depthwise block with a residual: enlarges the
    receptive field of the deepest fused map at linear cost.

    Norm-free by design: 1x1 down (960->128), depthwise 7x7, GELU, channel
    dropout p=0.2, 1x1 up (128->960), plus the identity path.
    """

    def __init__(self, channels: int = 960, mid: int = 128, drop: float = 0.2):
        super().__init__()
        self.channels = channels
        self.down = Conv2d(channels, mid, 1, bias=True)
        self.depthwise = Conv2d(mid, mid, 7, padding=3, groups=mid, bias=True)
        self.drop = Dropout2d(drop)
        self.up = Conv2d(mid, channels, 1, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.channels:
            raise ValueError(f"bridge expects {self.channels} channels, got {x.data.shape[1]}")
        y = self.up(self.drop(F.gelu(self.depthwise(self.down(x)))))
        return x + y


class DoubleConv(Module):
    """Two cascaded 3x3 conv-batchnorm-ReLU blocks."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class UpBlock(Module):
    """Upsample the deeper map to the skip's extents, adapt + concat, DoubleConv."""

    def __init__(self, deeper_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.deeper_channels = deeper_channels
        self.adapter = Conv2d(skip_channels, out_channels, 1, bias=True)
        self.fuse = DoubleConv(deeper_channels + out_channels, out_channels)

    def forward(self, deeper: Tensor, skip: Tensor) -> Tensor:
        if deeper.data.shape[1] != self.deeper_channels:
            raise ValueError(
                f"up-block expects {self.deeper_channels} deeper channels, got {deeper.data.shape[1]}"
            )
        up = F.bilinear_resize(deeper, skip.data.shape[2:])
        if up.data.shape[2:] != skip.data.shape[2:]:
            raise ValueError(
                f"upsampled extents {up.data.shape[2:]} do not match skip extents {skip.data.shape[2:]}"
            )
        return self.fuse(concat([up, self.adapter(skip)], axis=1))


@dataclass
class SegmentationOutput:
    """Full-resolution main logits plus (in training) three auxiliary logits,
    ordered deep to shallow."""

    main: Tensor
    aux: Optional[tuple[Tensor, ...]] = None


class Decoder(Module):
    """Bottleneck at 1/32, four up-blocks to 1/2, then a 2x upsample before
    the single-logit head so the main output reaches input resolution.

    Aux heads tap the three deepest up-block outputs at native scale and are
    skipped entirely outside training mode.
    """

    def __init__(self, deep_channels: int = 960, skip_channels=(16, 24, 40, 112)):
        super().__init__()
        w = DECODER_WIDTHS
        self.bottleneck = Conv2d(deep_channels, w[0], 1, bias=True)
        self.up1 = UpBlock(w[0], skip_channels[3], w[1])
        self.up2 = UpBlock(w[1], skip_channels[2], w[2])
        self.up3 = UpBlock(w[2], skip_channels[1], w[3])
        self.up4 = UpBlock(w[3], skip_channels[0], w[4])
        self.head = Conv2d(w[4], 1, 1, bias=True)
        self.aux_heads = ModuleList([
            Conv2d(w[1], 1, 1, bias=True),
            Conv2d(w[2], 1, 1, bias=True),
            Conv2d(w[3], 1, 1, bias=True),
        ])

    def forward(self, deepest: Tensor, pyramid: FeaturePyramid) -> SegmentationOutput:
        d = self.bottleneck(deepest)
        d1 = self.up1(d, pyramid[3])
        d2 = self.up2(d1, pyramid[2])
        d3 = self.up3(d2, pyramid[1])
        d4 = self.up4(d3, pyramid[0])
        full = F.bilinear_resize(d4, (d4.data.shape[2] * 2, d4.data.shape[3] * 2))
        main = self.head(full)
        if not self.training:
            return SegmentationOutput(main)
        aux = tuple(head(feat) for head, feat in zip(self.aux_heads, (d1, d2, d3)))
        return SegmentationOutput(main, aux)
