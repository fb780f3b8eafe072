"""Gradient integrity: central finite differences (float64, h=1e-4) against
the analytic backward pass, five random instances per op and per composite
block. Composite blocks run at reduced widths so the checks stay fast; the
code paths are width-independent.
"""

import numpy as np
import pytest

from roadfusion import functional as F
from roadfusion.decoder import LargeKernelBridge, UpBlock
from roadfusion.fusion import (
    CoordinateAttention,
    CrossModalAttention,
    EfficientChannelAttention,
    GatedFusion,
    ScaleFusion,
)
from roadfusion.gradcheck import check_gradients
from roadfusion.losses import bce_loss, bundle_from_output, focal_loss, lovasz_hinge_loss, total_loss
from roadfusion.decoder import SegmentationOutput
from roadfusion.nn import Module
from roadfusion.tensor import Tensor, concat, take_flat

TRIALS = range(5)


def t64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def module64(m: Module, rng) -> Module:
    m.init_weights(rng)
    m.to_dtype(np.float64)
    return m


PRIMITIVE_CASES = {
    "add": lambda rng, x, y: (x + y).sum(),
    "sub": lambda rng, x, y: (x - y).sum(),
    "mul": lambda rng, x, y: (x * y).mean(),
    "div": lambda rng, x, y: (x / (y * y + 1.0)).sum(),
    "pow": lambda rng, x, y: ((x * x + 0.5) ** 1.3).sum(),
    "exp_log": lambda rng, x, y: ((x.exp() + 1.0).log()).sum(),
    "mean_axis": lambda rng, x, y: (x.mean(axis=1, keepdims=True) * y).sum(),
    "reshape_permute": lambda rng, x, y: (x.reshape(2, 6).permute(1, 0) ** 2.0).sum(),
    "slice": lambda rng, x, y: (x[:, 1:, ::2] * 2.0).sum(),
    "concat": lambda rng, x, y: (concat([x, y], axis=2) ** 2.0).mean(),
    "relu": lambda rng, x, y: F.relu(x).sum(),
    "relu6": lambda rng, x, y: F.relu6(x * 4.0).sum(),
    "sigmoid": lambda rng, x, y: F.sigmoid(x).sum(),
    "hard_sigmoid": lambda rng, x, y: F.hard_sigmoid(x * 2.0).sum(),
    "hard_swish": lambda rng, x, y: F.hard_swish(x * 2.0).sum(),
    "gelu": lambda rng, x, y: F.gelu(x).sum(),
    "softplus": lambda rng, x, y: F.softplus(x).sum(),
    "softmax": lambda rng, x, y: (F.softmax(x.reshape(3, 4), axis=1) * y.reshape(3, 4)).sum(),
}


class TestPrimitiveOps:
    @pytest.mark.parametrize("trial", TRIALS)
    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    def test_primitive(self, name, trial):
        rng = np.random.default_rng(hash((name, trial)) % 2**32)
        x = t64(rng, 2, 2, 3)
        y = t64(rng, 2, 2, 3)
        check_gradients(lambda: PRIMITIVE_CASES[name](rng, x, y), [x, y])

    @pytest.mark.parametrize("trial", TRIALS)
    def test_matmul(self, trial):
        rng = np.random.default_rng(100 + trial)
        a, b = t64(rng, 2, 3, 4), t64(rng, 4, 2)
        check_gradients(lambda: ((a @ b) ** 2.0).sum(), [a, b])

    @pytest.mark.parametrize("trial", TRIALS)
    def test_take_flat(self, trial):
        rng = np.random.default_rng(200 + trial)
        x = t64(rng, 8)
        idx = rng.integers(0, 8, size=10)
        check_gradients(lambda: (take_flat(x, idx) * Tensor(np.arange(10.0))).sum(), [x])

    @pytest.mark.parametrize("trial", TRIALS)
    def test_conv2d(self, trial):
        rng = np.random.default_rng(300 + trial)
        x = t64(rng, 1, 4, 5, 6)
        w = t64(rng, 6, 2, 3, 3)
        b = t64(rng, 6)
        check_gradients(
            lambda: (F.conv2d(x, w, b, stride=2, padding=1, groups=2) ** 2.0).sum(), [x, w, b]
        )

    @pytest.mark.parametrize("trial", TRIALS)
    def test_depthwise_conv2d(self, trial):
        rng = np.random.default_rng(350 + trial)
        x = t64(rng, 2, 3, 5, 5)
        w = t64(rng, 3, 1, 3, 3)
        check_gradients(lambda: (F.conv2d(x, w, padding=1, groups=3) ** 2.0).sum(), [x, w])

    @pytest.mark.parametrize("trial", TRIALS)
    def test_bilinear_resize(self, trial):
        rng = np.random.default_rng(400 + trial)
        x = t64(rng, 1, 2, 3, 4)
        check_gradients(lambda: (F.bilinear_resize(x, (5, 7)) ** 2.0).sum(), [x])

    @pytest.mark.parametrize("trial", TRIALS)
    def test_adaptive_avg_pool(self, trial):
        rng = np.random.default_rng(500 + trial)
        x = t64(rng, 1, 3, 6, 5)
        check_gradients(lambda: (F.adaptive_avg_pool2d(x, (2, 3)) ** 2.0).sum(), [x])

    @pytest.mark.parametrize("trial", TRIALS)
    def test_batchnorm_training(self, trial):
        from roadfusion.nn import BatchNorm2d

        rng = np.random.default_rng(600 + trial)
        bn = module64(BatchNorm2d(3), rng)
        bn.weight.data = rng.standard_normal(3) + 1.5
        bn.bias.data = rng.standard_normal(3)
        x = t64(rng, 2, 3, 2, 3)
        check_gradients(lambda: (bn(x) ** 2.0).sum(), [x, bn.weight, bn.bias])


def all_params(module):
    return [p for _, p in module.named_parameters()]


class TestCompositeBlocks:
    @pytest.mark.parametrize("trial", TRIALS)
    def test_efficient_channel_attention(self, trial):
        rng = np.random.default_rng(700 + trial)
        eca = module64(EfficientChannelAttention(8), rng)
        x = t64(rng, 1, 8, 3, 3)
        check_gradients(lambda: (eca(x) ** 2.0).sum(), [x] + all_params(eca))

    @pytest.mark.parametrize("trial", TRIALS)
    def test_coordinate_attention(self, trial):
        rng = np.random.default_rng(800 + trial)
        ca = module64(CoordinateAttention(8), rng)
        x = t64(rng, 1, 8, 3, 2)
        check_gradients(lambda: (ca(x) ** 2.0).sum(), [x] + all_params(ca))

    @pytest.mark.parametrize("trial", TRIALS)
    def test_cross_modal_attention(self, trial):
        rng = np.random.default_rng(900 + trial)
        cma = module64(CrossModalAttention(4, token_cap=None), rng)
        a, b = t64(rng, 1, 4, 2, 2), t64(rng, 1, 4, 2, 2)
        check_gradients(lambda: (cma(a, b) ** 2.0).sum(), [a, b] + all_params(cma))

    @pytest.mark.parametrize("trial", TRIALS)
    def test_gated_fusion(self, trial):
        rng = np.random.default_rng(1000 + trial)
        gf = module64(GatedFusion(4, 8), rng)
        a, b, c = (t64(rng, 1, 4, 2, 2) for _ in range(3))
        check_gradients(lambda: (gf(a, b, c) ** 2.0).sum(), [a, b, c] + all_params(gf))

    @pytest.mark.parametrize("trial", TRIALS)
    def test_scale_fusion_end_to_end(self, trial):
        rng = np.random.default_rng(1100 + trial)
        sf = module64(ScaleFusion(4, token_cap=None), rng)
        a, b = t64(rng, 1, 4, 2, 2), t64(rng, 1, 4, 2, 2)
        check_gradients(lambda: (sf(a, b) ** 2.0).sum(), [a, b])

    @pytest.mark.parametrize("trial", TRIALS)
    def test_bridge(self, trial):
        # eval mode: the dropout stage is the identity, the rest is the
        # full bottleneck + residual graph (reduced widths)
        rng = np.random.default_rng(1200 + trial)
        bridge = LargeKernelBridge(channels=6, mid=3)
        bridge = module64(bridge, rng)
        bridge.eval()
        x = t64(rng, 1, 6, 3, 3)
        check_gradients(lambda: (bridge(x) ** 2.0).sum(), [x] + all_params(bridge))

    @pytest.mark.parametrize("trial", TRIALS)
    def test_upblock_training_mode(self, trial):
        rng = np.random.default_rng(1300 + trial)
        block = module64(UpBlock(4, 3, 4), rng)
        for bn in (block.fuse.bn1, block.fuse.bn2):
            bn.weight.data = rng.standard_normal(4) + 1.5
            bn.bias.data = rng.standard_normal(4)
        deeper, skip = t64(rng, 2, 4, 2, 2), t64(rng, 2, 3, 4, 4)
        check_gradients(lambda: (block(deeper, skip) ** 2.0).mean(), [deeper, skip])


class TestLossGradients:
    @pytest.mark.parametrize("trial", TRIALS)
    @pytest.mark.parametrize("loss_fn", [bce_loss, focal_loss, lovasz_hinge_loss],
                             ids=["bce", "focal", "lovasz"])
    def test_individual_losses(self, loss_fn, trial):
        rng = np.random.default_rng(1400 + trial)
        logits = t64(rng, 1, 1, 4, 4)
        targets = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        check_gradients(lambda: loss_fn(logits, targets), [logits])

    @pytest.mark.parametrize("trial", TRIALS)
    def test_total_loss(self, trial):
        rng = np.random.default_rng(1500 + trial)
        main = t64(rng, 1, 1, 4, 4)
        aux = tuple(t64(rng, 1, 1, s, s) for s in (1, 2, 2))
        targets = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        leaves = [main, *aux]

        def fn():
            bundle = bundle_from_output(SegmentationOutput(main, aux), targets)
            return total_loss(bundle)[0]

        check_gradients(fn, leaves)
