"""Cross-modal fusion: channel attention, coordinate attention, cross
attention, gating. Oracles recompute each stage's definition step by step
with plain numpy."""

import numpy as np
import pytest
from scipy.special import expit

from roadfusion.fusion import (
    CoordinateAttention,
    CrossModalAttention,
    EfficientChannelAttention,
    GatedFusion,
    MultiScaleFusion,
    ScaleFusion,
    eca_kernel_size,
)
from roadfusion.encoders import FeaturePyramid
from roadfusion.tensor import Tensor


def rand_map(rng, b, c, h, w, dtype=np.float32):
    return Tensor(rng.standard_normal((b, c, h, w)).astype(dtype))


class TestEcaKernelRule:
    @pytest.mark.parametrize("channels,expected", [(8, 3), (12, 3), (20, 3), (56, 3), (480, 5)])
    def test_adaptive_width(self, channels, expected):
        assert eca_kernel_size(channels) == expected

    def test_always_odd(self):
        for c in range(2, 2048, 7):
            assert eca_kernel_size(c) % 2 == 1


class TestEfficientChannelAttention:
    def test_zero_input_gives_zero(self, rng):
        eca = EfficientChannelAttention(8)
        eca.init_weights(rng)
        out = eca(Tensor(np.zeros((1, 8, 4, 4), dtype=np.float32)))
        assert np.allclose(out.data, 0.0)

    def test_zero_weights_halve_input(self, rng):
        eca = EfficientChannelAttention(8)
        x = rand_map(rng, 2, 8, 3, 3)
        out = eca(x)  # weights start at zero -> sigmoid(0) = 0.5
        assert np.allclose(out.data, 0.5 * x.data, atol=1e-6)

    def test_matches_stepwise_oracle(self, rng):
        eca = EfficientChannelAttention(16)
        eca.init_weights(rng)
        x = rand_map(rng, 2, 16, 4, 5)
        out = eca(x).data
        k = eca.kernel_size
        w = eca.weight.data.reshape(k)
        desc = x.data.mean(axis=(2, 3))                      # [B, C]
        padded = np.pad(desc, ((0, 0), (k // 2, k // 2)))
        conv = np.stack([
            (padded[:, i : i + k] * w).sum(axis=1) for i in range(16)
        ], axis=1)
        gate = expit(conv)
        assert np.allclose(out, x.data * gate[:, :, None, None], atol=1e-6)


class TestCoordinateAttention:
    def test_zero_input_gives_zero(self, rng):
        ca = CoordinateAttention(8)
        ca.init_weights(rng)
        out = ca(Tensor(np.zeros((1, 8, 4, 4), dtype=np.float32)))
        assert np.allclose(out.data, 0.0)

    def test_spatially_constant_input_stays_constant(self, rng):
        ca = CoordinateAttention(8)
        ca.init_weights(rng)
        x = np.broadcast_to(
            rng.standard_normal((1, 8, 1, 1)).astype(np.float32), (1, 8, 5, 6)
        ).copy()
        out = ca(Tensor(x)).data
        assert np.allclose(out, out[:, :, :1, :1], atol=1e-6)

    def test_matches_literal_definition_oracle(self, rng):
        ca = CoordinateAttention(8)
        ca.init_weights(rng)
        for w_conv in (ca.shared, ca.gate_h, ca.gate_w):
            w_conv.bias.data = rng.standard_normal(w_conv.bias.data.shape).astype(np.float32)
        x = rand_map(rng, 1, 8, 4, 4)
        out = ca(x).data

        def conv1x1(arr, conv):
            w = conv.weight.data[:, :, 0, 0]
            return np.einsum("oc,bchw->bohw", w, arr) + conv.bias.data[None, :, None, None]

        def hswish(a):
            return a * np.clip((a + 3) / 6, 0, 1)

        pooled_h = x.data.mean(axis=3, keepdims=True)                    # [1,8,4,1]
        pooled_w = x.data.mean(axis=2, keepdims=True).transpose(0, 1, 3, 2)
        joint = hswish(conv1x1(np.concatenate([pooled_h, pooled_w], axis=2), ca.shared))
        gh = expit(conv1x1(joint[:, :, :4, :], ca.gate_h))
        gw = expit(conv1x1(joint[:, :, 4:, :], ca.gate_w)).transpose(0, 1, 3, 2)
        assert np.allclose(out, x.data * gh * gw, atol=1e-6)

    def test_reduction_floor(self):
        assert CoordinateAttention(8).shared.out_channels == 8
        assert CoordinateAttention(480).shared.out_channels == 15


def attention_oracle(q, k, v, scale):
    """Token-by-token attention: softmax over keys, explicit sums."""
    B, N, C = q.shape
    M = k.shape[1]
    out = np.zeros((B, N, C))
    for b in range(B):
        for n in range(N):
            scores = np.array([np.dot(q[b, n], k[b, m]) * scale for m in range(M)])
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            for m in range(M):
                out[b, n] += weights[m] * v[b, m]
    return out


class TestCrossModalAttention:
    def test_constant_inputs_uniform_attention(self, rng):
        cma = CrossModalAttention(4, token_cap=None)
        cma.init_weights(rng)
        cma.v_rgb.weight.data = cma.v_lidar.weight.data.copy()  # shared value proj
        c = rng.standard_normal((1, 4, 1, 1)).astype(np.float32)
        x = Tensor(np.broadcast_to(c, (1, 4, 3, 3)).copy())
        out = cma(x, x).data
        vproj = np.einsum("oc,bchw->bohw", cma.v_rgb.weight.data[:, :, 0, 0], x.data)
        assert np.allclose(out, 2.0 * vproj, atol=1e-5)

    def test_attention_rows_sum_to_one(self, rng):
        from roadfusion import functional as F

        cma = CrossModalAttention(4, token_cap=None)
        cma.init_weights(rng)
        f_rgb, f_lidar = rand_map(rng, 2, 4, 3, 3), rand_map(rng, 2, 4, 3, 3)
        q = cma._tokens(cma.q_rgb(f_rgb)) * cma.scale
        k = cma._tokens(cma.k_lidar(f_lidar))
        attn = F.softmax(q @ k.permute(0, 2, 1), axis=-1).data
        assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-6)

    def test_matches_explicit_summation_oracle(self, rng):
        cma = CrossModalAttention(4, token_cap=None)
        cma.init_weights(rng)
        f_rgb = rand_map(rng, 1, 4, 2, 2, dtype=np.float64)
        f_lidar = rand_map(rng, 1, 4, 2, 2, dtype=np.float64)
        cma_out = cma(f_rgb, f_lidar).data

        def proj_tokens(x, conv):
            w = conv.weight.data[:, :, 0, 0].astype(np.float64)
            mapped = np.einsum("oc,bchw->bohw", w, x.data)
            return mapped.reshape(1, 4, 4).transpose(0, 2, 1)

        d1 = attention_oracle(
            proj_tokens(f_rgb, cma.q_rgb), proj_tokens(f_lidar, cma.k_lidar),
            proj_tokens(f_lidar, cma.v_lidar), cma.scale,
        )
        d2 = attention_oracle(
            proj_tokens(f_lidar, cma.q_lidar), proj_tokens(f_rgb, cma.k_rgb),
            proj_tokens(f_rgb, cma.v_rgb), cma.scale,
        )
        expected = (d1 + d2).transpose(0, 2, 1).reshape(1, 4, 2, 2)
        assert np.allclose(cma_out, expected, atol=1e-6)

    def test_kv_pooling_caps_tokens_and_keeps_shape(self, rng):
        cma = CrossModalAttention(4, token_cap=16)
        cma.init_weights(rng)
        f1, f2 = rand_map(rng, 1, 4, 8, 12), rand_map(rng, 1, 4, 8, 12)
        out = cma(f1, f2)
        assert out.shape == (1, 4, 8, 12)
        assert cma._kv_grid(8, 12) == (4, 4)

    def test_shape_mismatch_rejected(self, rng):
        cma = CrossModalAttention(4)
        with pytest.raises(ValueError, match="matching shapes"):
            cma(rand_map(rng, 1, 4, 2, 2), rand_map(rng, 1, 4, 2, 3))


class TestGatedFusion:
    def build(self, rng, d=4, c=8):
        gf = GatedFusion(d, c)
        gf.init_weights(rng)
        return gf

    def test_gate_saturated_high_passes_cross(self, rng):
        gf = self.build(rng)
        gf.gate.weight.data[:] = 0
        gf.gate.bias.data[:] = 50.0  # sigmoid -> 1
        gf.recover.weight.data = np.eye(4, 4)[:, :, None, None].astype(np.float32).repeat(2, axis=0)[:8]
        a, b, c = (rand_map(rng, 1, 4, 3, 3) for _ in range(3))
        out = gf(a, b, c).data
        blended = np.einsum("oc,bchw->bohw", gf.recover.weight.data[:, :, 0, 0], c.data)
        assert np.allclose(out, blended + gf.recover.bias.data[None, :, None, None], atol=1e-5)

    def test_gate_saturated_low_passes_unimodal_sum(self, rng):
        gf = self.build(rng)
        gf.gate.weight.data[:] = 0
        gf.gate.bias.data[:] = -50.0  # sigmoid -> 0
        a, b, c = (rand_map(rng, 1, 4, 3, 3) for _ in range(3))
        out = gf(a, b, c).data
        blended = np.einsum(
            "oc,bchw->bohw", gf.recover.weight.data[:, :, 0, 0], a.data + b.data
        )
        assert np.allclose(out, blended + gf.recover.bias.data[None, :, None, None], atol=1e-5)

    def test_matches_elementwise_oracle(self, rng):
        gf = self.build(rng)
        gf.gate.bias.data = rng.standard_normal(4).astype(np.float32)
        a, b, c = (rand_map(rng, 2, 4, 3, 3) for _ in range(3))
        out = gf(a, b, c).data
        gw = gf.gate.weight.data[:, :, 0, 0]
        stacked = np.concatenate([a.data, b.data, c.data], axis=1)
        g = expit(np.einsum("oc,bchw->bohw", gw, stacked) + gf.gate.bias.data[None, :, None, None])
        blended = g * c.data + (1 - g) * (a.data + b.data)
        rw = gf.recover.weight.data[:, :, 0, 0]
        expected = np.einsum("oc,bchw->bohw", rw, blended) + gf.recover.bias.data[None, :, None, None]
        assert np.allclose(out, expected, atol=1e-5)

    def test_gate_strictly_inside_unit_interval(self, rng):
        from roadfusion import functional as F
        from roadfusion.tensor import concat

        gf = self.build(rng)
        a, b, c = (rand_map(rng, 1, 4, 3, 3) for _ in range(3))
        g = F.sigmoid(gf.gate(concat([a, b, c], axis=1))).data
        assert (g > 0).all() and (g < 1).all()


class TestScaleFusion:
    def test_output_shape_preserved_across_scales(self, rng):
        for c, h, w in [(16, 8, 8), (24, 8, 6), (40, 4, 4), (112, 4, 2), (960, 2, 2)]:
            sf = ScaleFusion(c, token_cap=16)
            sf.init_weights(rng)
            out = sf(rand_map(rng, 1, c, h, w), rand_map(rng, 1, c, h, w))
            assert out.shape == (1, c, h, w)

    def test_odd_channel_count_rejected(self):
        with pytest.raises(ValueError, match="even"):
            ScaleFusion(7)

    def test_gradient_reaches_both_streams(self, rng):
        sf = ScaleFusion(8, token_cap=None)
        sf.init_weights(rng)
        a = Tensor(rng.standard_normal((1, 8, 3, 3)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 8, 3, 3)).astype(np.float32), requires_grad=True)
        (sf(a, b) ** 2.0).sum().backward()
        assert a.grad is not None and np.abs(a.grad).max() > 0
        assert b.grad is not None and np.abs(b.grad).max() > 0

    def test_matches_composition_of_stage_oracles(self, rng):
        """Full block (pooling off) equals the four stage definitions chained
        in plain numpy: reduce -> channel/coordinate gates -> bidirectional
        attention -> gated recovery."""
        sf = ScaleFusion(8, token_cap=None)
        sf.init_weights(rng)
        for conv in (sf.reduce_rgb, sf.reduce_lidar, sf.gated.gate, sf.gated.recover,
                     sf.lidar_attention.shared, sf.lidar_attention.gate_h, sf.lidar_attention.gate_w):
            conv.bias.data = rng.standard_normal(conv.bias.data.shape).astype(np.float32)
        a, b = rand_map(rng, 1, 8, 2, 3), rand_map(rng, 1, 8, 2, 3)

        def conv1x1(arr, conv):
            out = np.einsum("oc,bchw->bohw", conv.weight.data[:, :, 0, 0], arr)
            if conv.bias is not None:
                out = out + conv.bias.data[None, :, None, None]
            return out

        def eca_oracle(arr, eca):
            k = eca.kernel_size
            w = eca.weight.data.reshape(k)
            desc = arr.mean(axis=(2, 3))
            padded = np.pad(desc, ((0, 0), (k // 2, k // 2)))
            conv = np.stack([(padded[:, i : i + k] * w).sum(axis=1)
                             for i in range(arr.shape[1])], axis=1)
            return arr * expit(conv)[:, :, None, None]

        def ca_oracle(arr, ca):
            H = arr.shape[2]
            ph = arr.mean(axis=3, keepdims=True)
            pw = arr.mean(axis=2, keepdims=True).transpose(0, 1, 3, 2)
            joint = conv1x1(np.concatenate([ph, pw], axis=2), ca.shared)
            joint = joint * np.clip((joint + 3) / 6, 0, 1)
            gh = expit(conv1x1(joint[:, :, :H, :], ca.gate_h))
            gw = expit(conv1x1(joint[:, :, H:, :], ca.gate_w)).transpose(0, 1, 3, 2)
            return arr * gh * gw

        def cma_oracle(fr, fl, cma):
            def tokens(arr, conv):
                B, _, H, W = arr.shape
                return conv1x1(arr, conv).reshape(B, cma.channels, H * W).transpose(0, 2, 1)

            d1 = attention_oracle(tokens(fr, cma.q_rgb), tokens(fl, cma.k_lidar),
                                  tokens(fl, cma.v_lidar), cma.scale)
            d2 = attention_oracle(tokens(fl, cma.q_lidar), tokens(fr, cma.k_rgb),
                                  tokens(fr, cma.v_rgb), cma.scale)
            B, _, H, W = fr.shape
            return (d1 + d2).transpose(0, 2, 1).reshape(B, cma.channels, H, W)

        r = eca_oracle(conv1x1(a.data, sf.reduce_rgb), sf.rgb_attention)
        l = ca_oracle(conv1x1(b.data, sf.reduce_lidar), sf.lidar_attention)
        c = cma_oracle(r, l, sf.cross)
        g = expit(conv1x1(np.concatenate([r, l, c], axis=1), sf.gated.gate))
        expected = conv1x1(g * c + (1 - g) * (r + l), sf.gated.recover)
        assert np.allclose(sf(a, b).data, expected, atol=1e-5)

    def test_stream_roles_are_asymmetric(self, rng):
        sf = ScaleFusion(8, token_cap=None)
        sf.init_weights(rng)
        a, b = rand_map(rng, 1, 8, 3, 3), rand_map(rng, 1, 8, 3, 3)
        assert not np.allclose(sf(a, b).data, sf(b, a).data, atol=1e-4)

    def test_batch_permutation_equivariance(self, rng):
        sf = ScaleFusion(8, token_cap=None)
        sf.init_weights(rng)
        a, b = rand_map(rng, 3, 8, 3, 3), rand_map(rng, 3, 8, 3, 3)
        out = sf(a, b).data
        perm = [2, 0, 1]
        out_perm = sf(Tensor(a.data[perm]), Tensor(b.data[perm])).data
        assert np.allclose(out_perm, out[perm], atol=1e-6)


class TestMultiScaleFusion:
    def test_five_scales_fuse_pyramids(self, rng):
        msf = MultiScaleFusion(token_cap=16)
        msf.init_weights(rng)
        shapes = [(16, 16, 16), (24, 8, 8), (40, 4, 4), (112, 2, 2), (960, 1, 1)]
        rgb = FeaturePyramid(tuple(rand_map(rng, 1, c, h, w) for c, h, w in shapes))
        lidar = FeaturePyramid(tuple(rand_map(rng, 1, c, h, w) for c, h, w in shapes))
        fused = msf(rgb, lidar)
        assert fused.channels == (16, 24, 40, 112, 960)
