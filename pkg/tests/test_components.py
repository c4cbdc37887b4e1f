"""
Component Tests for CondenseNetV2 SFR

Tests individual components to ensure they work correctly: tensor kernels, layers,
the SFR and LGC modules, network assembly and cost accounting.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.condensenet import (
    BlockSpec, FeatureBuffer, Network, NetworkConfig, SfrDenseLayer, StemSpec, build_network,
    conv_cost, cost_report, count_flops, count_params, dense_layer_forward, network_backward,
    network_forward, preset_config, reference_values,
)
from src.exceptions import ConfigError, ScheduleError, StageOverflowError, TensorShapeError
from src.layers import (
    AvgPool2d, BatchNorm2d, ChannelShuffle, Conv2d, GlobalAvgPool, HardSwish, Layer, Linear, ReLU,
    SEBlock, grad_check,
)
from src.lgc_module import LgcLayer, lgc_forward, lgc_importance, lgc_prune_stage
from src.sfr_module import (
    SfrModule, build_schedule, importance, prune_stage, reactivate, reduce_kernel, sfr_forward,
)
from src.tensor_core import (
    ConvWeights, RunningStats, Tensor4, avg_pool, batch_norm, channel_shuffle, conv2d,
    conv2d_backward, fully_connected, global_avg_pool, hard_swish, relu, se_block,
)
from src.trainer import sgd_step


def naive_conv(x, w, stride=1, padding=0, groups=1):
    """Direct loop convolution used as the reference."""
    N, C, H, W = x.shape
    O, Ig, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    per_group = O // groups
    for n in range(N):
        for o in range(O):
            g = o // per_group
            for h in range(Ho):
                for v in range(Wo):
                    acc = 0.0
                    for c in range(Ig):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[n, g * Ig + c, h * stride + i, v * stride + j] * w[o, c, i, j]
                    out[n, o, h, v] = acc
    return out


def toy_config(**overrides):
    base = dict(
        name="unit-toy", dataset="synthetic", input_resolution=8, num_classes=2,
        blocks=[BlockSpec(2, 4), BlockSpec(2, 8)], condense_factor=4, sparse_factor=4, groups=4,
        stem=StemSpec(3, 1, None),
    )
    base.update(overrides)
    return NetworkConfig(**base)


@pytest.fixture
def rng():
    """Seeded generator shared by a test."""
    return np.random.default_rng(1234)


class TestConvolution:
    """Test direct grouped convolution and its gradients."""

    def test_stride_two_stem_geometry(self, rng):
        """A 3x3 stride-2 pad-1 convolution maps 224x224 to 112x112."""
        x = rng.standard_normal((1, 3, 224, 224)).astype(np.float32)
        w = ConvWeights(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        assert conv2d(x, w, stride=2, padding=1).shape == (1, 4, 112, 112)

    def test_identity_depthwise_kernel(self, rng):
        """Unit 1x1 kernels with one group per channel reproduce the input."""
        x = rng.standard_normal((2, 5, 4, 4)).astype(np.float32)
        w = ConvWeights(np.ones((5, 1, 1, 1), dtype=np.float32), groups=5)
        np.testing.assert_array_equal(conv2d(x, w), x)

    def test_matches_loop_oracle(self, rng):
        """Random (2,3,5,5) input with (4,3,3,3) filters agrees with the loop oracle."""
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        out = conv2d(x, ConvWeights(w), stride=1, padding=1)
        assert np.abs(out - naive_conv(x, w, 1, 1)).max() < 1e-5

    def test_strided_grouped_matches_loop_oracle(self, rng):
        """Strides and groups follow the same direct-convolution semantics."""
        x = rng.standard_normal((1, 4, 7, 7)).astype(np.float32)
        w = rng.standard_normal((6, 2, 3, 3)).astype(np.float32)
        out = conv2d(x, ConvWeights(w, groups=2), stride=2, padding=1)
        assert np.abs(out - naive_conv(x, w, 2, 1, groups=2)).max() < 1e-5

    @pytest.mark.parametrize("groups", [1, 2, 4])
    def test_groups_equal_independent_slices(self, rng, groups):
        """A G-group conv equals G dense convs on channel slices, concatenated."""
        x = rng.standard_normal((2, 8, 5, 5)).astype(np.float32)
        w = rng.standard_normal((8, 8 // groups, 3, 3)).astype(np.float32)
        out = conv2d(x, ConvWeights(w, groups=groups), padding=1)
        ig, og = 8 // groups, 8 // groups
        parts = [conv2d(x[:, g * ig:(g + 1) * ig], ConvWeights(w[g * og:(g + 1) * og]), padding=1)
                 for g in range(groups)]
        np.testing.assert_allclose(out, np.concatenate(parts, axis=1), atol=1e-5)

    def test_channel_mismatch_raises(self, rng):
        """Input channels must match the filters."""
        x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        w = ConvWeights(np.ones((2, 4, 1, 1), dtype=np.float32))
        with pytest.raises(TensorShapeError, match="expected"):
            conv2d(x, w)

    def test_backward_finite_differences(self, rng):
        """Analytic conv gradients agree with central differences on (1,2,4,4)/(3,2,3,3)."""
        layer = Conv2d(2, 3, kernel_size=3, padding=1, rng=rng)
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        assert grad_check(layer, x, eps=1e-3, probe_seed=0) < 1e-2

    def test_grouped_strided_backward(self, rng):
        """Grouped, strided convolutions also pass the gradient check."""
        layer = Conv2d(4, 6, kernel_size=3, stride=2, padding=1, groups=2, rng=rng)
        x = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
        assert grad_check(layer, x, probe_seed=3) < 1e-4

    def test_zero_grad_out(self, rng):
        """Zero upstream gradient gives zero input and weight gradients."""
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w = ConvWeights(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
        gx, gw = conv2d_backward(x, w, np.zeros((1, 3, 4, 4), dtype=np.float32), padding=1)
        assert not gx.any() and not gw.any()

    def test_identity_backward(self, rng):
        """Identity 1x1 weights pass the upstream gradient through unchanged."""
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        w = ConvWeights(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
        g = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        gx, _ = conv2d_backward(x, w, g)
        np.testing.assert_allclose(gx, g, atol=1e-7)

    def test_tensor4_wraps_arrays(self, rng):
        """Tensor4 inputs behave like their arrays and reject other ranks."""
        t = Tensor4.randn((1, 2, 3, 3), rng)
        w = ConvWeights(np.ones((1, 2, 1, 1), dtype=np.float32))
        np.testing.assert_allclose(conv2d(t, w), t.data.sum(axis=1, keepdims=True), atol=1e-6)
        with pytest.raises(TensorShapeError):
            Tensor4(np.zeros((2, 3)))

    def test_forward_is_deterministic(self, rng):
        """Identical inputs and weights produce identical outputs."""
        x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
        w = ConvWeights(rng.standard_normal((4, 2, 3, 3)).astype(np.float32), groups=2)
        np.testing.assert_array_equal(conv2d(x, w, padding=1), conv2d(x, w, padding=1))


class TestBatchNorm:
    """Test batch normalization in train and eval mode."""

    def test_constant_input_gives_beta(self):
        """Zero-variance channels normalize to beta."""
        x = np.empty((4, 2, 2, 2), dtype=np.float32)
        x[:, 0] = 2.0
        x[:, 1] = -1.5
        beta = np.array([0.25, -3.0], dtype=np.float32)
        out, _ = batch_norm(x, np.ones(2, np.float32), beta, RunningStats.fresh(2), training=True)
        np.testing.assert_allclose(out, np.broadcast_to(beta.reshape(1, 2, 1, 1), x.shape), atol=1e-6)

    def test_normalizes_batch_statistics(self, rng):
        """gamma=1, beta=0 yields per-channel mean 0 and variance 1."""
        x = (rng.standard_normal((8, 3, 4, 4)) * 5 + 2).astype(np.float32)
        out, _ = batch_norm(x, np.ones(3, np.float32), np.zeros(3, np.float32), RunningStats.fresh(3), True)
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-4
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3

    def test_matches_scalar_oracle(self, rng):
        """Random (4,3,2,2) input agrees with a scalar-loop oracle."""
        x = rng.standard_normal((4, 3, 2, 2)).astype(np.float32)
        gamma = rng.standard_normal(3).astype(np.float32)
        beta = rng.standard_normal(3).astype(np.float32)
        out, _ = batch_norm(x, gamma, beta, RunningStats.fresh(3), True)
        expected = np.zeros_like(out, dtype=np.float64)
        for c in range(3):
            values = [float(v) for v in x[:, c].reshape(-1)]
            mean = sum(values) / len(values)
            var = sum((v - mean) ** 2 for v in values) / len(values)
            for n in range(4):
                for h in range(2):
                    for w in range(2):
                        expected[n, c, h, w] = gamma[c] * (x[n, c, h, w] - mean) / math.sqrt(var + 1e-5) + beta[c]
        assert np.abs(out - expected).max() < 1e-5

    def test_running_stats_and_eval_mode(self, rng):
        """Train mode moves running stats by momentum 0.1; eval mode uses them."""
        x = (rng.standard_normal((16, 2, 3, 3)) + 4).astype(np.float32)
        running = RunningStats.fresh(2)
        batch_norm(x, np.ones(2, np.float32), np.zeros(2, np.float32), running, True)
        np.testing.assert_allclose(running.mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
        unbiased = x.astype(np.float64).var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(running.var, 0.9 + 0.1 * unbiased, rtol=1e-5)

        out, _ = batch_norm(x, np.ones(2, np.float32), np.zeros(2, np.float32), running, False)
        expected = (x - running.mean.reshape(1, 2, 1, 1)) / np.sqrt(running.var.reshape(1, 2, 1, 1) + 1e-5)
        np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_channel_mismatch_raises(self, rng):
        """gamma / beta must match the channel count."""
        x = rng.standard_normal((2, 3, 2, 2)).astype(np.float32)
        with pytest.raises(TensorShapeError):
            batch_norm(x, np.ones(2, np.float32), np.zeros(2, np.float32), RunningStats.fresh(2), True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        """BN gradients pass the finite-difference check in both modes."""
        layer = BatchNorm2d(3)
        layer.gamma.data[:] = rng.uniform(0.5, 2.0, 3)
        layer.beta.data[:] = rng.standard_normal(3)
        layer.train(training)
        x = rng.standard_normal((4, 3, 2, 2)).astype(np.float32)
        assert grad_check(layer, x, probe_seed=7) < 1e-2


class TestActivationsAndPooling:
    """Test activations, pooling, the affine map, shuffle and SE."""

    def test_relu_values(self):
        """relu(-1) = 0 and relu(2) = 2."""
        np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_hard_swish_values(self):
        """hard_swish endpoints and hard_swish(1) = 4/6."""
        out = hard_swish(np.array([0.0, 3.0, -3.0, 1.0]))
        np.testing.assert_allclose(out, [0.0, 3.0, 0.0, 4.0 / 6.0], atol=1e-6)

    def test_avg_pool(self):
        """Window means, including the constant-input and 2x2 cases."""
        x = np.arange(1, 5, dtype=np.float32).reshape(1, 1, 2, 2)
        assert avg_pool(x, 2, 2).item() == pytest.approx(2.5)
        const = np.full((2, 3, 4, 4), 1.75, dtype=np.float32)
        np.testing.assert_allclose(avg_pool(const, 2, 2), 1.75)

    def test_global_pool_oracle(self, rng):
        """Global pooling of a 7x7 map equals its sum / 49."""
        x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
        out = global_avg_pool(x)
        assert out.shape == (2, 3, 1, 1)
        for n in range(2):
            for c in range(3):
                assert out[n, c, 0, 0] == pytest.approx(sum(float(v) for v in x[n, c].reshape(-1)) / 49, abs=1e-6)

    def test_pool_window_too_large(self):
        """Windows larger than the input are rejected."""
        with pytest.raises(TensorShapeError):
            avg_pool(np.zeros((1, 1, 1, 1), dtype=np.float32), 2, 2)

    def test_fully_connected(self, rng):
        """Identity / zero weights and the triple-loop oracle."""
        x = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(fully_connected(x, np.eye(3), np.zeros(3)), x)
        b = np.array([1.0, -2.0, 0.5, 3.0])
        np.testing.assert_array_equal(fully_connected(x, np.zeros((3, 4)), b), np.tile(b, (2, 1)))
        w = rng.standard_normal((3, 4))
        expected = np.array([[sum(x[n, c] * w[c, o] for c in range(3)) + b[o] for o in range(4)] for n in range(2)])
        assert np.abs(fully_connected(x, w, b) - expected).max() < 1e-6
        with pytest.raises(TensorShapeError):
            fully_connected(x, np.zeros((4, 2)), np.zeros(2))

    def test_channel_shuffle_order(self):
        """C=6, G=2 reorders channels to [0,3,1,4,2,5]."""
        x = np.arange(6, dtype=np.float32).reshape(1, 6, 1, 1)
        assert channel_shuffle(x, 2).reshape(-1).tolist() == [0, 3, 1, 4, 2, 5]

    def test_channel_shuffle_identity_and_inverse(self, rng):
        """G=1 is the identity and shuffling by C/G undoes a G-shuffle."""
        x = rng.standard_normal((2, 12, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(channel_shuffle(x, 1), x)
        np.testing.assert_array_equal(channel_shuffle(channel_shuffle(x, 3), 4), x)
        with pytest.raises(TensorShapeError):
            channel_shuffle(x, 5)

    def test_se_forced_half_gate(self, rng):
        """Zero excitation weights give a 0.5 gate."""
        x = rng.standard_normal((2, 8, 3, 3)).astype(np.float32)
        w1 = rng.standard_normal((8, 2)).astype(np.float32)
        out, _ = se_block(x, w1, np.zeros(2, np.float32), np.zeros((2, 8), np.float32), np.zeros(8, np.float32))
        np.testing.assert_allclose(out, x / 2, atol=1e-7)

    def test_se_saturated_gate(self, rng):
        """A large positive excitation bias passes the input through."""
        x = rng.standard_normal((2, 8, 3, 3)).astype(np.float32)
        out, _ = se_block(x, np.zeros((8, 2), np.float32), np.zeros(2, np.float32),
                          np.zeros((2, 8), np.float32), np.full(8, 50.0, np.float32))
        assert np.abs(out - x).max() < 1e-4

    def test_se_oracle(self, rng):
        """SE on a tiny instance agrees with an explicit scalar computation."""
        x = rng.standard_normal((1, 4, 2, 2))
        w1, b1 = rng.standard_normal((4, 2)), rng.standard_normal(2)
        w2, b2 = rng.standard_normal((2, 4)), rng.standard_normal(4)
        out, _ = se_block(x, w1, b1, w2, b2)
        s = [x[0, c].mean() for c in range(4)]
        hidden = [max(0.0, sum(s[c] * w1[c, h] for c in range(4)) + b1[h]) for h in range(2)]
        gate = [1 / (1 + math.exp(-(sum(hidden[h] * w2[h, c] for h in range(2)) + b2[c]))) for c in range(4)]
        expected = np.stack([x[0, c] * gate[c] for c in range(4)])[None]
        assert np.abs(out - expected).max() < 1e-5

    def test_se_reduction_must_divide(self):
        """The SE reduction ratio must divide the channel count."""
        with pytest.raises(TensorShapeError):
            SEBlock(6, reduction=4)


class TestGradCheck:
    """Test the finite-difference harness on every primitive layer."""

    def test_linear(self, rng):
        """A linear layer checks to < 1e-4."""
        assert grad_check(Linear(3, 4, rng=rng), rng.standard_normal((2, 3)), eps=1e-3, probe_seed=1) < 1e-4

    def test_relu_away_from_kink(self, rng):
        """ReLU probed away from 0 checks to < 1e-3."""
        x = rng.uniform(0.1, 1.0, (2, 3, 2, 2)) * rng.choice([-1.0, 1.0], (2, 3, 2, 2))
        assert grad_check(ReLU(), x.astype(np.float32), probe_seed=2) < 1e-3

    def test_constant_output_layer(self, rng):
        """A constant layer has zero analytic and numeric gradients."""

        class Constant(Layer):
            def forward(self, x):
                return np.full_like(x, 2.0)

            def backward(self, grad_out):
                return np.zeros_like(grad_out)

        assert grad_check(Constant(), rng.standard_normal((1, 2, 2, 2))) == 0.0

    @pytest.mark.parametrize("make_layer,shape", [
        (lambda r: HardSwish(), (2, 3, 3, 3)),
        (lambda r: AvgPool2d(2, 2), (2, 3, 4, 4)),
        (lambda r: GlobalAvgPool(), (2, 3, 3, 3)),
        (lambda r: GlobalAvgPool(keepdims=True), (2, 3, 3, 3)),
        (lambda r: ChannelShuffle(2), (2, 6, 2, 2)),
        (lambda r: SEBlock(8, 4, rng=r), (2, 8, 3, 3)),
        (lambda r: SfrModule(4, 8, 2, 2, rng=r), (4, 4, 3, 3)),
        (lambda r: LgcLayer(8, 4, 2, 2, rng=r), (2, 8, 3, 3)),
    ])
    def test_primitive_layers(self, rng, make_layer, shape):
        """Every primitive layer passes the check at < 1e-2."""
        x = (rng.standard_normal(shape) * 2).astype(np.float32)
        assert grad_check(make_layer(rng), x, probe_seed=5, skip_kinks=True) < 1e-2

    def test_skip_kinks_drops_entries_near_hard_swish_corners(self):
        """Entries within eps of the -3 / +3 corners are skipped; smooth ones are still checked."""
        x = np.array([-3 + 5e-4, 3 - 5e-4, 0.7, -1.2]).reshape(1, 4, 1, 1)
        assert grad_check(HardSwish(), x, eps=1e-3) > 1e-2
        assert grad_check(HardSwish(), x, eps=1e-3, skip_kinks=True) < 1e-6

    def test_restores_parameters(self, rng):
        """The check leaves parameter dtype and values untouched."""
        layer = Conv2d(2, 2, 3, padding=1, rng=rng)
        before = layer.weight.data.copy()
        grad_check(layer, rng.standard_normal((1, 2, 3, 3)), max_probes=4)
        assert layer.weight.data.dtype == np.float32
        np.testing.assert_array_equal(layer.weight.data, before)


class TestLayerRegistry:
    """Test parameter naming, state dicts and masked convolution."""

    def test_state_dict_round_trip(self, rng):
        """load_state_dict restores values, statistics and masks."""
        net = build_network(toy_config(), seed=1)
        other = build_network(toy_config(), seed=2)
        net.prune_sfr_stage()
        other.load_state_dict(net.state_dict(), net.mask_dict())
        for (name, a), (_, b) in zip(net.named_parameters(), other.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)
        assert set(net.mask_dict()) == set(other.mask_dict())
        for name, mask in net.mask_dict().items():
            np.testing.assert_array_equal(mask, other.mask_dict()[name])

    def test_strict_load_reports_missing(self):
        """A strict load with missing entries raises KeyError."""
        net = build_network(toy_config())
        state = net.state_dict()
        state.pop("fc.bias")
        with pytest.raises(KeyError):
            net.load_state_dict(state)
        assert net.load_state_dict(state, strict=False) == ["fc.bias"]

    def test_shape_mismatch_rejected(self):
        """Entries of the wrong shape are rejected."""
        net = build_network(toy_config())
        state = net.state_dict()
        state["fc.bias"] = np.zeros(5, dtype=np.float32)
        with pytest.raises(TensorShapeError):
            net.load_state_dict(state)

    def test_masked_conv_gradient(self, rng):
        """Masked weight entries receive zero gradient."""
        layer = Conv2d(4, 4, 1, rng=rng)
        layer.weight.mask = np.ones_like(layer.weight.data)
        layer.weight.mask[1] = 0
        out = layer(rng.standard_normal((2, 4, 3, 3)).astype(np.float32))
        layer.zero_grad()
        layer.backward(np.ones_like(out))
        assert not layer.weight.grad[1].any()
        assert layer.weight.grad[0].any()


class TestSfrModule:
    """Test the sparse feature reactivation module."""

    def test_all_masks_zero(self, rng):
        """Fully pruned masks give a zero pre-BN conv output."""
        module = SfrModule(4, 6, 2, 2, rng=rng)
        module.weight.mask[:] = 0
        x = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
        assert not module.conv(x).any()

    def test_dense_case_matches_plain_pipeline(self, rng):
        """S=1 with all-ones masks equals an unmasked conv + BN + ReLU."""
        module = SfrModule(4, 6, 2, 1, rng=rng)
        x = rng.standard_normal((3, 4, 3, 3)).astype(np.float32)
        conv = conv2d(x, ConvWeights(module.weight.data.copy()))
        bn, _ = batch_norm(conv, np.ones(6, np.float32), np.zeros(6, np.float32), RunningStats.fresh(6), True)
        np.testing.assert_array_equal(sfr_forward(module, x), relu(bn))

    def test_masking_equals_weight_zeroing(self, rng):
        """O=4, I=4, G=2 with one row zeroed in group 1 matches explicit zeroing."""
        module = SfrModule(4, 4, 2, 2, rng=rng)
        module.weight.mask[2, 2:4] = 0
        zeroed = module.weight.data.copy()
        zeroed[2, 2:4] = 0
        x = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(module.conv(x), conv2d(x, ConvWeights(zeroed)))

    def test_channel_mismatch(self, rng):
        """x_new must carry I channels."""
        with pytest.raises(TensorShapeError):
            SfrModule(4, 4, 2, 2, rng=rng).forward(np.zeros((1, 3, 2, 2), np.float32))

    def test_reactivate(self, rng):
        """reactivate is an element-wise sum."""
        x = rng.standard_normal((2, 3, 2, 2)).astype(np.float32)
        y = rng.standard_normal((2, 3, 2, 2)).astype(np.float32)
        np.testing.assert_array_equal(reactivate(x, np.zeros_like(x)), x)
        np.testing.assert_array_equal(reactivate(np.zeros_like(y), y), y)
        np.testing.assert_array_equal(reactivate(x, y), x + y)
        with pytest.raises(TensorShapeError):
            reactivate(x, y[:, :2])

    def test_importance_hand_sums(self):
        """Group rows [1,-2] and [0.5,0.5] score [3, 1]; zero weights score 0."""
        module = SfrModule(4, 2, 2, 2)
        module.weight.data[:] = 0
        np.testing.assert_array_equal(importance(module, 0), [0.0, 0.0])
        module.weight.data[:, 0:2, 0, 0] = [[1.0, -2.0], [0.5, 0.5]]
        np.testing.assert_allclose(importance(module, 0), [3.0, 1.0])
        module.weight.mask[0, 0:2] = 0
        assert importance(module, 0)[0] == 0.0

    def test_importance_permutation_equivariant(self, rng):
        """Permuting input columns within a group keeps row importances."""
        module = SfrModule(8, 5, 2, 2, rng=rng)
        before = importance(module, 1)
        module.weight.data[:, 4:8] = module.weight.data[:, [7, 5, 4, 6]]
        np.testing.assert_allclose(importance(module, 1), before)

    def test_reduce_kernel(self):
        """Max |w| over the kernel, and |w| for 1x1 kernels."""
        w = np.array([[[[1.0, -5.0], [2.0, 0.0]]]])
        assert reduce_kernel(w)[0, 0] == 5.0
        assert reduce_kernel(np.zeros((1, 1, 3, 3)))[0, 0] == 0.0
        one = np.array([[-1.5, 2.0]]).reshape(1, 2, 1, 1)
        np.testing.assert_array_equal(reduce_kernel(ConvWeights(one)), [[1.5, 2.0]])

    def test_prune_order(self):
        """Importances [3,1,4,2] prune outputs 1, 3, 0 and keep 2."""
        module = SfrModule(1, 4, 1, 4)
        module.weight.data[:, 0, 0, 0] = [3.0, 1.0, 4.0, 2.0]
        prune_stage(module)
        assert module.pruned[0] == {1}
        prune_stage(module)
        assert module.pruned[0] == {1, 3}
        prune_stage(module)
        assert module.live_rows(0) == [2]
        with pytest.raises(StageOverflowError):
            prune_stage(module)

    def test_single_stage_halves_groups(self, rng):
        """O=8, S=2, G=2 keeps 4 live rows per group, column sums 4."""
        module = SfrModule(4, 8, 2, 2, rng=rng)
        module.prune_stage()
        masks = module.masks
        for g in range(2):
            assert len(module.live_rows(g)) == 4
            np.testing.assert_array_equal(masks[g].sum(axis=0), [4, 4])
        with pytest.raises(StageOverflowError):
            module.prune_stage()

    def test_dense_module_never_prunes(self, rng):
        """S=1 modules reject prune_stage and keep all-ones masks."""
        module = SfrModule(4, 4, 2, 1, rng=rng)
        with pytest.raises(StageOverflowError):
            module.prune_stage()
        assert module.masks.all()

    def test_ties_prune_lower_index(self):
        """Equal importances prune the lower output index first."""
        module = SfrModule(2, 4, 1, 4)
        module.weight.data[:] = 1.0
        module.prune_stage()
        assert module.pruned[0] == {0}

    def test_clamp_keeps_one_row(self, caplog):
        """Rounding never prunes the last live row of a group."""
        module = SfrModule(2, 5, 2, 4)
        for _ in range(3):
            module.prune_stage()
        assert all(len(module.live_rows(g)) == 1 for g in range(2))
        assert "clamped" in caplog.text

    def test_pruned_weights_frozen(self, rng):
        """Gradient steps leave pruned weights bit-identical."""
        module = SfrModule(4, 8, 2, 4, rng=rng)
        module.prune_stage()
        frozen = module.weight.mask == 0
        snapshot = module.weight.data[frozen].copy()
        buffers = {}
        for _ in range(5):
            module.zero_grad()
            out = module(rng.standard_normal((4, 4, 3, 3)).astype(np.float32))
            module.backward(rng.standard_normal(out.shape).astype(np.float32))
            buffers = sgd_step(list(module.named_parameters()), lr=0.5, buffers=buffers)
        np.testing.assert_array_equal(module.weight.data[frozen], snapshot)

    @pytest.mark.parametrize("out_channels,sparse_factor,groups", [(16, 4, 4), (8, 2, 2), (12, 3, 4), (10, 4, 2)])
    def test_schedule_driven_mask_invariant(self, rng, out_channels, sparse_factor, groups):
        """Full schedules leave O - (S-1)*ceil(O/S) live rows per group, column-constant."""
        module = SfrModule(2 * groups, out_channels, groups, sparse_factor, rng=rng)
        epochs = 4 * (sparse_factor - 1)
        schedule = build_schedule(epochs, sparse_factor)
        previous = [set() for _ in range(groups)]
        for epoch in range(1, epochs + 1):
            for _ in range(schedule.prune_events.count(epoch)):
                module.prune_stage()
                assert all(previous[g] <= module.pruned[g] for g in range(groups))
                previous = [set(p) for p in module.pruned]

        expected = max(1, out_channels - (sparse_factor - 1) * math.ceil(out_channels / sparse_factor))
        masks = module.masks
        for g in range(groups):
            rows = masks[g]
            assert all(row.all() or not row.any() for row in rows)
            assert int(rows.all(axis=1).sum()) == expected
            np.testing.assert_array_equal(rows.sum(axis=0), np.full(rows.shape[1], expected))


class TestStageSchedule:
    """Test the sparsification stage schedule."""

    def test_120_epochs_s4(self):
        """E=120, S=4 gives stages [20,20,20], optimization 60."""
        schedule = build_schedule(120, 4)
        assert schedule.sparsification_stage_epochs == [20, 20, 20]
        assert schedule.optimization_epochs == 60
        assert schedule.prune_events == [20, 40, 60]

    def test_300_epochs_s4(self):
        """E=300, S=4 gives stages of 50 and optimization 150."""
        schedule = build_schedule(300, 4)
        assert schedule.sparsification_stage_epochs == [50, 50, 50]
        assert schedule.optimization_epochs == 150

    def test_dense_schedule(self):
        """S=1 has no sparsification stages."""
        schedule = build_schedule(10, 1)
        assert schedule.sparsification_stage_epochs == []
        assert schedule.optimization_epochs == 10
        assert schedule.prune_events == []

    def test_remainder_goes_to_optimization(self):
        """Stage lengths are floored and totals always sum to E."""
        schedule = build_schedule(13, 3)
        assert schedule.sparsification_stage_epochs == [3, 3]
        assert sum(schedule.sparsification_stage_epochs) + schedule.optimization_epochs == 13
        assert schedule.stages_due(6) == 2

    def test_too_few_epochs(self):
        """E < 2(S-1) is rejected."""
        with pytest.raises(ScheduleError):
            build_schedule(5, 4)


class TestLgcLayer:
    """Test the learned group convolution."""

    def test_all_live_is_dense_conv(self, rng):
        """With every input live the layer is exactly a dense 1x1 convolution."""
        layer = LgcLayer(6, 4, 2, 1, rng=rng)
        x = rng.standard_normal((2, 6, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(lgc_forward(layer, x), conv2d(x, ConvWeights(layer.weight.data)))

    def test_zero_group_mask(self, rng):
        """A group whose mask is zero outputs zeros."""
        layer = LgcLayer(6, 4, 2, 2, rng=rng)
        layer.weight.mask[layer.group_rows(1)] = 0
        out = layer(rng.standard_normal((2, 6, 3, 3)).astype(np.float32))
        assert not out[:, 2:].any() and out[:, :2].any()

    def test_masking_equals_zeroing(self, rng):
        """Masked layer equals explicit weight zeroing exactly."""
        layer = LgcLayer(8, 4, 2, 4, rng=rng)
        layer.prune_stage()
        zeroed = layer.weight.data * layer.weight.mask
        x = rng.standard_normal((2, 8, 2, 2)).astype(np.float32)
        np.testing.assert_array_equal(layer(x), conv2d(x, ConvWeights(zeroed)))

    def test_importance(self):
        """Group rows [[1,-2],[3,0]] give column importances [4, 2]."""
        layer = LgcLayer(2, 4, 2, 2)
        layer.weight.data[:] = 0
        np.testing.assert_array_equal(lgc_importance(layer, 0), [0.0, 0.0])
        layer.weight.data[0:2, :, 0, 0] = [[1.0, -2.0], [3.0, 0.0]]
        np.testing.assert_allclose(lgc_importance(layer, 0), [4.0, 2.0])
        layer.weight.mask[0:2, 0] = 0
        assert lgc_importance(layer, 0)[0] == 0.0

    def test_three_stages(self, rng):
        """I=8, C=4, G=2: three stages of 2 columns leave 2 live inputs per group."""
        layer = LgcLayer(8, 4, 2, 4, rng=rng)
        for stage in range(1, 4):
            lgc_prune_stage(layer)
            assert all(len(layer.live_inputs(g)) == 8 - 2 * stage for g in range(2))
        assert layer.fully_condensed
        with pytest.raises(StageOverflowError):
            layer.prune_stage()

    def test_dense_layer_never_prunes(self, rng):
        """C=1 rejects prune_stage."""
        with pytest.raises(StageOverflowError):
            LgcLayer(4, 4, 2, 1, rng=rng).prune_stage()

    def test_increasing_importance_prunes_in_order(self):
        """Strictly increasing column importance prunes columns 0, 1, ... first."""
        layer = LgcLayer(8, 4, 2, 4)
        layer.weight.data[:, :, 0, 0] = np.arange(1, 9, dtype=np.float32)
        layer.prune_stage()
        assert layer.live_inputs(0) == [2, 3, 4, 5, 6, 7]
        layer.prune_stage()
        assert layer.live_inputs(1) == [4, 5, 6, 7]

    def test_channel_mismatch(self, rng):
        """Input channels must match."""
        with pytest.raises(TensorShapeError):
            LgcLayer(4, 4, 2, 2, rng=rng).forward(np.zeros((1, 5, 2, 2), np.float32))


class TestNetworkAssembly:
    """Test configs, dense layers and the full network."""

    def test_imagenet_presets(self):
        """A and B presets carry the published depths, growth rates and factors."""
        a = preset_config("cnv2-a")
        assert [b.layers for b in a.blocks] == [1, 1, 4, 6, 8]
        assert [b.growth for b in a.blocks] == [8, 8, 16, 32, 64]
        assert a.condense_factor == a.sparse_factor == a.groups == 8
        b = preset_config("cnv2-b")
        assert [blk.layers for blk in b.blocks] == [2, 4, 6, 8, 6]
        assert [blk.growth for blk in b.blocks] == [6, 12, 24, 48, 96]
        assert b.condense_factor == b.sparse_factor == b.groups == 6

    def test_cifar_preset(self):
        """The CIFAR preset has 3 blocks, k = 8-16-32 and C=S=G=4."""
        config = preset_config("cnv2-cifar")
        assert [b.growth for b in config.blocks] == [8, 16, 32]
        assert config.condense_factor == config.sparse_factor == config.groups == 4
        assert config.stem.stride == 1 and config.stem_channels == 16

    def test_unknown_preset(self):
        """Unknown preset names raise ConfigError."""
        with pytest.raises(ConfigError):
            preset_config("cnv2-z")

    def test_validation(self):
        """Invalid configurations are reported and refused."""
        assert toy_config(blocks=[BlockSpec(2, 6)]).validate()
        bad = toy_config(dataset="imagenet")
        assert any("5 blocks" in e for e in bad.validate())
        with pytest.raises(ConfigError):
            Network(bad)

    def test_wrongly_typed_values(self):
        """Values of the wrong type are reported as config problems, not TypeErrors."""
        data = preset_config("toy").to_dict()
        data["blocks"][0]["layers"] = "two"
        data["blocks"][1]["se"] = 1
        data["sparse_factor"] = 2.5
        errors = NetworkConfig.from_dict(data).validate()
        assert any("block 0 layers" in e for e in errors)
        assert any("block 1 se" in e for e in errors)
        assert any("sparse_factor" in e for e in errors)
        with pytest.raises(ConfigError):
            NetworkConfig.from_dict(data).check()

    def test_config_round_trip(self):
        """to_dict / from_dict reproduce the config; unknown keys are rejected."""
        config = preset_config("cnv2-b")
        assert NetworkConfig.from_dict(config.to_dict()) == config
        data = config.to_dict()
        data["depth"] = 3
        with pytest.raises(ConfigError):
            NetworkConfig.from_dict(data)

    def test_block_width_bookkeeping(self):
        """Each block adds d * k channels to the buffer."""
        config = preset_config("cnv2-c")
        for (w_in, w_out), block in zip(config.block_widths(), config.blocks):
            assert w_out == w_in + block.layers * block.growth

    def test_dense_layer_appends_growth(self, rng):
        """One layer with k=4 on an 8-channel buffer yields 12 channels."""
        layer = SfrDenseLayer(8, 4, toy_config(), rng=rng)
        buffer = FeatureBuffer.from_input(rng.standard_normal((2, 8, 4, 4)).astype(np.float32), "stem")
        out = dense_layer_forward(layer, buffer, "l0")
        assert out.width == 12
        assert [s.owner for s in out.segments] == ["stem", "l0"]
        assert out.segment("l0").shape == (2, 4, 4, 4)

    def test_fully_pruned_sfr_leaves_buffer(self, rng):
        """With every SFR weight pruned only the append happens."""
        layer = SfrDenseLayer(8, 4, toy_config(), rng=rng)
        layer.sfr.weight.mask[:] = 0
        x = rng.standard_normal((2, 8, 4, 4)).astype(np.float32)
        out = layer(x)
        np.testing.assert_array_equal(out[:, :8], x)

    def test_second_layer_sees_reactivated_buffer(self, rng):
        """Layer 2 consumes layer 1's reactivated segments, per a step-by-step interpreter."""
        config = toy_config()
        net = build_network(config, seed=3)
        block = net.blocks[0]
        x = rng.standard_normal((2, block.in_width, 8, 8)).astype(np.float32)

        first, second = block.layers
        x_new = first.new_features(x)
        y = first.sfr(x_new)
        assert np.abs(y).max() > 0
        buffer = np.concatenate([x + y, x_new], axis=1)
        x_new2 = second.new_features(buffer)
        expected = np.concatenate([buffer + second.sfr(x_new2), x_new2], axis=1)

        np.testing.assert_array_equal(block.forward(x), expected)

    def test_imagenet_logits_shape(self, rng):
        """CondenseNetV2-A maps (1,3,224,224) to (1,1000) logits."""
        net = build_network(preset_config("cnv2-a"))
        net.eval()
        x = rng.standard_normal((1, 3, 224, 224)).astype(np.float32)
        assert network_forward(net, x).shape == (1, 1000)

    def test_cifar_logits_shape(self, rng):
        """The CIFAR network maps (1,3,32,32) to (1,10) logits."""
        net = build_network(preset_config("cnv2-cifar"))
        net.eval()
        assert network_forward(net, rng.standard_normal((1, 3, 32, 32)).astype(np.float32)).shape == (1, 10)

    def test_resolution_mismatch(self):
        """Inputs at the wrong resolution are rejected."""
        net = build_network(toy_config())
        with pytest.raises(TensorShapeError):
            net.forward(np.zeros((1, 3, 16, 16), np.float32))

    def test_end_to_end_gradients(self, rng):
        """The two-block toy network passes the finite-difference check."""
        config = toy_config(blocks=[BlockSpec(2, 4), BlockSpec(2, 8, se=True, hs=True)])
        net = build_network(config, seed=5)
        x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
        assert grad_check(net, x, eps=1e-5, probe_seed=11, max_probes=6, skip_kinks=True) < 1e-2

    def test_backward_respects_masks(self, rng):
        """network_backward leaves masked gradients at zero."""
        net = build_network(toy_config(), seed=2)
        net.prune_sfr_stage()
        net.prune_lgc_stage()
        net.zero_grad()
        logits = net.forward(rng.standard_normal((4, 3, 8, 8)).astype(np.float32))
        grads = network_backward(net, np.ones_like(logits))
        for name, param in net.named_parameters():
            if param.mask is not None:
                assert not grads[name][param.mask == 0].any(), name


class TestCostAccounting:
    """Test FLOPs and parameter counts."""

    def test_single_conv_cost(self):
        """A dense 1x1 conv, I=8, O=16 on 4x4 costs 2048 multiply-adds and 128 weights."""
        assert conv_cost(8 * 16, (4, 4)) == (2048, 128)

    @pytest.mark.parametrize("name", ["cnv2-a", "cnv2-b", "cnv2-c"])
    def test_imagenet_costs_near_published(self, name):
        """Deployed FLOPs / params land within the published tolerances."""
        ref = reference_values()[name]
        net = Network(preset_config(name))
        flops, params = count_flops(net), count_params(net)
        assert abs(flops - ref["flops"]) <= ref["flops_tolerance"] * ref["flops"]
        assert abs(params - ref["params"]) <= ref["params_tolerance"] * ref["params"]

    @pytest.mark.parametrize("name", ["cnv2-110", "cnv2-146"])
    def test_cifar_params_near_published(self, name):
        """The deeper CIFAR presets match the published parameter counts."""
        ref = reference_values()[name]
        params = count_params(Network(preset_config(name)))
        assert abs(params - ref["params"]) <= ref["params_tolerance"] * ref["params"]

    def test_dense_count_dominates_deployed(self):
        """The training form costs more than the deployed form unless nothing is pruned."""
        net = build_network(toy_config())
        assert count_params(net, deployed=False) > count_params(net)
        assert count_flops(net, deployed=False) > count_flops(net)
        dense = build_network(toy_config(condense_factor=1, sparse_factor=1))
        assert count_params(dense, deployed=False) == count_params(dense)

    def test_current_masks_track_pruning(self):
        """The undeployed count follows the masks as stages complete."""
        net = build_network(toy_config())
        for _ in range(3):
            net.prune_sfr_stage()
            net.prune_lgc_stage()
        assert cost_report(net, deployed=False).flops == count_flops(net)

    def test_sfr_free_net_has_no_sfr_cost(self):
        """CondenseNet twins report zero SFR cost."""
        report = cost_report(Network(preset_config("condensenet-a")))
        assert report.flops_by_kind["sfr"] == 0 and report.params_by_kind["sfr"] == 0
