"""
Layers

Stateful wrappers around the tensor-core kernels. Each layer caches what its backward
pass needs, accumulates parameter gradients into its Parameter objects and returns the
gradient with respect to its input.
"""

import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .exceptions import TensorShapeError
from .tensor_core import (
    BN_EPS, ConvWeights, Parameter, RunningStats,
    conv2d, conv2d_backward, batch_norm, batch_norm_backward,
    relu, relu_backward, hard_swish, hard_swish_backward,
    avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward,
    fully_connected, fully_connected_backward,
    channel_shuffle, channel_shuffle_backward,
    se_block, se_block_backward,
)

logger = logging.getLogger(__name__)


def he_normal(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))).astype(np.float32)


class Layer:
    """Base class: parameter / buffer registry plus train-eval switch."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Layer):
            self._children[name] = value
        elif isinstance(value, RunningStats):
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def add_child(self, name: str, layer: "Layer") -> "Layer":
        setattr(self, name, layer)
        return layer

    def children(self) -> Iterator[Tuple[str, "Layer"]]:
        return iter(self._children.items())

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, RunningStats]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        for _, child in self._children.items():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter value and running statistic, keyed by dotted name."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, stats in self.named_buffers():
            state[f"{name}.mean"] = stats.mean.copy()
            state[f"{name}.var"] = stats.var.copy()
        return state

    def mask_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.mask.copy() for name, p in self.named_parameters() if p.mask is not None}

    def load_state_dict(self, state: Dict[str, np.ndarray], masks: Optional[Dict[str, np.ndarray]] = None,
                        strict: bool = True) -> List[str]:
        """
        Copy values into this layer's parameters and statistics.

        Returns:
            Names present in this layer but absent from ``state`` (empty when strict)
        """
        targets: Dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        for name, stats in self.named_buffers():
            targets[f"{name}.mean"] = stats.mean
            targets[f"{name}.var"] = stats.var

        missing = [name for name in targets if name not in state]
        if strict and missing:
            raise KeyError(f"missing entries: {', '.join(missing[:5])}")
        for name, dest in targets.items():
            if name not in state:
                continue
            src = np.asarray(state[name])
            if src.shape != dest.shape:
                raise TensorShapeError(f"load_state_dict[{name}]", f"shape {dest.shape}", src.shape)
            np.copyto(dest, src.astype(dest.dtype, copy=False))

        if masks:
            for name, param in self.named_parameters():
                if name in masks:
                    param.mask = np.asarray(masks[name]).astype(param.data.dtype)
        return missing


class Conv2d(Layer):
    """Bias-free grouped convolution; honors the weight mask in both directions."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1, stride: int = 1,
                 padding: int = 0, groups: int = 1, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise TensorShapeError(
                "Conv2d", f"channels divisible by groups={groups}", (in_channels, out_channels)
            )
        rng = rng or np.random.default_rng(0)
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.weight = ConvWeights(
            he_normal((out_channels, in_channels // groups, kernel_size, kernel_size), fan_in, rng),
            groups=groups,
        )
        self.stride = stride
        self.padding = padding
        self._x = None

    @property
    def in_channels(self) -> int:
        return self.weight.in_channels

    @property
    def out_channels(self) -> int:
        return self.weight.out_channels

    def forward(self, x):
        self._x = x
        return conv2d(x, self.weight, self.stride, self.padding, weight_data=self.weight.effective)

    def backward(self, grad_out):
        grad_x, grad_w = conv2d_backward(
            self._x, self.weight, grad_out, self.stride, self.padding, weight_data=self.weight.effective
        )
        if self.weight.mask is not None:
            grad_w = grad_w * self.weight.mask
        self.weight.accumulate(grad_w)
        return grad_x


class BatchNorm2d(Layer):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=np.float32), decay=False)
        self.beta = Parameter(np.zeros(channels, dtype=np.float32), decay=False)
        self.running = RunningStats.fresh(channels)
        self._cache = None

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def forward(self, x):
        out, self._cache = batch_norm(x, self.gamma.data, self.beta.data, self.running, self.training)
        return out

    def backward(self, grad_out):
        grad_x, grad_gamma, grad_beta = batch_norm_backward(grad_out, self._cache)
        self.gamma.accumulate(grad_gamma)
        self.beta.accumulate(grad_beta)
        return grad_x

    def affine(self) -> Tuple[np.ndarray, np.ndarray]:
        """Eval-mode BN as a per-channel (scale, shift) pair."""
        inv_std = 1.0 / np.sqrt(self.running.var.astype(np.float64) + BN_EPS)
        scale = self.gamma.data.astype(np.float64) * inv_std
        shift = self.beta.data.astype(np.float64) - self.running.mean.astype(np.float64) * scale
        return scale.astype(np.float32), shift.astype(np.float32)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._x = None

    def forward(self, x):
        self._x = x
        return relu(x)

    def backward(self, grad_out):
        return relu_backward(self._x, grad_out)


class HardSwish(Layer):
    def __init__(self):
        super().__init__()
        self._x = None

    def forward(self, x):
        self._x = x
        return hard_swish(x)

    def backward(self, grad_out):
        return hard_swish_backward(self._x, grad_out)


def activation(kind: str) -> Layer:
    """Build an activation layer by name ('relu' or 'hswish')."""
    if kind == "relu":
        return ReLU()
    if kind in ("hswish", "hard_swish", "hs"):
        return HardSwish()
    raise ValueError(f"Unknown activation: {kind}")


class ChannelShuffle(Layer):
    def __init__(self, groups: int):
        super().__init__()
        self.groups = groups

    def forward(self, x):
        return channel_shuffle(x, self.groups)

    def backward(self, grad_out):
        return channel_shuffle_backward(grad_out, self.groups)


class AvgPool2d(Layer):
    def __init__(self, kernel_size: int = 2, stride: int = 2):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return avg_pool(x, self.kernel_size, self.stride)

    def backward(self, grad_out):
        return avg_pool_backward(self._shape, grad_out, self.kernel_size, self.stride)


class GlobalAvgPool(Layer):
    """Global average pool; flattened to (N, C) unless ``keepdims``."""

    def __init__(self, keepdims: bool = False):
        super().__init__()
        self.keepdims = keepdims
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        pooled = global_avg_pool(x)
        return pooled if self.keepdims else pooled.reshape(x.shape[0], x.shape[1])

    def backward(self, grad_out):
        return global_avg_pool_backward(self._shape, grad_out.reshape(self._shape[0], self._shape[1], 1, 1))


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (in_features, out_features)).astype(np.float32))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32), decay=False)
        self._x = None

    def forward(self, x):
        self._x = x
        return fully_connected(x, self.weight.data, self.bias.data)

    def backward(self, grad_out):
        grad_x, grad_w, grad_b = fully_connected_backward(self._x, self.weight.data, grad_out)
        self.weight.accumulate(grad_w)
        self.bias.accumulate(grad_b)
        return grad_x


class SEBlock(Layer):
    """Squeeze-and-excitation gate with reduction ratio r."""

    def __init__(self, channels: int, reduction: int = 4, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise TensorShapeError("SEBlock", f"channels divisible by reduction={reduction}", str(channels))
        rng = rng or np.random.default_rng(0)
        hidden = channels // reduction
        self.channels = channels
        self.reduction = reduction
        self.w1 = Parameter(he_normal((channels, hidden), channels, rng))
        self.b1 = Parameter(np.zeros(hidden, dtype=np.float32), decay=False)
        self.w2 = Parameter(he_normal((hidden, channels), hidden, rng))
        self.b2 = Parameter(np.zeros(channels, dtype=np.float32), decay=False)
        self._cache = None

    def forward(self, x):
        out, self._cache = se_block(x, self.w1.data, self.b1.data, self.w2.data, self.b2.data)
        return out

    def backward(self, grad_out):
        grad_x, gw1, gb1, gw2, gb2 = se_block_backward(grad_out, self._cache, self.w1.data, self.w2.data)
        self.w1.accumulate(gw1)
        self.b1.accumulate(gb1)
        self.w2.accumulate(gw2)
        self.b2.accumulate(gb2)
        return grad_x


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


def grad_check(layer: Layer, x: np.ndarray, eps: float = 1e-3, probe_seed: Optional[int] = None,
               max_probes: Optional[int] = None, skip_kinks: bool = False, check_input: bool = True,
               rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare analytic gradients of ``layer`` against central finite differences.

    The scalar loss is the sum of the outputs, optionally weighted by a fixed random
    probe (``probe_seed``) so that gradients invariant to a plain sum are exercised too.
    Parameters and input are promoted to float64 for the check and restored afterwards,
    running statistics included.

    Args:
        layer: Layer exposing forward / backward
        x: Input batch
        eps: Finite-difference step
        probe_seed: Seed for random loss weights (None = plain sum)
        max_probes: Check at most this many entries per array (sampled)
        skip_kinks: Drop entries whose central differences at eps and eps / 2 disagree
            (an activation kink lies within eps)
        check_input: Also check the gradient with respect to the input
        rng: Sampler for ``max_probes``

    Returns:
        Maximum relative error |a - n| / max(|a| + |n|, 1e-3) over all probed entries
    """
    rng = rng or np.random.default_rng(0)
    named = list(layer.named_parameters())
    saved_params = [(p, p.data, p.grad) for _, p in named]
    saved_stats = [(s, s.mean.copy(), s.var.copy()) for _, s in layer.named_buffers()]

    try:
        for p, data, _ in saved_params:
            p.data = data.astype(np.float64)
            p.zero_grad()
        x64 = np.asarray(x, dtype=np.float64).copy()

        out = layer.forward(x64)
        probe = np.ones_like(out)
        if probe_seed is not None:
            probe = np.random.default_rng(probe_seed).standard_normal(out.shape)
        grad_x = layer.backward(probe)

        def loss() -> float:
            for stats, mean, var in saved_stats:
                stats.mean[...] = mean
                stats.var[...] = var
            return float(np.sum(layer.forward(x64) * probe))

        targets = [(p.data, p.grad, name) for name, p in named]
        if check_input:
            targets.append((x64, grad_x, "input"))

        worst = 0.0
        for array, analytic, name in targets:
            flat = array.reshape(-1)
            analytic = np.asarray(analytic).reshape(-1)
            indices = np.arange(flat.size)
            if max_probes is not None and flat.size > max_probes:
                indices = rng.choice(flat.size, size=max_probes, replace=False)
            for idx in indices:
                original = flat[idx]
                flat[idx] = original + eps
                plus = loss()
                flat[idx] = original - eps
                minus = loss()
                flat[idx] = original
                numeric = (plus - minus) / (2 * eps)
                if skip_kinks:
                    # a smooth loss gives the same central difference at eps and eps / 2
                    flat[idx] = original + eps / 2
                    half_plus = loss()
                    flat[idx] = original - eps / 2
                    half_minus = loss()
                    flat[idx] = original
                    half = (half_plus - half_minus) / eps
                    if abs(numeric - half) > 1e-3 * (abs(numeric) + abs(half)) + 1e-6:
                        continue
                denom = max(abs(analytic[idx]) + abs(numeric), 1e-3)
                err = abs(analytic[idx] - numeric) / denom
                if err > worst:
                    logger.debug(f"grad_check {name}[{idx}]: analytic={analytic[idx]:.6g} numeric={numeric:.6g}")
                    worst = err
        return worst
    finally:
        for p, data, grad in saved_params:
            p.data = data
            p.grad = grad
        for stats, mean, var in saved_stats:
            stats.mean[...] = mean
            stats.var[...] = var
