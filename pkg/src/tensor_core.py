"""
Tensor Core

Rank-4 numpy kernels with explicit forward and backward passes for every primitive
the dense network needs: direct (grouped) convolution, batch normalization,
activations, pooling, affine maps, channel shuffle and squeeze-and-excitation.

All kernels are pure functions of their arguments. They keep the floating dtype of
their inputs (float32 in normal operation, float64 while gradients are checked) and
accumulate reductions in float64.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .exceptions import TensorShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

ArrayLike4 = Union["Tensor4", np.ndarray]


def _as_array(x: ArrayLike4) -> np.ndarray:
    """Unwrap a Tensor4 and make sure the result is a floating array."""
    if isinstance(x, Tensor4):
        return x.data
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


def _require_rank4(op: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise TensorShapeError(op, "a rank-4 (N, C, H, W) array", x.shape)


@dataclass
class Tensor4:
    """Dense (batch, channel, height, width) activation with an optional gradient buffer."""
    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        _require_rank4("Tensor4", self.data)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise TensorShapeError("Tensor4.grad", f"shape {self.data.shape}", self.grad.shape)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int, int], dtype=np.float32) -> "Tensor4":
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def randn(cls, shape: Tuple[int, int, int, int], rng: np.random.Generator) -> "Tensor4":
        return cls(rng.standard_normal(shape).astype(np.float32))


@dataclass
class Parameter:
    """A trainable array with gradient buffer and optional binary mask.

    When a mask is present the layer sees ``data * mask``; the optimizer multiplies
    every update by the same mask so masked entries keep their stored values.
    """
    data: np.ndarray
    grad: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    decay: bool = True

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None or self.grad.shape != self.data.shape:
            self.grad = np.zeros_like(self.data)
        self.grad += grad.astype(self.grad.dtype, copy=False)

    @property
    def effective(self) -> np.ndarray:
        if self.mask is None:
            return self.data
        return self.data * self.mask

    @property
    def live_count(self) -> int:
        if self.mask is None:
            return int(self.data.size)
        return int(np.count_nonzero(self.mask))


@dataclass
class ConvWeights(Parameter):
    """Convolution filters of shape (O, I/G, k_h, k_w) split into G groups."""
    groups: int = 1

    def __post_init__(self):
        _require_rank4("ConvWeights", self.data)
        if self.groups < 1 or self.data.shape[0] % self.groups:
            raise TensorShapeError(
                "ConvWeights", f"out_channels divisible by groups={self.groups}", self.data.shape
            )

    @property
    def out_channels(self) -> int:
        return self.data.shape[0]

    @property
    def in_per_group(self) -> int:
        return self.data.shape[1]

    @property
    def in_channels(self) -> int:
        return self.data.shape[1] * self.groups

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]


@dataclass
class RunningStats:
    """Per-channel running mean / variance used by eval-mode batch norm."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _conv_geometry(x: np.ndarray, w: np.ndarray, groups: int, stride: int, padding: int):
    _require_rank4("conv2d", x)
    N, C, H, W = x.shape
    O, Ig, kh, kw = w.shape
    if stride < 1:
        raise TensorShapeError("conv2d", "stride >= 1", str(stride))
    if C != Ig * groups:
        raise TensorShapeError("conv2d", f"{Ig * groups} input channels ({groups} groups x {Ig})", x.shape)
    if O % groups:
        raise TensorShapeError("conv2d", f"out_channels divisible by {groups}", w.shape)
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise TensorShapeError("conv2d", f"spatial size >= kernel {kh}x{kw}", x.shape)
    return N, C, H, W, O, Ig, kh, kw, Ho, Wo


def conv2d(x: ArrayLike4, weights: ConvWeights, stride: int = 1, padding: int = 0,
           weight_data: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Direct grouped convolution without bias.

    Args:
        x: Input of shape (N, C, H, W)
        weights: Filters (O, C/G, k_h, k_w) with ``weights.groups`` groups
        stride: Spatial stride
        padding: Zero padding on every border
        weight_data: Optional override of the filter values (e.g. masked weights)

    Returns:
        Output of shape (N, O, H_out, W_out)
    """
    x = _as_array(x)
    w = weights.data if weight_data is None else weight_data
    G = weights.groups
    N, C, H, W, O, Ig, kh, kw, Ho, Wo = _conv_geometry(x, w, G, stride, padding)

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    xg = xp.reshape(N, G, Ig, xp.shape[2], xp.shape[3])
    wg = w.reshape(G, O // G, Ig, kh, kw)
    out = np.zeros((N, G, O // G, Ho, Wo), dtype=np.result_type(x, w))

    for i in range(kh):
        for j in range(kw):
            patch = xg[:, :, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
            out += np.einsum("ngchw,goc->ngohw", patch, wg[:, :, :, i, j], optimize=True)

    return out.reshape(N, O, Ho, Wo)


def conv2d_backward(x: ArrayLike4, weights: ConvWeights, grad_out: np.ndarray, stride: int = 1,
                    padding: int = 0, weight_data: Optional[np.ndarray] = None
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` with respect to its input and its filters."""
    x = _as_array(x)
    w = weights.data if weight_data is None else weight_data
    G = weights.groups
    N, C, H, W, O, Ig, kh, kw, Ho, Wo = _conv_geometry(x, w, G, stride, padding)
    if grad_out.shape != (N, O, Ho, Wo):
        raise TensorShapeError("conv2d_backward", f"grad_out of shape {(N, O, Ho, Wo)}", grad_out.shape)

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    Hp, Wp = xp.shape[2], xp.shape[3]
    xg = xp.reshape(N, G, Ig, Hp, Wp)
    wg = w.reshape(G, O // G, Ig, kh, kw)
    gout = grad_out.reshape(N, G, O // G, Ho, Wo)

    dtype = np.result_type(x, w, grad_out)
    grad_xg = np.zeros((N, G, Ig, Hp, Wp), dtype=dtype)
    grad_wg = np.zeros((G, O // G, Ig, kh, kw), dtype=dtype)

    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * (Ho - 1) + 1, stride)
            cols = slice(j, j + stride * (Wo - 1) + 1, stride)
            patch = xg[:, :, :, rows, cols]
            grad_wg[:, :, :, i, j] = np.einsum("ngchw,ngohw->goc", patch, gout, optimize=True)
            grad_xg[:, :, :, rows, cols] += np.einsum("ngohw,goc->ngchw", gout, wg[:, :, :, i, j], optimize=True)

    grad_x = grad_xg.reshape(N, C, Hp, Wp)
    if padding:
        grad_x = grad_x[:, :, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(grad_x), grad_wg.reshape(w.shape)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool


def batch_norm(x: ArrayLike4, gamma: np.ndarray, beta: np.ndarray, running: RunningStats,
               training: bool, eps: float = BN_EPS) -> Tuple[np.ndarray, BatchNormCache]:
    """
    Per-channel batch normalization.

    Train mode normalizes with the batch statistics over (N, H, W) and moves the running
    statistics by ``running.momentum``; eval mode uses the running statistics only.
    """
    x = _as_array(x)
    _require_rank4("batch_norm", x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise TensorShapeError("batch_norm", f"gamma/beta of length {C}", gamma.shape)

    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.var(axis=(0, 2, 3), dtype=np.float64)
        m = running.momentum
        unbiased = var * count / (count - 1) if count > 1 else var
        running.mean[...] = (1.0 - m) * running.mean + m * mean
        running.var[...] = (1.0 - m) * running.var + m * unbiased
    else:
        mean = running.mean.astype(np.float64)
        var = running.var.astype(np.float64)

    inv_std = 1.0 / np.sqrt(var + eps)
    dtype = x.dtype
    xhat = (x - mean.astype(dtype).reshape(1, C, 1, 1)) * inv_std.astype(dtype).reshape(1, C, 1, 1)
    out = gamma.astype(dtype).reshape(1, C, 1, 1) * xhat + beta.astype(dtype).reshape(1, C, 1, 1)
    return out, BatchNormCache(xhat=xhat, inv_std=inv_std, gamma=gamma, training=training)


def batch_norm_backward(grad_out: np.ndarray, cache: BatchNormCache
                        ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_input, grad_gamma, grad_beta) for :func:`batch_norm`."""
    xhat = cache.xhat
    C = xhat.shape[1]
    dtype = np.result_type(xhat, grad_out)
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    grad_beta = grad_out.sum(axis=(0, 2, 3), dtype=np.float64)

    gamma = cache.gamma.astype(np.float64)
    inv_std = cache.inv_std
    if not cache.training:
        scale = (gamma * inv_std).astype(dtype).reshape(1, C, 1, 1)
        return grad_out * scale, grad_gamma, grad_beta

    count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dxhat = grad_out * gamma.astype(dtype).reshape(1, C, 1, 1)
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), dtype=np.float64)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    grad_x = (inv_std / count).astype(dtype).reshape(1, C, 1, 1) * (
        count * dxhat
        - sum_dxhat.astype(dtype).reshape(1, C, 1, 1)
        - xhat * sum_dxhat_xhat.astype(dtype).reshape(1, C, 1, 1)
    )
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: ArrayLike4) -> np.ndarray:
    x = _as_array(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def hard_swish(x: ArrayLike4) -> np.ndarray:
    """x * clamp(x + 3, 0, 6) / 6."""
    x = _as_array(x)
    return x * np.clip(x + 3, 0, 6) / 6


def hard_swish_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    slope = np.where(x < -3, 0.0, np.where(x > 3, 1.0, (2 * x + 3) / 6)).astype(x.dtype)
    return grad_out * slope


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def avg_pool(x: ArrayLike4, k: int, stride: int) -> np.ndarray:
    """Mean over every k x k window taken with the given stride."""
    x = _as_array(x)
    _require_rank4("avg_pool", x)
    N, C, H, W = x.shape
    if H < k or W < k:
        raise TensorShapeError("avg_pool", f"spatial size >= window {k}x{k}", x.shape)
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    acc = np.zeros((N, C, Ho, Wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            acc += x[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
    return (acc / (k * k)).astype(x.dtype)


def avg_pool_backward(input_shape: Tuple[int, ...], grad_out: np.ndarray, k: int, stride: int) -> np.ndarray:
    N, C, H, W = input_shape
    Ho, Wo = grad_out.shape[2], grad_out.shape[3]
    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    share = grad_out / (k * k)
    for i in range(k):
        for j in range(k):
            grad_x[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += share
    return grad_x


def global_avg_pool(x: ArrayLike4) -> np.ndarray:
    """Mean over the full spatial extent; returns (N, C, 1, 1)."""
    x = _as_array(x)
    _require_rank4("global_avg_pool", x)
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(input_shape: Tuple[int, ...], grad_out: np.ndarray) -> np.ndarray:
    H, W = input_shape[2], input_shape[3]
    return np.broadcast_to(grad_out / (H * W), input_shape).astype(grad_out.dtype)


# ---------------------------------------------------------------------------
# Affine map
# ---------------------------------------------------------------------------

def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map of an (N, C) matrix with weight (C, out) and bias (out,)."""
    x = np.asarray(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise TensorShapeError("fully_connected", f"input (N, {weight.shape[0]})", x.shape)
    if bias.shape != (weight.shape[1],):
        raise TensorShapeError("fully_connected", f"bias of length {weight.shape[1]}", bias.shape)
    return x @ weight + bias


def fully_connected_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray
                             ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_input, grad_weight, grad_bias)."""
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# Channel shuffle
# ---------------------------------------------------------------------------

def channel_shuffle(x: ArrayLike4, groups: int) -> np.ndarray:
    """Move channel g*(C/G)+i to position i*G+g (transpose of the (G, C/G) grid)."""
    x = _as_array(x)
    _require_rank4("channel_shuffle", x)
    N, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise TensorShapeError("channel_shuffle", f"channels divisible by {groups}", x.shape)
    out = x.reshape(N, groups, C // groups, H, W).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(out).reshape(N, C, H, W)


def channel_shuffle_backward(grad_out: np.ndarray, groups: int) -> np.ndarray:
    return channel_shuffle(grad_out, grad_out.shape[1] // groups)


# ---------------------------------------------------------------------------
# Squeeze and excitation
# ---------------------------------------------------------------------------

@dataclass
class SECache:
    x: np.ndarray
    squeezed: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    gate: np.ndarray


def se_block(x: ArrayLike4, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray
             ) -> Tuple[np.ndarray, SECache]:
    """
    Squeeze-and-excitation gate.

    global_avg_pool -> FC(C -> C/r) -> ReLU -> FC(C/r -> C) -> sigmoid -> channel-wise scale.
    """
    x = _as_array(x)
    _require_rank4("se_block", x)
    N, C = x.shape[:2]
    if w1.shape[0] != C or w2.shape[1] != C:
        raise TensorShapeError("se_block", f"squeeze/excite weights for {C} channels", w1.shape)
    squeezed = global_avg_pool(x).reshape(N, C)
    hidden_pre = fully_connected(squeezed, w1, b1)
    hidden = np.maximum(hidden_pre, 0)
    gate = sigmoid(fully_connected(hidden, w2, b2)).astype(x.dtype)
    out = x * gate.reshape(N, C, 1, 1)
    return out, SECache(x=x, squeezed=squeezed, hidden_pre=hidden_pre, hidden=hidden, gate=gate)


def se_block_backward(grad_out: np.ndarray, cache: SECache, w1: np.ndarray, w2: np.ndarray):
    """Return (grad_input, grad_w1, grad_b1, grad_w2, grad_b2)."""
    x = cache.x
    N, C, H, W = x.shape
    gate = cache.gate
    grad_gate = (grad_out * x).sum(axis=(2, 3))
    grad_pre_gate = grad_gate * gate * (1 - gate)
    grad_hidden, grad_w2, grad_b2 = fully_connected_backward(cache.hidden, w2, grad_pre_gate)
    grad_hidden_pre = grad_hidden * (cache.hidden_pre > 0)
    grad_squeezed, grad_w1, grad_b1 = fully_connected_backward(cache.squeezed, w1, grad_hidden_pre)
    grad_x = grad_out * gate.reshape(N, C, 1, 1) + (grad_squeezed / (H * W)).reshape(N, C, 1, 1)
    return grad_x.astype(np.result_type(x, grad_out)), grad_w1, grad_b1, grad_w2, grad_b2
