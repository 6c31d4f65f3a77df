# services/layers.py

"""
Network layers built on the autograd tape: 2-D convolution, batch
normalization, GELU, softmax, linear maps, causal depthwise 1-D convolution,
and the fused softmax cross-entropy loss.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from services.autograd import Tensor, add, as_tensor, matmul, wide_sum
from services.mac_counter import record_macs
from utils.error_handler import ContractError, DimensionError

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight", shapes=(x.shape, w.shape))
    batch, c_in, height, width = x.shape
    c_out, w_in, k_h, k_w = w.shape
    if w_in != c_in:
        raise DimensionError("conv2d channel mismatch", shapes=(x.shape, w.shape))
    if k_h != k_w or k_h % 2 == 0:
        raise ContractError(f"conv2d needs a square odd kernel, got {k_h}x{k_w}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError("conv2d bias must have one entry per output channel", shapes=(bias.shape, (c_out,)))

    k = k_h
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    x_pad = np.pad(x.data, pad)
    windows = sliding_window_view(x_pad, (k, k), axis=(2, 3))
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.einsum("bchwij,ocij->bohw", windows, w.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    record_macs(batch * c_out * out_h * out_w * c_in * k * k)

    def _backward(g):
        g_w = np.einsum("bchwij,bohw->ocij", windows, g, optimize=True)
        g_pad = np.zeros_like(x_pad)
        for i in range(k):
            for j in range(k):
                g_pad[:, :, i:i + out_h, j:j + out_w] += np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j])
        g_x = g_pad[:, :, padding:padding + height, padding:padding + width]
        grads = [np.ascontiguousarray(g_x), g_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._from_op(out, parents, _backward, "conv2d")


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
        )


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over (B, H, W).

    In training mode batch statistics are used and the running statistics are
    updated as running = momentum * running + (1 - momentum) * batch, with the
    unbiased batch variance. Evaluation mode reads the running statistics.
    """
    if x.ndim != 4:
        raise DimensionError("batchnorm expects B x C x H x W", shapes=(x.shape,))
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError("batchnorm affine parameters must match channels", shapes=(x.shape, gamma.shape))
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    shape = (1, channels, 1, 1)

    if training:
        if count < 2:
            raise ContractError(
                "batchnorm in training mode needs at least two elements per channel",
                error_code="DEGENERATE_VARIANCE",
            )
        mu = wide_sum(x.data, axis=axes) / count
        centered = x.data - mu.reshape(shape)
        var = wide_sum(centered * centered, axis=axes) / count
        inv_std = 1.0 / np.sqrt(var + state.eps)
        x_hat = centered * inv_std.reshape(shape)

        m = state.momentum
        state.running_mean = (m * state.running_mean + (1.0 - m) * mu).astype(np.float32)
        unbiased = var * count / (count - 1)
        state.running_var = (m * state.running_var + (1.0 - m) * unbiased).astype(np.float32)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.data.dtype) + state.eps)
        x_hat = (x.data - state.running_mean.astype(x.data.dtype).reshape(shape)) * inv_std.reshape(shape)

    out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

    def _backward(g):
        g_gamma = wide_sum(g * x_hat, axis=axes)
        g_beta = wide_sum(g, axis=axes)
        g_hat = g * gamma.data.reshape(shape)
        if training:
            g_x = (inv_std.reshape(shape) / count) * (
                count * g_hat
                - wide_sum(g_hat, axis=axes).reshape(shape)
                - x_hat * wide_sum(g_hat * x_hat, axis=axes).reshape(shape)
            )
        else:
            g_x = g_hat * inv_std.reshape(shape)
        return g_x, g_gamma, g_beta

    return Tensor._from_op(out, (x, gamma, beta), _backward, "batchnorm")


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation of the Gaussian CDF."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    out = 0.5 * v * (1.0 + t)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return Tensor._from_op(out, (x,), _backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), _backward, "softmax")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight (+ bias); weight is stored in_features x out_features."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def causal_depthwise_conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel causal convolution of an L x E sequence with an E x k kernel.

    out[t, e] = sum_j weight[e, j] * x[t - (k - 1) + j, e], zero before the start.
    """
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise DimensionError("depthwise conv expects L x E input and E x k kernel", shapes=(x.shape, weight.shape))
    length, channels = x.shape
    k = weight.shape[1]
    x_pad = np.concatenate([np.zeros((k - 1, channels), dtype=x.data.dtype), x.data], axis=0)
    out = np.zeros_like(x.data)
    for j in range(k):
        out = out + x_pad[j:j + length] * weight.data[:, j]
    if bias is not None:
        out = out + bias.data
    record_macs(length * channels * k)

    def _backward(g):
        g_pad = np.zeros_like(x_pad)
        g_w = np.zeros_like(weight.data)
        for j in range(k):
            g_pad[j:j + length] += g * weight.data[:, j]
            g_w[:, j] = np.sum(g * x_pad[j:j + length], axis=0)
        grads = [g_pad[k - 1:], g_w]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _backward, "causal_conv1d")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy; `targets` are 0-based class indices."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise DimensionError("cross_entropy needs one target per logit row", shapes=(logits.shape, targets.shape))
    n_classes = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ContractError(f"class targets must lie in [0, {n_classes})")
    batch = targets.size
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -np.mean(log_probs[np.arange(batch), targets])

    def _backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(batch), targets] -= 1.0
        return (g * probs / batch,)

    return Tensor._from_op(np.asarray(loss), (as_tensor(logits),), _backward, "cross_entropy")
