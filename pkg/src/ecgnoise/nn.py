"""Small differentiable kernel for 1-D conv autoencoders.

Tensors are numpy arrays shaped (batch, channels, time) and computed in
float64. Convolution weights are (C_out, C_in, K); transposed-convolution
weights are (C_in, C_out, K), so a conv layer and the transposed layer that
shares its weight array are adjoint maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf."""


@dataclass
class ConvLayer:
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    transposed: bool = False
    output_padding: int = 0  # transposed only: extra trailing samples

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[2] < 1:
            raise ValueError(f"weights must be (C, C, K>=1), got {self.weights.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        if not 0 <= self.output_padding < self.stride:
            raise ValueError("output_padding must be in [0, stride)")
        if self.bias.shape != (self.out_channels,):
            raise ValueError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[0] if self.transposed else self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[1] if self.transposed else self.weights.shape[0]

    def output_length(self, t: int) -> int:
        if self.transposed:
            return tconv_output_length(t, self.kernel_size, self.stride, self.padding, self.output_padding)
        return conv_output_length(t, self.kernel_size, self.stride, self.padding)


def conv_output_length(t: int, k: int, stride: int, padding: int) -> int:
    return (t + 2 * padding - k) // stride + 1


def tconv_output_length(t: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (t - 1) * stride + k - 2 * padding + output_padding


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Strided (B, C, T_out, K) view of the zero-padded input."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    return sliding_window_view(x, k, axis=2)[:, :, ::stride, :]


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, t_out: int | None = None) -> np.ndarray:
    """Patch matrix of shape (B * T_out, C * K), rows ordered batch-major."""
    cols = _windows(x, k, stride, padding)
    if t_out is not None:
        cols = cols[:, :, :t_out, :]
    b, c, t, _ = cols.shape
    return cols.transpose(0, 2, 1, 3).reshape(b * t, c * k)


def _check_input(x: np.ndarray, layer: ConvLayer) -> None:
    if x.ndim != 3:
        raise ValueError(f"expected (B, C, T) input, got shape {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {layer.in_channels}")
    if layer.output_length(x.shape[2]) < 1:
        raise ValueError(
            f"output length {layer.output_length(x.shape[2])} < 1 for input length {x.shape[2]}"
        )


def _conv(x, w, stride, padding):
    o, c, k = w.shape
    b = x.shape[0]
    cols = _im2col(x, k, stride, padding)
    out = cols @ w.reshape(o, c * k).T  # (B * T_out, O)
    return out.reshape(b, -1, o).transpose(0, 2, 1)


def _tconv(x, w, stride, padding, output_padding):
    b, i, t = x.shape
    o, k = w.shape[1], w.shape[2]
    full_len = (t - 1) * stride + k
    # (K, O, B, T) contributions, scattered tap by tap
    z = (w.transpose(2, 1, 0).reshape(k * o, i) @ x.transpose(1, 0, 2).reshape(i, b * t)).reshape(k, o, b, t)
    full = np.zeros((o, b, full_len + output_padding))
    for j in range(k):
        full[:, :, j : j + (t - 1) * stride + 1 : stride] += z[j]
    end = full_len + output_padding - padding
    return full[:, :, padding:end].transpose(1, 0, 2)


def conv1d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    _check_input(x, layer)
    return _conv(x, layer.weights, layer.stride, layer.padding) + layer.bias[None, :, None]


def tconv1d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    _check_input(x, layer)
    out = _tconv(x, layer.weights, layer.stride, layer.padding, layer.output_padding)
    return out + layer.bias[None, :, None]


def layer_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    return tconv1d_forward(x, layer) if layer.transposed else conv1d_forward(x, layer)


def conv1d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Gradients of ``conv1d_forward`` w.r.t. input, weights and bias."""
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    t_out = conv_output_length(x.shape[2], k, s, p)
    if grad_out.shape != (x.shape[0], layer.out_channels, t_out):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output")
    o = layer.out_channels
    cols = _im2col(x, k, s, p)
    grad_w = (grad_out.transpose(1, 0, 2).reshape(o, -1) @ cols).reshape(layer.weights.shape)
    grad_b = grad_out.sum(axis=(0, 2))
    # gradient w.r.t. the padded input; trailing samples skipped by the stride get zero
    leftover = (x.shape[2] + 2 * p - k) % s
    grad_pad = _tconv(grad_out, layer.weights, s, 0, 0)
    if leftover:
        grad_pad = np.pad(grad_pad, ((0, 0), (0, 0), (0, leftover)))
    grad_x = grad_pad[:, :, p : p + x.shape[2]]
    return grad_x, grad_w, grad_b


def tconv1d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Gradients of ``tconv1d_forward`` w.r.t. input, weights and bias."""
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    t_out = layer.output_length(x.shape[2])
    if grad_out.shape != (x.shape[0], layer.out_channels, t_out):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output")
    b, i, t = x.shape
    w2 = layer.weights.reshape(i, -1)
    cols = _im2col(grad_out, k, s, p, t_out=t)  # (B * T, C_out * K)
    grad_x = (cols @ w2.T).reshape(b, t, i).transpose(0, 2, 1)
    grad_w = (x.transpose(1, 0, 2).reshape(i, b * t) @ cols).reshape(layer.weights.shape)
    grad_b = grad_out.sum(axis=(0, 2))
    return grad_x, grad_w, grad_b


def layer_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    if layer.transposed:
        return tconv1d_backward(x, layer, grad_out)
    return conv1d_backward(x, layer, grad_out)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place.

    Raises NonFiniteError (leaving params and state untouched) if any
    gradient is NaN/Inf.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter array {i}")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.second_moment = [np.zeros_like(p, dtype=np.float64) for p in params]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        denom = np.sqrt(v / bc2) + state.eps
        # 0/0 (eps == 0 and no gradient history) contributes no step
        direction = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom != 0)
        p -= state.lr * (direction + state.weight_decay * p)


def grad_check(
    fn: Callable[[Sequence[np.ndarray], np.ndarray], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    x: np.ndarray,
    h: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(params, x)`` must return ``(loss, grads)`` with grads congruent to
    params. Every scalar parameter is perturbed in place and restored.
    """
    _, analytic = fn(params, x)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = fn(params, x)
            flat[i] = orig - h
            down, _ = fn(params, x)
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            a = gflat[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
