"""Numeric kernels of the network: 3D convolution, pooling, normalization, activations and losses.

Tensors use the (batch, channel, depth, height, width) layout, depth being the
spectral axis. Convolution is a cross-correlation over a zero-padded input.
The ``*_forward`` helpers work on raw arrays and are shared by the
differentiable operations and by the frozen inference paths.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function
from .tensor import Tensor
from .tensor import as_tensor
from .utils import LabelRangeError
from .utils import ShapeError
from .utils import as_triple

SPATIAL_AXES = ("depth", "height", "width")


@dataclass(frozen=True)
class Conv3dSpec:
    """Geometry of a 3D convolution."""

    in_channels: int
    out_kernels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "kernel", as_triple(self.kernel, "kernel"))
        object.__setattr__(self, "stride", as_triple(self.stride, "stride"))
        object.__setattr__(self, "padding", as_triple(self.padding, "padding"))
        if self.in_channels < 1 or self.out_kernels < 1:
            raise ShapeError(
                f"convolution needs at least one channel and one kernel, got C={self.in_channels}, N={self.out_kernels}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError(
                f"invalid convolution geometry kernel={self.kernel} stride={self.stride} padding={self.padding}"
            )

    @property
    def kernel_volume(self) -> int:
        return int(np.prod(self.kernel))

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_kernels, self.in_channels, *self.kernel)

    def output_dims(self, dims: tuple[int, int, int]) -> tuple[int, int, int]:
        return conv_output_dims(dims, self.kernel, self.stride, self.padding)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_kernels": self.out_kernels,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
        }


def conv_output_dims(dims, kernel, stride, padding) -> tuple[int, int, int]:
    out = []
    for axis, size, k, s, p in zip(SPATIAL_AXES, dims, kernel, stride, padding, strict=True):
        length = (size + 2 * p - k) // s + 1
        if size + 2 * p < k or length < 1:
            raise ShapeError(
                f"{axis} axis of size {size} with padding {p} is smaller than the kernel {k}"
            )
        out.append(length)
    return tuple(out)  # type: ignore[return-value]


def _windows(x: np.ndarray, kernel, stride) -> np.ndarray:
    win = sliding_window_view(x, kernel, axis=(2, 3, 4))
    return win[:, :, :: stride[0], :: stride[1], :: stride[2]]


def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    pd, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride=(1, 1, 1), padding=(1, 1, 1)) -> np.ndarray:
    """Cross-correlate ``x`` (B, C, D, H, W) with ``w`` (N, C, kd, kh, kw)."""
    kernel = w.shape[2:]
    conv_output_dims(x.shape[2:], kernel, stride, padding)
    cols = _windows(_pad(x, padding), kernel, stride)
    out = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


class Conv3d(Function):
    def forward(self, x, w, stride, padding):
        self.x_shape = x.shape
        self.w = w
        self.stride = stride
        self.padding = padding
        self.cols = _windows(_pad(x, padding), w.shape[2:], stride)
        out = np.tensordot(self.cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def backward(self, grad):
        grad_w = np.tensordot(grad, self.cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        grad_cols = np.tensordot(grad, self.w, axes=([1], [0]))
        _, _, od, oh, ow = grad.shape
        sd, sh, sw = self.stride
        pd, ph, pw = self.padding
        b, c, d, h, w = self.x_shape
        grad_xp = np.zeros((b, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=grad.dtype)
        kd, kh, kw = self.w.shape[2:]
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    grad_xp[
                        :,
                        :,
                        i : i + sd * (od - 1) + 1 : sd,
                        j : j + sh * (oh - 1) + 1 : sh,
                        k : k + sw * (ow - 1) + 1 : sw,
                    ] += grad_cols[..., i, j, k].transpose(0, 4, 1, 2, 3)
        grad_x = grad_xp[:, :, pd : pd + d, ph : ph + h, pw : pw + w]
        return grad_x, grad_w


def conv3d(x: Tensor, w: Tensor, spec: Conv3dSpec) -> Tensor:
    """Differentiable 3D convolution of ``x`` (B, C, D, H, W) with the kernel bank ``w`` (N, C, kd, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be (batch, channel, depth, height, width), got rank {x.ndim}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"conv3d weight shape {w.shape} does not match {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv3d channel axis (1) mismatch: input has {x.shape[1]}, kernels expect {spec.in_channels}"
        )
    spec.output_dims(x.shape[2:])
    return Conv3d.apply(x, w, stride=spec.stride, padding=spec.padding)


def _pool_geometry(shape, window, stride) -> tuple[int, int, int]:
    dims = []
    for axis, size, k, s in zip(SPATIAL_AXES, shape[2:], window, stride, strict=True):
        if k > size:
            raise ShapeError(f"pooling window {k} is larger than the {axis} axis of size {size}")
        dims.append((size - k) // s + 1)
    return tuple(dims)  # type: ignore[return-value]


def avg_pool3d_forward(x: np.ndarray, window, stride=None) -> np.ndarray:
    window = as_triple(window, "window")
    stride = as_triple(stride, "stride") if stride is not None else window
    _pool_geometry(x.shape, window, stride)
    return _windows(x, window, stride).mean(axis=(5, 6, 7))


class AvgPool3d(Function):
    def forward(self, x, window, stride):
        self.shape = x.shape
        self.window = window
        self.stride = stride
        self.out_dims = _pool_geometry(x.shape, window, stride)
        return _windows(x, window, stride).mean(axis=(5, 6, 7))

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        scaled = grad / float(np.prod(self.window))
        od, oh, ow = self.out_dims
        sd, sh, sw = self.stride
        kd, kh, kw = self.window
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    out[
                        :,
                        :,
                        i : i + sd * (od - 1) + 1 : sd,
                        j : j + sh * (oh - 1) + 1 : sh,
                        k : k + sw * (ow - 1) + 1 : sw,
                    ] += scaled
        return (out,)


def avg_pool3d(x: Tensor, window, stride=None) -> Tensor:
    """Average pooling without padding; ``stride`` defaults to the window."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"avg_pool3d input must be rank 5, got rank {x.ndim}")
    window = as_triple(window, "window")
    stride = as_triple(stride, "stride") if stride is not None else window
    if min(window) < 1 or min(stride) < 1:
        raise ShapeError(f"pooling window {window} and stride {stride} must be positive")
    return AvgPool3d.apply(x, window=window, stride=stride)


class BatchNormTrain(Function):
    def forward(self, x, gamma, beta, eps):
        axes = (0, *range(2, x.ndim))
        view = (1, -1) + (1,) * (x.ndim - 2)
        self.axes = axes
        self.view = view
        self.count = x.size // x.shape[1]
        self.mean = x.mean(axis=axes)
        self.var = x.var(axis=axes)
        self.inv_std = 1.0 / np.sqrt(self.var + eps)
        self.xhat = (x - self.mean.reshape(view)) * self.inv_std.reshape(view)
        self.gamma = gamma
        return self.xhat * gamma.reshape(view) + beta.reshape(view)

    def backward(self, grad):
        view = self.view
        grad_gamma = (grad * self.xhat).sum(axis=self.axes)
        grad_beta = grad.sum(axis=self.axes)
        dxhat = grad * self.gamma.reshape(view)
        grad_x = (
            self.inv_std.reshape(view)
            / self.count
            * (
                self.count * dxhat
                - dxhat.sum(axis=self.axes).reshape(view)
                - self.xhat * (dxhat * self.xhat).sum(axis=self.axes).reshape(view)
            )
        )
        return grad_x, grad_gamma, grad_beta


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize ``x`` and update the running
    statistics in place (unbiased variance); in evaluation mode the running
    statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[1] if x.ndim > 1 else 0
    for name, size in (
        ("gamma", gamma.size),
        ("beta", beta.size),
        ("running_mean", running_mean.size),
        ("running_var", running_var.size),
    ):
        if size != channels:
            raise ShapeError(f"batch_norm {name} has {size} entries but the channel axis (1) has {channels}")

    if training:
        out = BatchNormTrain.apply(x, gamma, beta, eps=eps)
        func = out.creator
        if func is None:
            axes = (0, *range(2, x.ndim))
            mean, var, count = x.data.mean(axis=axes), x.data.var(axis=axes), x.size // channels
        else:
            mean, var, count = func.mean, func.var, func.count
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        return out

    view = (1, -1) + (1,) * (x.ndim - 2)
    inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
    scale = gamma * inv_std
    shift = beta - scale * running_mean.astype(x.dtype)
    return x * scale.reshape(*view) + shift.reshape(*view)


def fold_batch_norm(
    gamma: np.ndarray, beta: np.ndarray, running_mean: np.ndarray, running_var: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, np.ndarray]:
    """Return the per-channel ``(scale, shift)`` equivalent to evaluation-mode batch normalization."""
    inv_std = (1.0 / np.sqrt(running_var + eps)).astype(gamma.dtype)
    scale = gamma * inv_std
    return scale, beta - scale * running_mean.astype(gamma.dtype)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


class SoftmaxRows(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        self.y = exp / exp.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, grad):
        return (self.y * (grad - (grad * self.y).sum(axis=-1, keepdims=True)),)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis: every row is strictly positive and sums to one."""
    return SoftmaxRows.apply(m)


class CrossEntropy(Function):
    def forward(self, logits, labels):
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        total = exp.sum(axis=1, keepdims=True)
        self.probs = exp / total
        self.labels = labels
        rows = np.arange(logits.shape[0])
        log_probs = shifted[rows, labels] - np.log(total[:, 0])
        return np.asarray(-log_probs.mean(), dtype=logits.dtype)

    def backward(self, grad):
        batch = self.probs.shape[0]
        delta = self.probs.copy()
        delta[np.arange(batch), self.labels] -= 1
        return (grad * delta / batch,)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``logits`` (B, K) against 0-indexed integer ``labels``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be (batch, classes), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy needs {logits.shape[0]} labels along the batch axis, got {labels.shape}")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = int(labels[(labels < 0) | (labels >= classes)][0])
        raise LabelRangeError(f"label {bad} is outside [0, {classes})")
    return CrossEntropy.apply(logits, labels=labels)


class Linear(Function):
    def forward(self, x, w, b=None):
        self.x, self.w = x, w
        out = x @ w.T
        return out + b if b is not None else out

    def backward(self, grad):
        grads = [grad @ self.w, grad.T @ self.x]
        if len(self.parents) == 3:
            grads.append(grad.sum(axis=0))
        return grads


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear feature axis (1) mismatch: input {x.shape}, weight {w.shape}")
    if b is None:
        return Linear.apply(x, w)
    b = as_tensor(b)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear bias must have {w.shape[0]} entries, got {b.shape}")
    return Linear.apply(x, w, b)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over every axis after the channel axis: (B, C, ...) -> (B, C)."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs spatial axes, got shape {x.shape}")
    return x.mean(axis=tuple(range(2, x.ndim)))
