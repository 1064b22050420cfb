"""Differentiable kernels built on :mod:`app.tensor`.

Convolution uses the im2col layout (B, C*k*k, H'*W') so the forward pass is a
single batched matrix product and the backward pass scatters columns back with
one strided add per kernel offset.
"""
from typing import List, Sequence, Tuple

import numpy as np

from app.exception import DegenerateBatchError, DegenerateOutputError, LabelRangeError, ShapeMismatchError
from app.tensor import Tensor, as_tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (B, C*k*k, h_out*w_out) columns."""
    B, C = x.shape[:2]
    sB, sC, sH, sW = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, C, kernel, kernel, h_out, w_out),
        strides=(sB, sC, sH, sW, stride * sH, stride * sW),
        writeable=False,
    )
    return patches.reshape(B, C * kernel * kernel, h_out * w_out)


def col2im(cols: np.ndarray, padded_shape: Tuple[int, ...], kernel: int, stride: int,
           h_out: int, w_out: int) -> np.ndarray:
    B, C = padded_shape[:2]
    x = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(B, C, kernel, kernel, h_out, w_out)
    for kh in range(kernel):
        h_end = kh + stride * h_out
        for kw in range(kernel):
            w_end = kw + stride * w_out
            x[:, :, kh:h_end:stride, kw:w_end:stride] += cols[:, :, kh, kw]
    return x


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: each output pixel sums weight*input over the kernel support plus bias."""
    if x.ndim != 4:
        raise ShapeMismatchError("conv2d", "input rank", 4, x.ndim)
    B, C_in, H, W = x.shape
    C_out, w_in, k, k2 = weight.shape
    if w_in != C_in:
        raise ShapeMismatchError("conv2d", "C_in", w_in, C_in)
    if k != k2:
        raise ShapeMismatchError("conv2d", "kernel width", k, k2)
    if bias.shape != (C_out,):
        raise ShapeMismatchError("conv2d", "bias", (C_out,), bias.shape)
    h_out = conv_output_size(H, k, stride, padding)
    w_out = conv_output_size(W, k, stride, padding)
    if h_out < 1 or w_out < 1:
        raise DegenerateOutputError("conv2d", (B, C_out, h_out, w_out))

    x_padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = im2col(np.ascontiguousarray(x_padded), k, stride, h_out, w_out)
    w_mat = weight.data.reshape(C_out, -1)
    out = np.matmul(w_mat, cols) + bias.data[None, :, None]
    padded_shape = x_padded.shape

    def _backward(g):
        go = g.reshape(B, C_out, h_out * w_out)
        grad_w = np.einsum("bon,bkn->ok", go, cols).reshape(weight.shape)
        grad_b = go.sum(axis=(0, 2))
        grad_x = None
        if x.tracks_grad:
            grad_cols = np.matmul(w_mat.T, go)
            grad_x = col2im(grad_cols, padded_shape, k, stride, h_out, w_out)
            if padding:
                grad_x = grad_x[:, :, padding:padding + H, padding:padding + W]
        return grad_x, grad_w, grad_b

    return make_result(out.reshape(B, C_out, h_out, w_out), (x, weight, bias), "conv2d", _backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeMismatchError("affine", "rank", 2, (x.ndim, weight.ndim))
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatchError("affine", "inner dimension", weight.shape[0], x.shape[1])
    if bias.shape != (weight.shape[1],):
        raise ShapeMismatchError("affine", "bias", (weight.shape[1],), bias.shape)

    def _backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return make_result(x.data @ weight.data + bias.data, (x, weight, bias), "affine", _backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, update_stats: bool = True, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over every axis except axis 1.

    Accepts [B, C] and [B, C, H, W]. In training mode batch statistics are used
    and, when ``update_stats`` is set, the running buffers are updated in place.
    """
    if x.ndim not in (2, 4):
        raise ShapeMismatchError("batch_norm", "input rank", "2 or 4", x.ndim)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatchError("batch_norm", "channels", C, (gamma.shape, beta.shape))
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    count = x.size // C

    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError(f"batch_norm needs at least 2 rows in train mode, got {x.shape[0]}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * x_hat + beta.data.reshape(view)

    def _backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        d_hat = g * gamma.data.reshape(view)
        if training:
            grad_x = (inv_std.reshape(view) / count) * (
                count * d_hat
                - d_hat.sum(axis=axes).reshape(view)
                - x_hat * (d_hat * x_hat).sum(axis=axes).reshape(view)
            )
        else:
            grad_x = d_hat * inv_std.reshape(view)
        return grad_x, grad_gamma, grad_beta

    return make_result(out, (x, gamma, beta), "batch_norm", _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatchError("global_avg_pool", "input rank", 4, x.ndim)
    B, C, H, W = x.shape

    def _backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool", _backward)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeMismatchError("cross_entropy", "logits rank", 2, logits.ndim)
    B, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise ShapeMismatchError("cross_entropy", "labels", (B,), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise LabelRangeError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = np.mean(log_z - shifted[rows, labels])

    def _backward(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, labels] -= 1.0
        return (g * probs / B,)

    return make_result(np.array(loss), (logits,), "cross_entropy", _backward)


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)

    def _backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (slice(None),) * axis + (indices,), g)
        return (grad,)

    return make_result(np.take(x.data, indices, axis=axis), (x,), "take", _backward)


def concat(tensors: List[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", _backward)


def pairwise_distances(x: Tensor) -> Tensor:
    """[B, D] -> [B, B] Euclidean distances; gradient at coincident points is 0."""
    if x.ndim != 2:
        raise ShapeMismatchError("pairwise_distances", "input rank", 2, x.ndim)
    diff = x.data[:, None, :] - x.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))

    def _backward(g):
        scale = np.divide(g, dist, out=np.zeros_like(dist), where=dist > 0)
        sym = scale + scale.T
        return (sym.sum(axis=1)[:, None] * x.data - sym @ x.data,)

    return make_result(dist, (x,), "pairwise_distances", _backward)


def paired_distances(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise ||a_i - b_i||; gradient at coincident rows is 0."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatchError("paired_distances", "operands", a.shape, b.shape)
    diff = a.data - b.data
    dist = np.sqrt((diff * diff).sum(axis=1))

    def _backward(g):
        scale = np.divide(g, dist, out=np.zeros_like(dist), where=dist > 0)[:, None]
        return scale * diff, -scale * diff

    return make_result(dist, (a, b), "paired_distances", _backward)
