"""Differentiable operations on :class:`~ecgforge.nn.tensor.Tensor`.

Every function returns a new tensor; backward closures return one gradient per
parent (``None`` where a parent needs none).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateStatisticsError, DimensionError, GeometryError, NumericError
from .tensor import Tensor, make_result

# Upper bound on the im2col buffer built per chunk of the batch.
_IM2COL_BYTES = 64 * 2**20

# When a list, piecewise ops append their branch decisions (ReLU masks, pooling
# argmaxes) so callers can detect when a perturbation crosses a kink.
_decision_trace: list | None = None


def _record(decision: np.ndarray) -> None:
    if _decision_trace is not None:
        _decision_trace.append(decision)


def pooled_length(length: int, size: int, stride: int) -> int:
    """``floor((length - size) / stride) + 1``; raises when not positive."""
    if size > length:
        raise GeometryError(f"window {size} longer than input {length}")
    return (length - size) // stride + 1


def _batch_chunks(batch: int, bytes_per_item: int):
    step = max(1, _IM2COL_BYTES // max(1, bytes_per_item))
    for lo in range(0, batch, step):
        yield slice(lo, min(batch, lo + step))


def _correlate(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation: (B, C, L) x (O, C, K) -> (B, O, T)."""
    B, C, L = x.shape
    O, _, K = w.shape
    T = (L - K) // stride + 1
    out = np.empty((B, O, T), dtype=np.result_type(x, w))
    w2 = w.reshape(O, C * K).T
    for sl in _batch_chunks(B, T * C * K * x.itemsize):
        win = sliding_window_view(x[sl], K, axis=2)[:, :, ::stride, :]
        cols = win.transpose(0, 2, 1, 3).reshape(-1, C * K)
        out[sl] = (cols @ w2).reshape(-1, T, O).transpose(0, 2, 1)
    return out


def _weight_grad(x: np.ndarray, g: np.ndarray, K: int, stride: int) -> np.ndarray:
    B, C, L = x.shape
    _, O, T = g.shape
    dw = np.zeros((O, C * K), dtype=g.dtype)
    for sl in _batch_chunks(B, T * C * K * x.itemsize):
        win = sliding_window_view(x[sl], K, axis=2)[:, :, ::stride, :][:, :, :T, :]
        cols = win.transpose(0, 2, 1, 3).reshape(-1, C * K)
        gs = g[sl].transpose(0, 2, 1).reshape(-1, O)
        dw += gs.T @ cols
    return dw.reshape(O, C, K)


def _input_grad(g: np.ndarray, w: np.ndarray, length: int, stride: int) -> np.ndarray:
    B, O, T = g.shape
    _, C, K = w.shape
    if stride > 1:
        dil = np.zeros((B, O, (T - 1) * stride + 1), dtype=g.dtype)
        dil[:, :, ::stride] = g
        g = dil
    covered = g.shape[2] + K - 1
    padded = np.zeros((B, O, g.shape[2] + 2 * (K - 1)), dtype=g.dtype)
    padded[:, :, K - 1 : K - 1 + g.shape[2]] = g
    # full correlation with the flipped kernel == transposed convolution
    wf = np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2))  # (C, O, K)
    dx = np.zeros((B, C, length), dtype=g.dtype)
    dx[:, :, :covered] = _correlate(padded, wf, 1)
    return dx


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """``out[b,o,t] = bias[o] + sum_{c,k} x[b,c,t*stride+k] * weight[o,c,k]``."""
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise DimensionError(f"conv1d expects 3-d input and weight, got {x.shape} and {weight.shape}")
    B, C, L = x.shape
    O, Cw, K = weight.shape
    if Cw != C:
        raise DimensionError(f"input has {C} channels, weight expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"bias shape {bias.shape} != ({O},)")
    if stride < 1:
        raise GeometryError("stride must be >= 1")
    if L < K:
        raise GeometryError(f"input length {L} shorter than kernel {K}")
    out = _correlate(x.data, weight.data, stride)
    if bias is not None:
        out += bias.data[None, :, None]

    def backward(g):
        gx = _input_grad(g, weight.data, L, stride) if x.requires_grad else None
        gw = _weight_grad(x.data, g, K, stride) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record(mask)
    return make_result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def max_pool1d(x: Tensor, size: int, stride: int) -> Tensor:
    """Max over windows of the last axis; gradient goes to the first argmax."""
    L = x.shape[-1]
    T = pooled_length(L, size, stride)
    win = sliding_window_view(x.data, size, axis=-1)[..., ::stride, :][..., :T, :]
    arg = win.argmax(axis=-1)
    _record(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        span = stride * (T - 1) + 1
        for k in range(size):
            dx[..., k : k + span : stride] += np.where(arg == k, g, 0.0)
        return (dx,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def adaptive_windows(length: int, output_length: int) -> list[tuple[int, int]]:
    """Window ``i`` is ``[floor(i*L/n), ceil((i+1)*L/n))``."""
    if output_length < 1:
        raise GeometryError("output_length must be >= 1")
    if output_length > length:
        raise GeometryError(f"cannot pool {length} values up to {output_length}")
    return [
        ((i * length) // output_length, -((-(i + 1) * length) // output_length))
        for i in range(output_length)
    ]


def _adaptive_index(length: int, output_length: int) -> np.ndarray:
    windows = adaptive_windows(length, output_length)
    width = max(hi - lo for lo, hi in windows)
    idx = np.empty((output_length, width), dtype=np.intp)
    for i, (lo, hi) in enumerate(windows):
        idx[i, : hi - lo] = np.arange(lo, hi)
        # pad with the window's last index: duplicates never win argmax first
        idx[i, hi - lo :] = hi - 1
    return idx


def adaptive_max_pool1d(x: Tensor, output_length: int) -> Tensor:
    """Max over ``output_length`` covering windows of the last axis."""
    L = x.shape[-1]
    idx = _adaptive_index(L, output_length)
    gathered = x.data[..., idx]  # (..., n, width)
    arg = gathered.argmax(axis=-1)
    pos = np.take_along_axis(np.broadcast_to(idx, gathered.shape), arg[..., None], axis=-1)[..., 0]
    _record(pos)
    out = np.take_along_axis(x.data, pos, axis=-1)

    def backward(g):
        flat_pos = pos.reshape(-1, output_length)
        dx = np.zeros((flat_pos.shape[0], L), dtype=g.dtype)
        rows = np.arange(flat_pos.shape[0])[:, None]
        np.add.at(dx, (rows, flat_pos), g.reshape(-1, output_length))
        return (dx.reshape(x.shape),)

    return make_result(out, (x,), backward)


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of a (batch, channels, length) tensor.

    In training mode the running statistics are updated in place as
    ``running <- (1 - momentum) * running + momentum * batch`` (unbiased batch
    variance for the running estimate).
    """
    if x.data.ndim != 3:
        raise DimensionError(f"batch_norm1d expects (batch, channels, length), got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError("gamma/beta must have one entry per channel")
    n = x.shape[0] * x.shape[2]
    if training:
        if n < 2:
            raise DegenerateStatisticsError("batch norm needs >= 2 values per channel in train mode")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv[None, :, None]
    out = (gamma.data[None, :, None] * xhat + beta.data[None, :, None]).astype(x.dtype)

    def backward(g):
        gg = g.sum(axis=(0, 2)) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2))[None, :, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
                gx = (inv[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv[None, :, None]
        return gx, ggamma, gg

    return make_result(out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for a (batch, in_features) input."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape
    return make_result(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(original),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sum_all(x: Tensor) -> Tensor:
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def smooth_l1_loss(prediction: Tensor, target) -> Tensor:
    """Mean of 0.5*d**2 where |d| < 1 and |d| - 0.5 elsewhere, d = prediction - target."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=prediction.dtype)
    if prediction.shape != t.shape:
        raise DimensionError(f"smooth_l1_loss: {prediction.shape} vs {t.shape}")
    n = prediction.size
    if n == 0:
        raise DimensionError("smooth_l1_loss of an empty tensor")
    d = prediction.data - t
    ad = np.abs(d)
    quad = ad < 1
    _record(quad)
    value = np.where(quad, 0.5 * d * d, ad - 0.5).sum() / n

    def backward(g):
        return (g * np.where(quad, d, np.sign(d)) / n,)

    return make_result(np.asarray(value, dtype=prediction.dtype), (prediction,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels, n_classes: int | None = None) -> Tensor:
    """Mean negative log-softmax of the labelled class."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, classes), got {logits.shape}")
    B, K = logits.shape
    if n_classes is not None and K != n_classes:
        raise DimensionError(f"expected {n_classes} logits, got {K}")
    y = np.asarray(labels)
    if y.shape != (B,) or y.dtype.kind not in "iu":
        raise DimensionError("labels must be a 1-d integer array, one per row")
    if y.size and (y.min() < 0 or y.max() >= K):
        raise IndexError(f"label out of range [0, {K})")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logit")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    value = (logsum - z[np.arange(B), y]).mean()

    def backward(g):
        p = softmax(logits.data)
        p[np.arange(B), y] -= 1.0
        return (g * p / B,)

    return make_result(np.asarray(value, dtype=logits.dtype), (logits,), backward)


__all__ = [
    "adaptive_max_pool1d",
    "adaptive_windows",
    "add",
    "batch_norm1d",
    "conv1d",
    "cross_entropy",
    "flatten",
    "linear",
    "max_pool1d",
    "pooled_length",
    "relu",
    "reshape",
    "smooth_l1_loss",
    "softmax",
    "sum_all",
]
