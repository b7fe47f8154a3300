"""Forward/backward kernels on dense NCHW arrays.

Kernels are dtype-preserving: model state is float32, but the gradient
oracle replays the same code in float64.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from team.errors import ConfigError, InputError


def _value(p):
    return p.value if hasattr(p, "value") else np.asarray(p)


def _require_4d(x, name="input"):
    if x.ndim != 4:
        raise ConfigError(f"{name} must be 4-D [n, c, h, w], got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _check_conv(x, w, bias, stride, pad, groups):
    _require_4d(x)
    _require_4d(w, "weight")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ConfigError(f"pad must be >= 0, got {pad}")
    if groups < 1:
        raise ConfigError(f"groups must be >= 1, got {groups}")
    n_filters, cin_per_group, kh, kw = w.shape
    channels = x.shape[1]
    if channels % groups:
        raise ConfigError(f"input channels {channels} not divisible by groups {groups}")
    if n_filters % groups:
        raise ConfigError(f"out_filters {n_filters} not divisible by groups {groups}")
    if channels != groups * cin_per_group:
        raise ConfigError(
            f"input channels {channels} != groups {groups} * weight in-channels {cin_per_group}"
        )
    if bias is not None and np.shape(bias) != (n_filters,):
        raise ConfigError(f"bias length {np.shape(bias)} != out_filters {n_filters}")
    ho = conv_output_size(x.shape[2], kh, stride, pad)
    wo = conv_output_size(x.shape[3], kw, stride, pad)
    if ho < 1 or x.shape[2] + 2 * pad < kh:
        raise ConfigError(f"kernel height {kh} does not fit padded input height {x.shape[2] + 2 * pad}")
    if wo < 1 or x.shape[3] + 2 * pad < kw:
        raise ConfigError(f"kernel width {kw} does not fit padded input width {x.shape[3] + 2 * pad}")
    return ho, wo


def _windows(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # [n, c, ho, wo, kh, kw]
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x, weight, bias=None, stride=1, pad=0, groups=1):
    """Direct (im2col-style) grouped 2-D convolution.

    ``weight`` is ``[filters, in_channels // groups, kh, kw]``. Filter ``f``
    only sees the input channels of group ``f // (filters // groups)``.
    """
    w = _value(weight)
    b = None if bias is None else _value(bias)
    ho, wo = _check_conv(x, w, b, stride, pad, groups)
    n_filters, cg, kh, kw = w.shape
    fg = n_filters // groups
    win = _windows(x, kh, kw, stride, pad)
    out = np.empty((x.shape[0], n_filters, ho, wo), dtype=np.result_type(x, w))
    for g in range(groups):
        part = np.tensordot(win[:, g * cg:(g + 1) * cg], w[g * fg:(g + 1) * fg],
                            axes=([1, 4, 5], [1, 2, 3]))
        out[:, g * fg:(g + 1) * fg] = part.transpose(0, 3, 1, 2)
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(x, weight, upstream, stride=1, pad=0, groups=1, need_input=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias.

    If ``weight`` is a ParamBlock, the weight gradient is also accumulated
    into its ``grad``. With ``need_input=False`` the input gradient is
    returned as ``None``.
    """
    w = _value(weight)
    ho, wo = _check_conv(x, w, None, stride, pad, groups)
    if upstream.shape != (x.shape[0], w.shape[0], ho, wo):
        raise ConfigError(
            f"upstream shape {upstream.shape} != forward output shape "
            f"{(x.shape[0], w.shape[0], ho, wo)}"
        )
    n_filters, cg, kh, kw = w.shape
    fg = n_filters // groups
    win = _windows(x, kh, kw, stride, pad)
    dtype = np.result_type(x, w, upstream)
    d_weight = np.empty(w.shape, dtype=dtype)
    n, c, h, wd = x.shape
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dtype) if need_input else None
    for g in range(groups):
        dy = upstream[:, g * fg:(g + 1) * fg]
        d_weight[g * fg:(g + 1) * fg] = np.tensordot(
            dy, win[:, g * cg:(g + 1) * cg], axes=([0, 2, 3], [0, 2, 3]))
        if not need_input:
            continue
        # [n, ho, wo, cg, kh, kw]
        dcols = np.tensordot(dy, w[g * fg:(g + 1) * fg], axes=([1], [0]))
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        for i in range(kh):
            for j in range(kw):
                dxp[:, g * cg:(g + 1) * cg,
                    i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
    d_bias = upstream.sum(axis=(0, 2, 3))
    if hasattr(weight, "grad"):
        weight.grad += d_weight.astype(weight.grad.dtype)
    if not need_input:
        return None, d_weight, d_bias
    d_input = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(d_input), d_weight, d_bias


def maxpool2d(x, kernel, stride=None):
    """Max pooling; returns the output and the flat input index of each max.

    Ties resolve to the row-major earliest cell of the window.
    """
    _require_4d(x)
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise ConfigError(f"pool kernel/stride must be >= 1, got {kernel}/{stride}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ConfigError(f"pool kernel {kernel} larger than input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(n, c, ho, wo, kernel * kernel)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    dy, dx = np.divmod(local, kernel)
    rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + dy
    cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + dx
    base = (np.arange(n).reshape(n, 1, 1, 1) * c + np.arange(c).reshape(1, c, 1, 1)) * (h * w)
    argmax = base + rows * w + cols
    return np.ascontiguousarray(out), argmax


def maxpool2d_backward(upstream, argmax, input_shape):
    """Route each upstream value to the input cell recorded by the forward pass."""
    if upstream.shape != argmax.shape:
        raise ConfigError(f"upstream shape {upstream.shape} != pooled shape {argmax.shape}")
    flat = np.zeros(int(np.prod(input_shape)), dtype=upstream.dtype)
    # overlapping windows accumulate in row-major output order
    np.add.at(flat, argmax.ravel(), upstream.ravel())
    return flat.reshape(input_shape)


def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(upstream, x):
    # strict inequality: the gradient at exactly zero is zero
    return upstream * (x > 0)


def affine(x, weight, bias=None):
    """``x @ weight + bias`` for a batch of row vectors; weight is [in, out]."""
    w = _value(weight)
    if x.ndim != 2:
        raise ConfigError(f"affine input must be [batch, in_dim], got shape {x.shape}")
    if x.shape[1] != w.shape[0]:
        raise ConfigError(f"affine in_dim mismatch: input has {x.shape[1]}, weight expects {w.shape[0]}")
    out = x @ w
    if bias is not None:
        out = out + _value(bias)
    return out


def affine_backward(x, weight, upstream):
    w = _value(weight)
    if upstream.shape != (x.shape[0], w.shape[1]):
        raise ConfigError(f"upstream shape {upstream.shape} != affine output {(x.shape[0], w.shape[1])}")
    d_weight = x.T @ upstream
    if hasattr(weight, "grad"):
        weight.grad += d_weight.astype(weight.grad.dtype)
    return upstream @ w.T, d_weight, upstream.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient (already scaled by 1/batch).

    A 1-D ``logits`` with a scalar label is treated as a batch of one.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (logits.shape[0],):
        raise InputError(f"expected {logits.shape[0]} labels, got {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"label out of range for {k} logits: {labels.tolist()}")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1
    grad /= n
    return loss, (grad[0] if single else grad)


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_bce(logits, labels):
    """Mean binary cross-entropy on raw logits, stabilised against overflow."""
    z = np.atleast_1d(np.asarray(logits))
    y = np.atleast_1d(np.asarray(labels)).astype(z.dtype)
    if y.shape != z.shape:
        raise InputError(f"label shape {y.shape} != logit shape {z.shape}")
    if np.any((y != 0) & (y != 1)):
        raise InputError("binary labels must be 0 or 1")
    losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - y) / z.size
    if np.ndim(logits) == 0:
        return float(losses[0]), float(grad[0])
    return float(np.mean(losses)), grad
