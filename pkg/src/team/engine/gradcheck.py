"""Central finite-difference oracle for layer gradients."""
from __future__ import annotations

import copy

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from team.engine import ops
from team.engine.layers import MaxPool2D, ReLULayer, Sequential
from team.errors import InputError, OracleError


def projection_loss(seed=0):
    """Loss ``sum(out * R)`` with a fixed random ``R``; exercises every output."""
    cache = {}

    def loss(out):
        key = out.shape
        if key not in cache:
            cache[key] = np.random.default_rng(seed).standard_normal(key)
        r = cache[key].astype(out.dtype)
        return float(np.sum(out * r, dtype=np.float64)), r

    return loss


def softmax_loss(labels):
    return lambda out: ops.softmax_cross_entropy(out, labels)


def bce_loss(labels):
    def loss(out):
        value, grad = ops.sigmoid_bce(out.reshape(-1), labels)
        return value, grad.reshape(out.shape)
    return loss


def _relative_error(analytic, numeric):
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    diff = np.abs(a - n).max(initial=0.0)
    if scale < 1e-12:
        return diff
    return diff / scale


def finite_diff_check(fragment, x, eps=1e-3, loss=None, details=False):
    """Worst relative error between analytic and numerical gradients.

    ``fragment`` is a :class:`Sequential` (or list of layers) run in its own
    dtype for the analytic pass; the numerical reference replays a float64
    copy with central differences. The per-tensor error is
    ``max|a - n| / max(max|a|, max|n|)``, taken over every parameter block
    and the input.
    """
    if not eps > 0:
        raise InputError(f"eps must be positive, got {eps}")
    if not isinstance(fragment, Sequential):
        fragment = Sequential(fragment)
    loss = loss or projection_loss()

    for p in fragment.params():
        p.zero_grad()
    out = fragment.forward(x)
    value, d_out = loss(out)
    if not np.isfinite(value):
        raise OracleError("fragment loss is not finite")
    d_x = fragment.backward(np.asarray(d_out, dtype=out.dtype))
    analytic = [p.grad.copy() for p in fragment.params()] + [d_x]
    for p in fragment.params():
        p.zero_grad()

    ref = copy.deepcopy(fragment)
    for p in ref.params():
        p.value = p.value.astype(np.float64)
        p.grad = p.grad.astype(np.float64)
    x64 = np.array(x, dtype=np.float64)
    targets = [p.value for p in ref.params()] + [x64]

    def f():
        v, _ = loss(ref.forward(x64))
        if not np.isfinite(v):
            raise OracleError("fragment loss is not finite under perturbation")
        return v

    errors = {}
    names = [p.name or f"param{i}" for i, p in enumerate(ref.params())] + ["input"]
    for name, arr, ana in zip(names, targets, analytic):
        numeric = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * eps)
        errors[name] = _relative_error(ana, numeric)
    worst = max(errors.values())
    return (worst, errors) if details else worst


def kink_margin(fragment, x):
    """Smallest distance of any ReLU input to 0 or any pool window's top-2 gap.

    Central differences straddling such a kink are not a gradient reference,
    so tests draw inputs with a comfortable margin.
    """
    if not isinstance(fragment, Sequential):
        fragment = Sequential(fragment)
    margin = np.inf
    h = np.asarray(x, np.float64)
    ref = copy.deepcopy(fragment)
    for p in ref.params():
        p.value = p.value.astype(np.float64)
    for layer in ref.layers:
        if isinstance(layer, ReLULayer):
            margin = min(margin, float(np.abs(h).min()))
        elif isinstance(layer, MaxPool2D):
            k, s = layer.spec.kernel, layer.spec.stride
            win = sliding_window_view(h, (k, k), axis=(2, 3))[:, :, ::s, ::s]
            win = np.sort(win.reshape(*win.shape[:4], -1), axis=-1)
            if win.shape[-1] > 1:
                margin = min(margin, float((win[..., -1] - win[..., -2]).min()))
        h = layer.forward(h)
    return margin
