"""Independent reference implementations used only by the tests (float64, loops)."""
import math

import numpy as np

from team.engine import Conv, ReLU, conv2d_forward, maxpool2d


def naive_conv2d(x, w, b, stride=1, pad=0, groups=1):
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    f, cg, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    fg = f // groups
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            g = o // fg
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cg):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[i, g * cg + ci, y * stride + ky, xx * stride + kx] * w[o, ci, ky, kx]
                    out[i, o, y, xx] = acc
    return out


def naive_maxpool(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, ho, wo), x.dtype)
    pos = np.zeros((n, c, ho, wo, 2), int)
    for i in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    best, by, bx = -math.inf, 0, 0
                    for dy in range(k):
                        for dx in range(k):
                            v = x[i, ch, y * s + dy, xx * s + dx]
                            if v > best:
                                best, by, bx = v, y * s + dy, xx * s + dx
                    out[i, ch, y, xx] = best
                    pos[i, ch, y, xx] = (by, bx)
    return out, pos


def naive_maxpool_backward(upstream, pos, shape):
    dx = np.zeros(shape, upstream.dtype)
    n, c, ho, wo = upstream.shape
    for i in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    by, bx = pos[i, ch, y, xx]
                    dx[i, ch, by, bx] += upstream[i, ch, y, xx]
    return dx


def walk_param_count(obj):
    """Count every float held in ParamBlocks reachable from ``obj``, by brute traversal."""
    from team.engine.params import ParamBlock

    seen = set()
    total = 0
    stack = [obj]
    while stack:
        o = stack.pop()
        if id(o) in seen:
            continue
        seen.add(id(o))
        if isinstance(o, ParamBlock):
            total += o.value.size
        elif isinstance(o, dict):
            stack.extend(o.values())
        elif isinstance(o, (list, tuple)):
            stack.extend(o)
        elif hasattr(o, "__dict__") and not isinstance(o, (np.ndarray, type)):
            stack.extend(vars(o).values())
    return total


def _conv(h, w, b, stride, pad, groups=1):
    return conv2d_forward(h, w, b, stride, pad, groups)


def _pool(h, k, s):
    return maxpool2d(h, k, s)


def grouped_pack_logits(model, x):
    """All paths packed into one grouped-conv stack per decoupled layer."""
    arch = model.arch
    h = x.astype(np.float32)
    shared_specs = arch.layers[:arch.split_index]
    it = iter(model.shared)
    for s in shared_specs:
        h = _apply(s, h, it)
    P = len(model.paths)
    conv_j = 0
    for s in arch.layers[arch.split_index:-2]:
        if isinstance(s, Conv):
            w = np.concatenate([p.blocks[2 * conv_j].value for p in model.paths])
            b = np.concatenate([p.blocks[2 * conv_j + 1].value for p in model.paths])
            h = _conv(h, w, b, s.stride, s.pad, groups=1 if conv_j == 0 else P)
            conv_j += 1
        elif isinstance(s, ReLU):
            h = np.maximum(h, 0)
        else:
            h, _ = _pool(h, s.kernel, s.stride)
    per = h.shape[1] // P
    flat = h.reshape(len(h), P, per * h.shape[2] * h.shape[3])
    heads_w = np.stack([p.blocks[-2].value[:, 0] for p in model.paths])
    heads_b = np.array([p.blocks[-1].value[0] for p in model.paths])
    return np.einsum("npi,pi->np", flat.astype(np.float64), heads_w) + heads_b


def _apply(s, h, it):
    if isinstance(s, Conv):
        return _conv(h, next(it).value, next(it).value, s.stride, s.pad, s.groups)
    if isinstance(s, ReLU):
        return np.maximum(h, 0)
    return _pool(h, s.kernel, s.stride)[0]


def naive_global_logits(model, x):
    """Decoupled forward rebuilt from direct loop convolutions in float64."""
    arch = model.arch
    h = np.asarray(x, np.float64)
    it = iter(model.shared)
    for s in arch.layers[:arch.split_index]:
        h = _naive_layer(s, h, it)
    out = np.zeros((len(h), len(model.paths)))
    for col, path in enumerate(model.paths):
        z = h
        it = iter(path.blocks)
        for s in arch.layers[arch.split_index:-2]:
            z = _naive_layer(s, z, it)
        flat = z.reshape(len(z), -1)
        hw, hb = next(it).value, next(it).value
        for i in range(len(z)):
            out[i, col] = math.fsum(float(a) * float(b) for a, b in zip(flat[i], hw[:, 0])) + float(hb[0])
    return out


def _naive_layer(s, h, it):
    if isinstance(s, Conv):
        w, b = next(it).value, next(it).value
        return naive_conv2d(h, w, b, s.stride, s.pad, s.groups)
    if isinstance(s, ReLU):
        return np.where(h > 0, h, 0.0)
    return naive_maxpool(h, s.kernel, s.stride)[0]
