"""Differentiable operators.

Spatial operators take ``(N, C, H, W)`` tensors; passing a single ``(C, H, W)``
sample is also accepted and returns an unbatched result. Convolution is
cross-correlation. No general broadcasting: elementwise ops require equal
shapes, with explicit helpers for per-channel scaling and bias.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor, make_node


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operator's contract."""


def _batched(x):
    """Return (4-D tensor, was_unbatched)."""
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    return x, False


def _unbatch(y, flag):
    return reshape(y, y.shape[1:]) if flag else y


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def elementwise_mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: shape mismatch {a.shape} vs {b.shape}")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, c):
    c = float(c)
    return make_node(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def relu(x):
    # subgradient at 0 is 0
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid_np(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),))


def logit(p, eps=1e-6):
    """Inverse sigmoid, with probabilities clipped to [eps, 1 - eps]."""
    pc = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    out = np.log(pc) - np.log1p(-pc)
    return make_node(out.astype(p.dtype), (p,), lambda g: (g * inside / (pc * (1.0 - pc)),))


def absolute(x):
    sgn = np.sign(x.data)
    return make_node(np.abs(x.data), (x,), lambda g: (g * sgn,))


def atan(x):
    d = 1.0 / (1.0 + x.data * x.data)
    return make_node(np.arctan(x.data), (x,), lambda g: (g * d,))


def hinge(x, margin):
    """max(0, x - margin); subgradient 0 at the kink."""
    active = x.data > margin
    out = np.where(active, x.data - x.dtype.type(margin), 0).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * active,))


# ------------------------------------------------------------------ structural

def reshape(x, shape):
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (g.transpose(inv),))


def concat_channels(xs):
    """Concatenate along the channel axis (axis 1 for batched, 0 for single samples)."""
    xs = [as_tensor(x) for x in xs]
    axis = 1 if xs[0].ndim == 4 else 0
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError(f"concat_channels: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def sum_all(x):
    shape = x.shape
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean_all(x):
    shape, n = x.shape, x.data.size
    return make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                     lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def sum_axis(x, axis):
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_node(x.data.sum(axis=axis), (x,), backward)


def mean_axis(x, axis):
    n = x.shape[axis]
    return scale(sum_axis(x, axis), 1.0 / n)


# ------------------------------------------------------------------- dense/conv

def fully_connected(x, w, b=None):
    """``x @ w.T + b`` for x of shape (N, in), w of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    parents = (x, w)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"fully_connected: bias {b.shape} for {w.shape[0]} outputs")
        out = out + b.data
        parents = (x, w, b)

    def backward(g):
        grads = (g @ w.data, g.T @ x.data)
        if b is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return make_node(out, parents, backward)


def conv2d(x, w, b=None, stride=1, zero_pad=0):
    """2-D cross-correlation with zero padding."""
    x, flag = _batched(as_tensor(x))
    n, c_in, h, wd = x.shape
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (C_out,C_in,k,k), got {w.shape}")
    c_out, c_k, k, k2 = w.shape
    if c_k != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but kernel expects {c_k} "
                         f"(input {x.shape}, kernel {w.shape})")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if h + 2 * zero_pad < k or wd + 2 * zero_pad < k:
        raise ShapeError(f"conv2d: input {h}x{wd} with pad {zero_pad} smaller than kernel {k}")
    ho = (h + 2 * zero_pad - k) // stride + 1
    wo = (wd + 2 * zero_pad - k) // stride + 1
    cols = kernels.im2col(x.data, k, stride, zero_pad)
    wmat = w.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data.reshape(1, c_out, 1)
    out = out.reshape(n, c_out, ho, wo)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(n, c_out, ho * wo)
        gw = np.zeros_like(wmat)
        for i in range(n):  # fixed batch order keeps reductions deterministic
            gw += g2[i] @ cols[i].T
        gcols = np.matmul(wmat.T, g2)
        gx = kernels.col2im(gcols, c_in, h, wd, k, stride, zero_pad) if x.requires_grad else None
        grads = (gx, gw.reshape(w.shape))
        if b is not None:
            grads = grads + (g2.sum(axis=(0, 2)),)
        return grads

    return _unbatch(make_node(out, parents, backward), flag)


def maxpool2(x):
    """2x2 non-overlapping max pooling; ties go to the first element in row-major order."""
    x, flag = _batched(as_tensor(x))
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: extents must be even, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return _unbatch(make_node(out, (x,), backward), flag)


def _interp_matrix(n_in, n_out, dtype):
    """Linear interpolation weights, align-corners-false, borders clamped."""
    f = n_out / n_in
    s = (np.arange(n_out) + 0.5) / f - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = s - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def resize_bilinear(x, out_hw):
    """Separable bilinear resize to ``out_hw``; source coordinate (d+0.5)/f - 0.5."""
    x, flag = _batched(as_tensor(x))
    h, w = x.shape[2:]
    ho, wo = out_hw
    ah = _interp_matrix(h, ho, x.dtype)
    aw = _interp_matrix(w, wo, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return _unbatch(make_node(out, (x,), backward), flag)


def bilinear_upsample(x, factor):
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    return resize_bilinear(x, (h * factor, w * factor))


def global_avg_pool(x):
    """(N,C,H,W) -> (N,C) spatial mean."""
    x, flag = _batched(as_tensor(x))
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    y = make_node(out, (x,), backward)
    return reshape(y, (c,)) if flag else y


def scale_channels(x, gate):
    """Multiply each (N, C) channel plane of x by gate[n, c]."""
    if gate.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: gate {gate.shape} for input {x.shape}")
    gd = gate.data[:, :, None, None]

    def backward(g):
        return (g * gd, (g * x.data).sum(axis=(2, 3)))

    return make_node(x.data * gd, (x, gate), backward)


def add_channel_bias(x, b):
    if b.shape != (x.shape[1],):
        raise ShapeError(f"add_channel_bias: bias {b.shape} for input {x.shape}")
    return make_node(x.data + b.data[None, :, None, None], (x, b),
                     lambda g: (g, g.sum(axis=(0, 2, 3))))


def se_recalibrate(x, w1, w2):
    """Squeeze-and-excitation: gate = sigmoid(w2 relu(w1 avgpool(x))), out = x * gate."""
    x, flag = _batched(as_tensor(x))
    c = x.shape[1]
    if w1.ndim != 2 or w2.ndim != 2 or w1.shape[1] != c or w2.shape != (c, w1.shape[0]):
        raise ShapeError(f"se_recalibrate: weights {w1.shape}, {w2.shape} "
                         f"incompatible with {c} channels")
    squeezed = global_avg_pool(x)
    gate = sigmoid(fully_connected(relu(fully_connected(squeezed, w1)), w2))
    return _unbatch(scale_channels(x, gate), flag)


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel normalization over H, W with a channel affine."""
    x, flag = _batched(as_tensor(x))
    n, c, h, w = x.shape
    m = h * w
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=(2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(2, 3), keepdims=True) / m)
        return (gx.astype(x.dtype), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _unbatch(make_node(out.astype(x.dtype), (x, gamma, beta), backward), flag)


# ------------------------------------------------------------- row operations

def row_softmax(x, temperature=1.0):
    """Softmax along the last axis of ``x / temperature`` (max-subtracted)."""
    if temperature <= 0:
        raise ValueError(f"row_softmax: temperature must be positive, got {temperature}")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return ((p * (g - inner)) / temperature,)

    return make_node(p, (x,), backward)


def row_expectation(p):
    """Sum over the last axis of column-index * p, i.e. the soft-argmax coordinate."""
    cols = np.arange(p.shape[-1], dtype=p.dtype)
    return make_node(p.data @ cols, (p,), lambda g: (g[..., None] * cols,))


def adjacent_diff(x):
    """Banded difference along the last axis: out[0] = 0, out[i] = x[i] - x[i-1]."""
    out = np.zeros_like(x.data)
    out[..., 1:] = x.data[..., 1:] - x.data[..., :-1]

    def backward(g):
        gx = np.zeros_like(g)
        gx[..., 1:] += g[..., 1:]
        gx[..., :-1] -= g[..., 1:]
        return (gx,)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------------- losses

def _check_same(a, t, name):
    if a.shape != np.shape(t):
        raise ShapeError(f"{name}: prediction {a.shape} vs target {np.shape(t)}")


def binary_cross_entropy(logits, targets):
    """Mean BCE computed from logits (numerically stable log-sigmoid form)."""
    _check_same(logits, targets, "binary_cross_entropy")
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    s = _sigmoid_np(z)
    return make_node(np.asarray(loss.mean(), dtype=z.dtype), (logits,),
                     lambda g: (g * (s - y) / n,))


def weighted_cross_entropy(logits, targets, pos_weight):
    """Mean of -[w y log p + (1 - y) log(1 - p)] with p = sigmoid(logits)."""
    _check_same(logits, targets, "weighted_cross_entropy")
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    # -log p = softplus(-z), -log(1-p) = softplus(z)
    sp_pos = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    sp_neg = sp_pos - z
    loss = pos_weight * y * sp_neg + (1.0 - y) * sp_pos
    n = z.size
    s = _sigmoid_np(z)

    def backward(g):
        return (g * (pos_weight * y * (s - 1.0) + (1.0 - y) * s) / n,)

    return make_node(np.asarray(loss.mean(), dtype=z.dtype), (logits,), backward)


def l1_loss(pred, target, mask=None):
    """Mean |pred - target| over entries where mask is nonzero (all if no mask)."""
    _check_same(pred, target, "l1_loss")
    t = np.asarray(target, dtype=pred.dtype)
    m = np.ones_like(pred.data) if mask is None else np.asarray(mask, dtype=pred.dtype)
    cnt = max(float(m.sum()), 1.0)
    d = pred.data - t
    sgn = np.sign(d) * m
    return make_node(np.asarray((np.abs(d) * m).sum() / cnt, dtype=pred.dtype), (pred,),
                     lambda g: (g * sgn / cnt,))


def l2_loss(pred, target, mask=None):
    """Mean squared error over masked entries."""
    _check_same(pred, target, "l2_loss")
    t = np.asarray(target, dtype=pred.dtype)
    m = np.ones_like(pred.data) if mask is None else np.asarray(mask, dtype=pred.dtype)
    cnt = max(float(m.sum()), 1.0)
    d = (pred.data - t) * m
    return make_node(np.asarray((d * d).sum() / cnt, dtype=pred.dtype), (pred,),
                     lambda g: (g * 2.0 * d / cnt,))
