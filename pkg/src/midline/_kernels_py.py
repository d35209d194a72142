"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and output layouts match the Cython module exactly so either can
back ``midline.kernels``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad):
    n_b, n_c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    # (N, C, Ho, Wo, k, k) -> (N, C, k, k, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n_b, n_c * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, n_c, h, w, k, stride, pad):
    n_b = cols.shape[0]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    c6 = cols.reshape(n_b, n_c, k, k, ho, wo)
    out = np.zeros((n_b, n_c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += c6[:, :, ki, kj]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def _corners(img, gx, gy, fill):
    n_b, n_c, h, w = img.shape
    pw = w + 2
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    # padded coordinates: real pixels live in 1..w, everything else is fill
    xi = np.clip(x0.astype(np.int64) + 1, 0, w + 1)
    xj = np.clip(x0.astype(np.int64) + 2, 0, w + 1)
    yi = np.clip(y0.astype(np.int64) + 1, 0, h + 1)
    yj = np.clip(y0.astype(np.int64) + 2, 0, h + 1)
    idx = [(yi * pw + xi), (yi * pw + xj), (yj * pw + xi), (yj * pw + xj)]
    idx = [i.reshape(n_b, 1, -1) for i in idx]
    imgp = np.pad(img, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=fill)
    flat = imgp.reshape(n_b, n_c, -1)
    vals = [np.take_along_axis(flat, np.broadcast_to(i, (n_b, n_c, i.shape[2])), axis=2)
            for i in idx]
    return fx, fy, idx, vals


def bilinear_sample(img, gx, gy, fill):
    n_b, n_c = img.shape[:2]
    ho, wo = gx.shape[1:]
    fx, fy, _, (v00, v01, v10, v11) = _corners(img, gx, gy, fill)
    fx = fx.reshape(n_b, 1, -1)
    fy = fy.reshape(n_b, 1, -1)
    out = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    return out.reshape(n_b, n_c, ho, wo).astype(img.dtype, copy=False)


def bilinear_sample_backward(grad, img, gx, gy, fill):
    n_b, n_c, h, w = img.shape
    ho, wo = gx.shape[1:]
    fx, fy, idx, (v00, v01, v10, v11) = _corners(img, gx, gy, fill)
    fx = fx.reshape(n_b, 1, -1)
    fy = fy.reshape(n_b, 1, -1)
    g = grad.reshape(n_b, n_c, -1)
    ggx = np.sum(g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10)), axis=1)
    ggy = np.sum(g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01)), axis=1)

    plane = (h + 2) * (w + 2)
    base = (np.arange(n_b * n_c).reshape(n_b, n_c, 1)) * plane
    weights = [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx]
    flat_idx = np.concatenate([(base + i).ravel() for i in idx])
    flat_w = np.concatenate([np.broadcast_to(g * wt, g.shape).ravel() for wt in weights])
    acc = np.bincount(flat_idx, weights=flat_w, minlength=n_b * n_c * plane)
    gimg = acc.reshape(n_b, n_c, h + 2, w + 2)[:, :, 1:h + 1, 1:w + 1]
    dt = img.dtype
    return (np.ascontiguousarray(gimg, dtype=dt),
            ggx.reshape(n_b, ho, wo).astype(dt, copy=False),
            ggy.reshape(n_b, ho, wo).astype(dt, copy=False))
