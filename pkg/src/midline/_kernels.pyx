# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution unfolding and bilinear sampling.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature; ``midline.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.string cimport memcpy, memset

ctypedef fused real:
    float
    double


cdef inline void _valid_range(Py_ssize_t kj, int stride, int pad, Py_ssize_t w,
                              Py_ssize_t wo, Py_ssize_t* lo, Py_ssize_t* hi) nogil:
    # output columns ox with 0 <= ox*stride + kj - pad < w
    cdef Py_ssize_t a = pad - kj
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    cdef Py_ssize_t b = w - 1 + pad - kj
    hi[0] = -1 if b < 0 else b // stride
    if hi[0] > wo - 1:
        hi[0] = wo - 1


def im2col(const real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n_b = x.shape[0], n_c = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n_b, n_c * k * k, ho * wo), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, ki, kj, oy, ox, iy, row, lo, hi, off
    cdef const real* src
    cdef real* dst
    with nogil:
        for b in range(n_b):
            for c in range(n_c):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        _valid_range(kj, stride, pad, w, wo, &lo, &hi)
                        off = kj - pad
                        for oy in range(ho):
                            iy = oy * stride + ki - pad
                            dst = &out[b, row, oy * wo]
                            if iy < 0 or iy >= h or hi < lo:
                                memset(dst, 0, wo * sizeof(real))
                                continue
                            # padding columns only; the rest is overwritten below
                            for ox in range(lo):
                                dst[ox] = 0
                            for ox in range(hi + 1, wo):
                                dst[ox] = 0
                            src = &x[b, c, iy, 0]
                            if stride == 1:
                                memcpy(dst + lo, src + lo + off, (hi - lo + 1) * sizeof(real))
                            else:
                                for ox in range(lo, hi + 1):
                                    dst[ox] = src[ox * stride + off]
    return out_arr


def col2im(const real[:, :, ::1] cols, Py_ssize_t n_c, Py_ssize_t h, Py_ssize_t w,
           int k, int stride, int pad):
    cdef Py_ssize_t n_b = cols.shape[0]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_b, n_c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, ki, kj, oy, ox, iy, row, lo, hi, base, off
    with nogil:
        for b in range(n_b):
            for c in range(n_c):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        _valid_range(kj, stride, pad, w, wo, &lo, &hi)
                        off = kj - pad
                        for oy in range(ho):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            base = oy * wo
                            for ox in range(lo, hi + 1):
                                out[b, c, iy, ox * stride + off] += cols[b, row, base + ox]
    return out_arr


def bilinear_sample(const real[:, :, :, ::1] img, const real[:, :, ::1] gx,
                    const real[:, :, ::1] gy, double fill):
    cdef Py_ssize_t n_b = img.shape[0], n_c = img.shape[1]
    cdef Py_ssize_t h = img.shape[2], w = img.shape[3]
    cdef Py_ssize_t ho = gx.shape[1], wo = gx.shape[2]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n_b, n_c, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, oy, ox, x0, y0
    cdef double sx, sy, fx, fy, v00, v01, v10, v11
    cdef bint in_x0, in_x1, in_y0, in_y1
    for b in range(n_b):
        for oy in range(ho):
            for ox in range(wo):
                sx = gx[b, oy, ox]
                sy = gy[b, oy, ox]
                x0 = <Py_ssize_t>floor(sx)
                y0 = <Py_ssize_t>floor(sy)
                fx = sx - x0
                fy = sy - y0
                in_x0 = 0 <= x0 < w
                in_x1 = 0 <= x0 + 1 < w
                in_y0 = 0 <= y0 < h
                in_y1 = 0 <= y0 + 1 < h
                for c in range(n_c):
                    v00 = img[b, c, y0, x0] if (in_y0 and in_x0) else fill
                    v01 = img[b, c, y0, x0 + 1] if (in_y0 and in_x1) else fill
                    v10 = img[b, c, y0 + 1, x0] if (in_y1 and in_x0) else fill
                    v11 = img[b, c, y0 + 1, x0 + 1] if (in_y1 and in_x1) else fill
                    out[b, c, oy, ox] = ((1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                                         + fy * ((1.0 - fx) * v10 + fx * v11))
    return out_arr


def bilinear_sample_backward(const real[:, :, :, ::1] grad, const real[:, :, :, ::1] img,
                             const real[:, :, ::1] gx, const real[:, :, ::1] gy, double fill):
    cdef Py_ssize_t n_b = img.shape[0], n_c = img.shape[1]
    cdef Py_ssize_t h = img.shape[2], w = img.shape[3]
    cdef Py_ssize_t ho = gx.shape[1], wo = gx.shape[2]
    dtype = np.float32 if real is float else np.float64
    gimg_arr = np.zeros((n_b, n_c, h, w), dtype=dtype)
    ggx_arr = np.zeros((n_b, ho, wo), dtype=dtype)
    ggy_arr = np.zeros((n_b, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] gimg = gimg_arr
    cdef real[:, :, ::1] ggx = ggx_arr
    cdef real[:, :, ::1] ggy = ggy_arr
    cdef Py_ssize_t b, c, oy, ox, x0, y0
    cdef double sx, sy, fx, fy, g, v00, v01, v10, v11, acc_x, acc_y
    cdef bint in_x0, in_x1, in_y0, in_y1
    for b in range(n_b):
        for oy in range(ho):
            for ox in range(wo):
                sx = gx[b, oy, ox]
                sy = gy[b, oy, ox]
                x0 = <Py_ssize_t>floor(sx)
                y0 = <Py_ssize_t>floor(sy)
                fx = sx - x0
                fy = sy - y0
                in_x0 = 0 <= x0 < w
                in_x1 = 0 <= x0 + 1 < w
                in_y0 = 0 <= y0 < h
                in_y1 = 0 <= y0 + 1 < h
                acc_x = 0.0
                acc_y = 0.0
                for c in range(n_c):
                    g = grad[b, c, oy, ox]
                    if in_y0 and in_x0:
                        v00 = img[b, c, y0, x0]
                        gimg[b, c, y0, x0] += g * (1.0 - fy) * (1.0 - fx)
                    else:
                        v00 = fill
                    if in_y0 and in_x1:
                        v01 = img[b, c, y0, x0 + 1]
                        gimg[b, c, y0, x0 + 1] += g * (1.0 - fy) * fx
                    else:
                        v01 = fill
                    if in_y1 and in_x0:
                        v10 = img[b, c, y0 + 1, x0]
                        gimg[b, c, y0 + 1, x0] += g * fy * (1.0 - fx)
                    else:
                        v10 = fill
                    if in_y1 and in_x1:
                        v11 = img[b, c, y0 + 1, x0 + 1]
                        gimg[b, c, y0 + 1, x0 + 1] += g * fy * fx
                    else:
                        v11 = fill
                    acc_x += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                    acc_y += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
                ggx[b, oy, ox] = acc_x
                ggy[b, oy, ox] = acc_y
    return gimg_arr, ggx_arr, ggy_arr
