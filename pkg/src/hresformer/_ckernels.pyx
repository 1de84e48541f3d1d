# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (channels-last, 3 spatial axes)."""
import numpy as np

ctypedef fused real:
    float
    double


cdef object _dtype(real[:, :, :, :, ::1] x):
    if real is float:
        return np.float32
    else:
        return np.float64


def im2col(real[:, :, :, :, ::1] xp, ksize, stride, out_shape):
    cdef Py_ssize_t kd = ksize[0], kh = ksize[1], kw = ksize[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[4]
    out = np.empty((N, Do, Ho, Wo, kd * kh * kw * C), dtype=_dtype(xp))
    cdef real[:, :, :, :, ::1] o = out
    cdef Py_ssize_t n, d, h, w, a, b, c, ch, k
    with nogil:
        for n in range(N):
            for d in range(Do):
                for h in range(Ho):
                    for w in range(Wo):
                        k = 0
                        for a in range(kd):
                            for b in range(kh):
                                for c in range(kw):
                                    for ch in range(C):
                                        o[n, d, h, w, k] = xp[n, d * sd + a, h * sh + b, w * sw + c, ch]
                                        k += 1
    return out.reshape(N, Do, Ho, Wo, kd, kh, kw, C)


def col2im_flat(real[:, :, :, :, ::1] cols, ksize, padded_shape, stride):
    cdef Py_ssize_t N = cols.shape[0], Do = cols.shape[1], Ho = cols.shape[2], Wo = cols.shape[3]
    cdef Py_ssize_t kd = ksize[0], kh = ksize[1], kw = ksize[2]
    cdef Py_ssize_t C = cols.shape[4] // (kd * kh * kw)
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    out = np.zeros((N, padded_shape[0], padded_shape[1], padded_shape[2], C), dtype=_dtype(cols))
    cdef real[:, :, :, :, ::1] o = out
    cdef Py_ssize_t n, d, h, w, a, b, c, ch, k
    with nogil:
        for n in range(N):
            for d in range(Do):
                for h in range(Ho):
                    for w in range(Wo):
                        k = 0
                        for a in range(kd):
                            for b in range(kh):
                                for c in range(kw):
                                    for ch in range(C):
                                        o[n, d * sd + a, h * sh + b, w * sw + c, ch] += cols[n, d, h, w, k]
                                        k += 1
    return out


def col2im(cols, padded_shape, stride):
    N, Do, Ho, Wo, kd, kh, kw, C = cols.shape
    flat = np.ascontiguousarray(cols).reshape(N, Do, Ho, Wo, kd * kh * kw * C)
    return col2im_flat(flat, (kd, kh, kw), padded_shape, stride)


def dw_forward(real[:, :, :, :, ::1] xp, real[:, :, :, ::1] wk, stride, out_shape):
    cdef Py_ssize_t kd = wk.shape[0], kh = wk.shape[1], kw = wk.shape[2], C = wk.shape[3]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    cdef Py_ssize_t N = xp.shape[0]
    out = np.zeros((N, Do, Ho, Wo, C), dtype=_dtype(xp))
    cdef real[:, :, :, :, ::1] o = out
    cdef Py_ssize_t n, d, h, w, a, b, c, ch
    with nogil:
        for n in range(N):
            for d in range(Do):
                for h in range(Ho):
                    for w in range(Wo):
                        for a in range(kd):
                            for b in range(kh):
                                for c in range(kw):
                                    for ch in range(C):
                                        o[n, d, h, w, ch] += xp[n, d * sd + a, h * sh + b, w * sw + c, ch] * wk[a, b, c, ch]
    return out


def dw_backward(real[:, :, :, :, ::1] xp, real[:, :, :, ::1] wk, real[:, :, :, :, ::1] g, stride):
    cdef Py_ssize_t kd = wk.shape[0], kh = wk.shape[1], kw = wk.shape[2], C = wk.shape[3]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t N = g.shape[0], Do = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    gx_arr = np.zeros((xp.shape[0], xp.shape[1], xp.shape[2], xp.shape[3], C), dtype=_dtype(xp))
    gw_arr = np.zeros((kd, kh, kw, C), dtype=_dtype(xp))
    cdef real[:, :, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t n, d, h, w, a, b, c, ch
    cdef real gv
    with nogil:
        for n in range(N):
            for d in range(Do):
                for h in range(Ho):
                    for w in range(Wo):
                        for a in range(kd):
                            for b in range(kh):
                                for c in range(kw):
                                    for ch in range(C):
                                        gv = g[n, d, h, w, ch]
                                        gx[n, d * sd + a, h * sh + b, w * sw + c, ch] += gv * wk[a, b, c, ch]
                                        gw[a, b, c, ch] += gv * xp[n, d * sd + a, h * sh + b, w * sw + c, ch]
    return gx_arr, gw_arr
