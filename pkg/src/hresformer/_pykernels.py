"""Pure-numpy convolution kernels (channels-last, 3 spatial axes).

Shapes follow the compiled kernels exactly so either can back ``kernels``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _span(start, stride, n):
    return slice(start, start + stride * (n - 1) + 1, stride)


def im2col(xp, ksize, stride, out_shape):
    """(N,Dp,Hp,Wp,C) -> (N,Do,Ho,Wo,kd,kh,kw,C) patch tensor."""
    kd, kh, kw = ksize
    sd, sh, sw = stride
    Do, Ho, Wo = out_shape
    v = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    v = v[:, _span(0, sd, Do), _span(0, sh, Ho), _span(0, sw, Wo)]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 3, 5, 6, 7, 4))


def col2im(cols, padded_shape, stride):
    """Adjoint of ``im2col``: scatter-add patches back onto the padded grid."""
    N, Do, Ho, Wo, kd, kh, kw, C = cols.shape
    Dp, Hp, Wp = padded_shape
    sd, sh, sw = stride
    out = np.zeros((N, Dp, Hp, Wp, C), dtype=cols.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                out[:, _span(a, sd, Do), _span(b, sh, Ho), _span(c, sw, Wo)] += cols[:, :, :, :, a, b, c]
    return out


def dw_forward(xp, wk, stride, out_shape):
    """Depth-wise conv; ``wk`` is (kd,kh,kw,C)."""
    kd, kh, kw, C = wk.shape
    sd, sh, sw = stride
    Do, Ho, Wo = out_shape
    out = np.zeros((xp.shape[0], Do, Ho, Wo, C), dtype=xp.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                out += xp[:, _span(a, sd, Do), _span(b, sh, Ho), _span(c, sw, Wo)] * wk[a, b, c]
    return out


def dw_backward(xp, wk, g, stride):
    kd, kh, kw, C = wk.shape
    sd, sh, sw = stride
    Do, Ho, Wo = g.shape[1:4]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(wk)
    g2 = g.reshape(-1, C)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                sl = (slice(None), _span(a, sd, Do), _span(b, sh, Ho), _span(c, sw, Wo))
                gxp[sl] += g * wk[a, b, c]
                gw[a, b, c] = np.einsum("ic,ic->c", xp[sl].reshape(-1, C), g2)
    return gxp, gw
