"""Pure-numpy convolution kernels.

All arrays are float64, channels-last. Inputs arrive already padded; the
caller owns padding. These routines back the Cython kernels when the
extension is not built and serve as the reference in the kernel tests.
"""
import numpy as np


def _windows(xp, kh, kw, stride):
    # (N, Ho, Wo, kh, kw, C) strided view over a padded batch
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sh, sw, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def conv_forward(xp, w, stride):
    kh, kw, ci, co = w.shape
    cols = _windows(np.ascontiguousarray(xp), kh, kw, stride)
    n, ho, wo = cols.shape[:3]
    out = cols.reshape(n * ho * wo, kh * kw * ci) @ w.reshape(kh * kw * ci, co)
    return out.reshape(n, ho, wo, co)


def conv_backward_input(gy, w, stride, hp, wp):
    kh, kw, ci, co = w.shape
    n, ho, wo, _ = gy.shape
    # (N*Ho*Wo, kh*kw*ci) contributions, scattered back window by window
    cols = (gy.reshape(-1, co) @ w.reshape(-1, co).T).reshape(n, ho, wo, kh, kw, ci)
    gx = np.zeros((n, hp, wp, ci))
    for u in range(kh):
        for v in range(kw):
            gx[:, u:u + stride * ho:stride, v:v + stride * wo:stride, :] += cols[:, :, :, u, v, :]
    return gx


def conv_backward_weights(xp, gy, stride, kh, kw):
    ci = xp.shape[3]
    co = gy.shape[3]
    cols = _windows(np.ascontiguousarray(xp), kh, kw, stride)
    gw = cols.reshape(-1, kh * kw * ci).T @ gy.reshape(-1, co)
    return gw.reshape(kh, kw, ci, co)
