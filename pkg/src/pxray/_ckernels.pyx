# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (same contracts as ``_kernels_py``).

Window gathering (im2col) and scatter-add (col2im) run as C loops; the
contractions go straight to BLAS ``dgemm``.
"""
import numpy as np
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm


cdef void _gemm_rm(bint ta, bint tb, int m, int n, int k, const double *a, const double *b,
                   double *c) noexcept nogil:
    # row-major C[m,n] = op(A)[m,k] @ op(B)[k,n]; computed as C^T = op(B)^T op(A)^T
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef int lda = m if ta else k
    cdef int ldb = k if tb else n
    cdef int ldc = n
    cdef double one = 1.0, zero = 0.0
    dgemm(&cb, &ca, &n, &m, &k, &one, <double *>b, &ldb, <double *>a, &lda, &zero, c, &ldc)


cdef void _im2col(const double[:, :, :, ::1] xp, double[:, ::1] cols, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    # one kernel row of a window is kw * ci contiguous doubles in xp
    cdef Py_ssize_t n = xp.shape[0], ci = xp.shape[3]
    cdef Py_ssize_t run = kw * ci
    cdef size_t nbytes = run * sizeof(double)
    cdef Py_ssize_t b, i, j, u, r = 0
    cdef double *dst
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                dst = &cols[r, 0]
                for u in range(kh):
                    memcpy(dst + u * run, &xp[b, i * stride + u, j * stride, 0], nbytes)
                r += 1


def conv_forward(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] w, Py_ssize_t stride):
    cdef Py_ssize_t n = xp.shape[0], hp = xp.shape[1], wp = xp.shape[2], ci = xp.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], co = w.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    cdef Py_ssize_t kdim = kh * kw * ci
    cols_arr = np.empty((n * ho * wo, kdim))
    out_arr = np.empty((n, ho, wo, co))
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        _im2col(xp, cols, kh, kw, stride, ho, wo)
        _gemm_rm(False, False, <int>(n * ho * wo), <int>co, <int>kdim, &cols[0, 0], &w[0, 0, 0, 0],
                 &out[0, 0, 0, 0])
    return out_arr


def conv_backward_input(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] w,
                        Py_ssize_t stride, Py_ssize_t hp, Py_ssize_t wp):
    cdef Py_ssize_t n = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2], co = gy.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], ci = w.shape[2]
    cdef Py_ssize_t kdim = kh * kw * ci
    dcols_arr = np.empty((n * ho * wo, kdim))
    gx_arr = np.zeros((n, hp, wp, ci))
    cdef double[:, ::1] dcols = dcols_arr
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, i, j, u, v, c, r = 0, q
    cdef const double *src
    cdef double *dst
    with nogil:
        _gemm_rm(False, True, <int>(n * ho * wo), <int>kdim, <int>co, &gy[0, 0, 0, 0], &w[0, 0, 0, 0],
                 &dcols[0, 0])
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    src = &dcols[r, 0]
                    q = 0
                    for u in range(kh):
                        for v in range(kw):
                            dst = &gx[b, i * stride + u, j * stride + v, 0]
                            for c in range(ci):
                                dst[c] += src[q]
                                q += 1
                    r += 1
    return gx_arr


def conv_backward_weights(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] gy,
                          Py_ssize_t stride, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = xp.shape[0], ci = xp.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2], co = gy.shape[3]
    cdef Py_ssize_t kdim = kh * kw * ci
    cols_arr = np.empty((n * ho * wo, kdim))
    gw_arr = np.empty((kh, kw, ci, co))
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    with nogil:
        _im2col(xp, cols, kh, kw, stride, ho, wo)
        _gemm_rm(True, False, <int>kdim, <int>co, <int>(n * ho * wo), &cols[0, 0], &gy[0, 0, 0, 0],
                 &gw[0, 0, 0, 0])
    return gw_arr
