# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the content-adaptive (modulated) convolution.

    out[b, o, y, x] = sum_{c, ky, kx} w[o, c, ky, kx] * m[b, ky*K+kx, y, x]
                                      * xpad[b, c, y*s+ky, x*s+kx]

``xpad`` is already padded; ``m`` holds one modulation value per output
pixel and kernel tap.  Each batch item is lowered to one modulated im2col
buffer followed by a BLAS gemm.  The backward pass recomputes that buffer
instead of caching it.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef inline void _gemm(real* A, real* B, real* C, int m, int n, int k,
                       bint trans_a, bint trans_b, real beta) noexcept nogil:
    # row-major C[m, n] = op(A)[m, k] @ op(B)[k, n] + beta * C
    cdef char ta = b'T' if trans_a else b'N'
    cdef char tb = b'T' if trans_b else b'N'
    cdef int lda = m if trans_a else k
    cdef int ldb = k if trans_b else n
    cdef real one = 1
    if real is float:
        sgemm(&tb, &ta, &n, &m, &k, &one, B, &ldb, A, &lda, &beta, C, &n)
    else:
        dgemm(&tb, &ta, &n, &m, &k, &one, B, &ldb, A, &lda, &beta, C, &n)


cdef void _fill_cols(real[:, :, ::1] xpad, real[:, :, ::1] mod, real[:, ::1] cols,
                     int K, int stride, int Ho, int Wo) noexcept nogil:
    cdef Py_ssize_t C = xpad.shape[0]
    cdef Py_ssize_t c, ky, kx, y, x, row, k
    for c in range(C):
        for ky in range(K):
            for kx in range(K):
                k = ky * K + kx
                row = c * K * K + k
                for y in range(Ho):
                    for x in range(Wo):
                        cols[row, y * Wo + x] = mod[k, y, x] * xpad[c, y * stride + ky, x * stride + kx]


def _dtype_of(real[:, :, :, ::1] arr):
    if real is float:
        return np.float32
    return np.float64


def modulated_conv_forward(real[:, :, :, ::1] xpad, real[:, :, :, ::1] mod,
                           real[:, :, :, ::1] weight, int stride=1):
    """Forward pass. Shapes: xpad (B,C,Hp,Wp), mod (B,K*K,Ho,Wo), weight (O,C,K,K)."""
    cdef int B = xpad.shape[0], C = xpad.shape[1]
    cdef int O = weight.shape[0], K = weight.shape[2]
    cdef int Ho = mod.shape[2], Wo = mod.shape[3]
    if weight.shape[1] != C or weight.shape[3] != K:
        raise ValueError("weight shape does not match input channels / square kernel")
    if mod.shape[0] != B or mod.shape[1] != K * K:
        raise ValueError("modulation must have shape (B, K*K, Ho, Wo)")
    if (Ho - 1) * stride + K > xpad.shape[2] or (Wo - 1) * stride + K > xpad.shape[3]:
        raise ValueError("output extent exceeds padded input")
    dt = _dtype_of(xpad)
    cdef int CK = C * K * K, HW = Ho * Wo
    out_arr = np.empty((B, O, Ho, Wo), dtype=dt)
    cols_arr = np.empty((CK, HW), dtype=dt)
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[:, ::1] cols = cols_arr
    cdef real[:, :, :, ::1] w = weight
    cdef int b
    with nogil:
        for b in range(B):
            _fill_cols(xpad[b], mod[b], cols, K, stride, Ho, Wo)
            _gemm(&w[0, 0, 0, 0], &cols[0, 0], &out[b, 0, 0, 0], O, HW, CK, False, False, 0)
    return out_arr


def modulated_conv_backward(real[:, :, :, ::1] grad_out, real[:, :, :, ::1] xpad,
                            real[:, :, :, ::1] mod, real[:, :, :, ::1] weight, int stride=1):
    """Gradients w.r.t. (xpad, mod, weight) given d(loss)/d(out)."""
    cdef int B = xpad.shape[0], C = xpad.shape[1]
    cdef int O = weight.shape[0], K = weight.shape[2]
    cdef int Ho = mod.shape[2], Wo = mod.shape[3]
    cdef int CK = C * K * K, HW = Ho * Wo, KK = K * K
    dt = _dtype_of(xpad)
    gx_arr = np.zeros_like(np.asarray(xpad))
    gm_arr = np.zeros_like(np.asarray(mod))
    gw_arr = np.zeros_like(np.asarray(weight))
    cols_arr = np.empty((CK, HW), dtype=dt)
    gcols_arr = np.empty((CK, HW), dtype=dt)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] gm = gm_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[:, ::1] cols = cols_arr
    cdef real[:, ::1] gcols = gcols_arr
    cdef real[:, :, :, ::1] w = weight
    cdef int b, c, ky, kx, y, x, k, row, iy, ix
    cdef real g
    with nogil:
        for b in range(B):
            _fill_cols(xpad[b], mod[b], cols, K, stride, Ho, Wo)
            # dW += dOut[b] @ cols^T
            _gemm(&grad_out[b, 0, 0, 0], &cols[0, 0], &gw[0, 0, 0, 0], O, CK, HW, False, True, 1)
            # dCols = W^T @ dOut[b]
            _gemm(&w[0, 0, 0, 0], &grad_out[b, 0, 0, 0], &gcols[0, 0], CK, HW, O, True, False, 0)
            for c in range(C):
                for k in range(KK):
                    ky = k // K
                    kx = k - ky * K
                    row = c * KK + k
                    for y in range(Ho):
                        iy = y * stride + ky
                        for x in range(Wo):
                            ix = x * stride + kx
                            g = gcols[row, y * Wo + x]
                            gm[b, k, y, x] += g * xpad[b, c, iy, ix]
                            gx[b, c, iy, ix] += g * mod[b, k, y, x]
    return gx_arr, gm_arr, gw_arr
