# cython: language_level=3
"""Compiled hot loops: direct 2-D cross-correlation and the separable DFT.

Inputs are validated and padded by :mod:`sodkit.tensor`; these routines
assume contiguous float64 buffers of consistent shape.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, M_PI

cnp.import_array()


def conv2d_valid(const double[:, :, :, ::1] xp,
                 const double[:, :, :, ::1] w,
                 const double[::1] bias,
                 int stride, int groups, int out_h, int out_w):
    """Cross-correlate an already zero-padded input.

    Per output element the accumulation order is (in-channel, k_h, k_w),
    fixed regardless of shape.
    """
    cdef Py_ssize_t n_b = xp.shape[0]
    cdef Py_ssize_t c_out = w.shape[0]
    cdef Py_ssize_t cin_g = w.shape[1]
    cdef Py_ssize_t k_h = w.shape[2]
    cdef Py_ssize_t k_w = w.shape[3]
    cdef Py_ssize_t cout_g = c_out // groups
    cdef Py_ssize_t b, oc, ic, ki, kj, oh, ow, g, src_c, row
    cdef double wv

    out = np.empty((n_b, c_out, out_h, out_w), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out

    with nogil:
        for b in range(n_b):
            for oc in range(c_out):
                g = oc // cout_g
                for oh in range(out_h):
                    for ow in range(out_w):
                        o[b, oc, oh, ow] = bias[oc]
                for ic in range(cin_g):
                    src_c = g * cin_g + ic
                    for ki in range(k_h):
                        for kj in range(k_w):
                            wv = w[oc, ic, ki, kj]
                            if wv == 0.0:
                                continue
                            for oh in range(out_h):
                                row = oh * stride + ki
                                for ow in range(out_w):
                                    o[b, oc, oh, ow] += wv * xp[b, src_c, row, ow * stride + kj]
    return out


cdef void _twiddles(Py_ssize_t n, double sign, double[::1] c, double[::1] s) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(n):
        c[k] = cos(2.0 * M_PI * k / n)
        s[k] = sign * sin(2.0 * M_PI * k / n)


def dft2_planes(const double[:, :, :, ::1] re, const double[:, :, :, ::1] im, bint inverse):
    """Separable 2-D DFT over the last two axes, returned as (real, imag).

    Forward is unnormalized with kernel exp(-2*pi*i*k*n/N); the inverse
    flips the sign and divides by H*W.
    """
    cdef Py_ssize_t n_b = re.shape[0]
    cdef Py_ssize_t n_c = re.shape[1]
    cdef Py_ssize_t H = re.shape[2]
    cdef Py_ssize_t W = re.shape[3]
    cdef double sign = 1.0 if inverse else -1.0
    cdef double scale = 1.0 / (H * W) if inverse else 1.0
    cdef Py_ssize_t b, c, h, u, v, x, k
    cdef double ar, ai, cr, ci, tr, ti

    cw_arr = np.empty(W, dtype=np.float64)
    sw_arr = np.empty(W, dtype=np.float64)
    ch_arr = np.empty(H, dtype=np.float64)
    sh_arr = np.empty(H, dtype=np.float64)
    cdef double[::1] cw = cw_arr, sw = sw_arr, ch = ch_arr, sh = sh_arr
    _twiddles(W, sign, cw, sw)
    _twiddles(H, sign, ch, sh)

    # full twiddle tables for the width pass: row x holds exp(sign*2*pi*i*x*v/W)
    idx = np.arange(W)
    kk = np.outer(idx, idx) % W
    mwc_arr = np.ascontiguousarray(cw_arr[kk])
    mws_arr = np.ascontiguousarray(sw_arr[kk])
    cdef double[:, ::1] mwc = mwc_arr, mws = mws_arr

    tmp_r_arr = np.empty((H, W), dtype=np.float64)
    tmp_i_arr = np.empty((H, W), dtype=np.float64)
    cdef double[:, ::1] tr_ = tmp_r_arr, ti_ = tmp_i_arr

    out_r = np.empty((n_b, n_c, H, W), dtype=np.float64)
    out_i = np.empty((n_b, n_c, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] orr = out_r, oi = out_i

    with nogil:
        for b in range(n_b):
            for c in range(n_c):
                # along width; inner loop over the contiguous output column
                tr_[:, :] = 0.0
                ti_[:, :] = 0.0
                for h in range(H):
                    for x in range(W):
                        ar = re[b, c, h, x]
                        ai = im[b, c, h, x]
                        for v in range(W):
                            tr_[h, v] += ar * mwc[x, v] - ai * mws[x, v]
                            ti_[h, v] += ar * mws[x, v] + ai * mwc[x, v]
                # along height
                orr[b, c, :, :] = 0.0
                oi[b, c, :, :] = 0.0
                for u in range(H):
                    for h in range(H):
                        k = (u * h) % H
                        cr = ch[k]
                        ci = sh[k]
                        for v in range(W):
                            tr = tr_[h, v]
                            ti = ti_[h, v]
                            orr[b, c, u, v] += tr * cr - ti * ci
                            oi[b, c, u, v] += tr * ci + ti * cr
                if scale != 1.0:
                    for u in range(H):
                        for v in range(W):
                            orr[b, c, u, v] *= scale
                            oi[b, c, u, v] *= scale
    return out_r, out_i
