"""Numpy implementations of the hot kernels.

Same signatures as the compiled ``sodkit._kernels`` module. Used when the
extension is not built or when ``SODKIT_BACKEND=python`` is set.
"""
import numpy as np


def conv2d_valid(xp, w, bias, stride, groups, out_h, out_w):
    n_b = xp.shape[0]
    c_out, cin_g, k_h, k_w = w.shape
    cout_g = c_out // groups
    out = np.empty((n_b, groups, cout_g, out_h, out_w), dtype=np.float64)
    out[...] = np.asarray(bias).reshape(1, groups, cout_g, 1, 1)
    xg = xp.reshape(n_b, groups, cin_g, xp.shape[2], xp.shape[3])
    wg = w.reshape(groups, cout_g, cin_g, k_h, k_w)
    row_end = (out_h - 1) * stride + 1
    col_end = (out_w - 1) * stride + 1
    for ki in range(k_h):
        for kj in range(k_w):
            taps = wg[:, :, :, ki, kj]
            if not taps.any():
                continue
            patch = xg[:, :, :, ki:ki + row_end:stride, kj:kj + col_end:stride]
            out += np.einsum("bgchw,goc->bgohw", patch, taps, optimize=False)
    return out.reshape(n_b, c_out, out_h, out_w)


def _dft_matrix(n, sign):
    idx = np.arange(n)
    k = np.outer(idx, idx) % n
    return np.exp(sign * 2j * np.pi * k / n)


def dft2_planes(re, im, inverse):
    H, W = re.shape[2], re.shape[3]
    sign = 1.0 if inverse else -1.0
    fh = _dft_matrix(H, sign)
    fw = _dft_matrix(W, sign)
    z = re + 1j * im
    out = fh @ z @ fw.T
    if inverse:
        out = out / (H * W)
    return np.ascontiguousarray(out.real), np.ascontiguousarray(out.imag)
