"""Compiled kernels for depthwise convolution and batch norm.

Depthwise inputs are padded and flattened to (N, C, Hp*Wp); a stride-1
correlation is then a sum of shifted 1-D axpys over the flat buffer, done one
(sample, channel) plane at a time in a small scratch buffer. Strided, compact
outputs are gathered from (or gradients scattered into) that buffer; positions
in the wrap-around columns never leave it.

Batch-norm kernels work on (N, C, L) views and accumulate in float64.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def _dw_taps(xs, w, c, wp, m, r0, c0, buf):
    buf[:] = 0
    for i in range(w.shape[1]):
        for j in range(w.shape[2]):
            wv = w[c, i, j]
            off = (i + r0) * wp + j + c0
            xv = xs[off : off + m]  # slicing keeps the index provably in range, so the loop vectorizes
            for k in range(m):
                buf[k] += wv * xv[k]


@numba.njit(cache=True, fastmath=True)
def dw_forward(xp, w, wp, m, r0, c0, s0, s1, ho, wo):
    """Depthwise correlation of padded flat ``xp`` into a compact (N, C, ho*wo) output."""
    n_batch, n_ch, _ = xp.shape
    out = np.empty((n_batch, n_ch, ho * wo), dtype=xp.dtype)
    buf = np.empty(m, dtype=xp.dtype)
    for n in range(n_batch):
        for c in range(n_ch):
            _dw_taps(xp[n, c], w, c, wp, m, r0, c0, buf)
            oc = out[n, c]
            for r in range(ho):
                row = buf[r * s0 * wp :: s1]
                orow = oc[r * wo : (r + 1) * wo]
                for k in range(wo):
                    orow[k] = row[k]
    return out


@numba.njit(cache=True, fastmath=True)
def dw_forward_affine(xp, w, wp, m, r0, c0, s0, s1, ho, wo, scale, shift, out):
    """``out += scale[c] * dw(xp) + shift[c]`` without materializing the branch output."""
    n_batch, n_ch, _ = xp.shape
    buf = np.empty(m, dtype=xp.dtype)
    for n in range(n_batch):
        for c in range(n_ch):
            _dw_taps(xp[n, c], w, c, wp, m, r0, c0, buf)
            a = scale[c]
            b = shift[c]
            oc = out[n, c]
            for r in range(ho):
                row = buf[r * s0 * wp :: s1]
                orow = oc[r * wo : (r + 1) * wo]
                for k in range(wo):
                    orow[k] += a * row[k] + b


@numba.njit(cache=True, fastmath=True)
def dw_backward(g, xp, w, wp, m, r0, c0, s0, s1, ho, wo, dxp, need_x, need_w):
    """Gradients of :func:`dw_forward` for a compact output gradient ``g``.

    The input gradient is accumulated into the padded flat buffer ``dxp``; the
    weight gradient is returned in float64.
    """
    n_batch, n_ch, _ = g.shape
    k0, k1 = w.shape[1], w.shape[2]
    dw = np.zeros((n_ch, k0, k1), dtype=np.float64)
    buf = np.zeros(m, dtype=g.dtype)
    for n in range(n_batch):
        for c in range(n_ch):
            gc = g[n, c]
            for r in range(ho):
                row = buf[r * s0 * wp :: s1]
                grow = gc[r * wo : (r + 1) * wo]
                for k in range(wo):
                    row[k] = grow[k]
            for i in range(k0):
                for j in range(k1):
                    off = (i + r0) * wp + j + c0
                    if need_x:
                        wv = w[c, i, j]
                        ds = dxp[n, c, off : off + m]
                        for k in range(m):
                            ds[k] += wv * buf[k]
                    if need_w:
                        xv = xp[n, c, off : off + m]
                        acc = 0.0
                        for k in range(m):
                            acc += buf[k] * xv[k]
                        dw[c, i, j] += acc
    return dw


@numba.njit(cache=True, fastmath=True)
def bn_stats(x):
    """Per-channel mean and biased variance of (N, C, L), two-pass in float64."""
    n_batch, n_ch, length = x.shape
    mean = np.zeros(n_ch)
    var = np.zeros(n_ch)
    cnt = n_batch * length
    for c in range(n_ch):
        s = 0.0
        for n in range(n_batch):
            for k in range(length):
                s += x[n, c, k]
        mu = s / cnt
        ss = 0.0
        for n in range(n_batch):
            for k in range(length):
                d = x[n, c, k] - mu
                ss += d * d
        mean[c] = mu
        var[c] = ss / cnt
    return mean, var


@numba.njit(cache=True, fastmath=True)
def affine_accumulate(x, scale, shift, out):
    """``out[n, c, :] += x[n, c, :] * scale[c] + shift[c]``."""
    n_batch, n_ch, length = x.shape
    for n in range(n_batch):
        for c in range(n_ch):
            a = scale[c]
            b = shift[c]
            xs = x[n, c]
            os = out[n, c]
            for k in range(length):
                os[k] += xs[k] * a + b


@numba.njit(cache=True, fastmath=True)
def affine(x, scale, shift):
    """``out[n, c, :] = x[n, c, :] * scale[c] + shift[c]``."""
    n_batch, n_ch, length = x.shape
    out = np.empty_like(x)
    for n in range(n_batch):
        for c in range(n_ch):
            a = scale[c]
            b = shift[c]
            xs = x[n, c]
            os = out[n, c]
            for k in range(length):
                os[k] = xs[k] * a + b
    return out


@numba.njit(cache=True, fastmath=True)
def bn_backward_sums(g, x, mean, inv):
    """Per-channel ``sum(g)`` and ``sum(g * xhat)`` in float64."""
    n_batch, n_ch, length = x.shape
    sg = np.zeros(n_ch)
    sgx = np.zeros(n_ch)
    for c in range(n_ch):
        mu = mean[c]
        a = 0.0
        b = 0.0
        for n in range(n_batch):
            for k in range(length):
                gv = g[n, c, k]
                a += gv
                b += gv * (x[n, c, k] - mu)
        sg[c] = a
        sgx[c] = b * inv[c]
    return sg, sgx


@numba.njit(cache=True, fastmath=True)
def bn_backward_input(g, x, mean, inv, gamma, sg, sgx, cnt):
    n_batch, n_ch, length = x.shape
    gx = np.empty_like(g)
    for c in range(n_ch):
        k1 = gamma[c] * inv[c]
        mg = sg[c] / cnt
        mgx = sgx[c] / cnt
        mu = mean[c]
        iv = inv[c]
        for n in range(n_batch):
            gs = g[n, c]
            xs = x[n, c]
            os = gx[n, c]
            for k in range(length):
                os[k] = k1 * (gs[k] - mg - (xs[k] - mu) * iv * mgx)
    return gx
