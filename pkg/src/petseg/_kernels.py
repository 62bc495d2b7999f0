"""Compiled 3D cross-correlation kernels.

Stride-1 convolutions use a flat-shift formulation: with the padded input
flattened to ``(C, Dp*Hp*Wp)``, every kernel tap becomes a constant offset
into that buffer, so the whole correlation is a sum of shifted axpys over
long contiguous rows. The output is computed on the padded grid (anchored
at the window corner) and cropped afterwards. Strided convolutions are
rare in the network and small, so they go through numpy im2col.
"""
from __future__ import annotations

import numpy as np
import numba
from numba import njit, prange

_L1_BYTES = 32 * 1024


def _block_size(n_rows: int, itemsize: int) -> int:
    b = _L1_BYTES // max(1, n_rows * itemsize)
    return int(min(2048, max(32, b)))


@njit(parallel=True, cache=True, fastmath=True)
def _shift_correlate(src, w, offs, out, length, block, n_seg):
    # out[o, p] = sum_{i,t} w[o, i, t] * src[i, p + offs[t]]   for p < length
    # output channels are processed four at a time so each src load feeds 4 FMAs
    n_out, n_in, n_taps = w.shape
    n_blocks = (length + block - 1) // block
    n_seg = min(n_seg, n_blocks)
    for seg_id in prange(n_seg):
        acc = np.empty((n_out, block), dtype=out.dtype)
        for blk in range(seg_id, n_blocks, n_seg):
            p0 = blk * block
            m = min(block, length - p0)
            acc[:, :] = 0
            for i in range(n_in):
                row = src[i]
                for t in range(n_taps):
                    seg = row[p0 + offs[t]:p0 + offs[t] + m]
                    o = 0
                    while o + 4 <= n_out:
                        a0 = acc[o]
                        a1 = acc[o + 1]
                        a2 = acc[o + 2]
                        a3 = acc[o + 3]
                        w0 = w[o, i, t]
                        w1 = w[o + 1, i, t]
                        w2 = w[o + 2, i, t]
                        w3 = w[o + 3, i, t]
                        for k in range(m):
                            v = seg[k]
                            a0[k] += w0 * v
                            a1[k] += w1 * v
                            a2[k] += w2 * v
                            a3[k] += w3 * v
                        o += 4
                    while o < n_out:
                        a0 = acc[o]
                        w0 = w[o, i, t]
                        for k in range(m):
                            a0[k] += w0 * seg[k]
                        o += 1
            out[:, p0:p0 + m] = acc[:, :m]


@njit(parallel=True, cache=True, fastmath=True)
def _shift_weight_grad(g, g_off, src, offs, length, block, partial):
    # partial[blk, o, i, t] = sum_{p in blk} g[o, g_off + p] * src[i, p + offs[t]]
    n_out = g.shape[0]
    n_in = src.shape[0]
    n_taps = offs.shape[0]
    n_blocks = (length + block - 1) // block
    for blk in prange(n_blocks):
        p0 = blk * block
        m = min(block, length - p0)
        q0 = g_off + p0
        for i in range(n_in):
            row = src[i]
            for t in range(n_taps):
                seg = row[p0 + offs[t]:p0 + offs[t] + m]
                o = 0
                while o + 4 <= n_out:
                    g0 = g[o, q0:q0 + m]
                    g1 = g[o + 1, q0:q0 + m]
                    g2 = g[o + 2, q0:q0 + m]
                    g3 = g[o + 3, q0:q0 + m]
                    s0 = seg[0] * 0
                    s1 = s0
                    s2 = s0
                    s3 = s0
                    for k in range(m):
                        v = seg[k]
                        s0 += g0[k] * v
                        s1 += g1[k] * v
                        s2 += g2[k] * v
                        s3 += g3[k] * v
                    partial[blk, o, i, t] = s0
                    partial[blk, o + 1, i, t] = s1
                    partial[blk, o + 2, i, t] = s2
                    partial[blk, o + 3, i, t] = s3
                    o += 4
                while o < n_out:
                    g0 = g[o, q0:q0 + m]
                    s0 = seg[0] * 0
                    for k in range(m):
                        s0 += g0[k] * seg[k]
                    partial[blk, o, i, t] = s0
                    o += 1


def _tap_offsets(kernel, padded_shape):
    _, hp, wp = padded_shape
    kd, kh, kw = kernel
    return np.array(
        [a * hp * wp + b * wp + c for a in range(kd) for b in range(kh) for c in range(kw)],
        dtype=np.int64,
    )


def _pad(x, pad):
    pd, ph, pw = pad
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# -- stride 1 -----------------------------------------------------------------


def _corr_s1_forward(x, w, pad):
    n, cin = x.shape[:2]
    cout = w.shape[0]
    kernel = w.shape[2:]
    xp = np.ascontiguousarray(_pad(x, pad))
    dp, hp, wp = xp.shape[2:]
    od, oh, ow = dp - kernel[0] + 1, hp - kernel[1] + 1, wp - kernel[2] + 1
    offs = _tap_offsets(kernel, (dp, hp, wp))
    length = (od - 1) * hp * wp + (oh - 1) * wp + ow
    wf = np.ascontiguousarray(w.reshape(cout, cin, -1))
    block = _block_size(cout, x.itemsize)
    out = np.empty((n, cout, od, oh, ow), dtype=x.dtype)
    flat = np.zeros((cout, od * hp * wp), dtype=x.dtype)
    for s in range(n):
        _shift_correlate(xp[s].reshape(cin, -1), wf, offs, flat, length, block, numba.get_num_threads())
        out[s] = flat.reshape(cout, od, hp, wp)[:, :, :oh, :ow]
    return out, xp


def _corr_s1_backward(xp, w, gout, pad, need_input_grad=True):
    n, cin = xp.shape[:2]
    cout = w.shape[0]
    kernel = w.shape[2:]
    dp, hp, wp = xp.shape[2:]
    od, oh, ow = gout.shape[2:]
    offs = _tap_offsets(kernel, (dp, hp, wp))
    length = (od - 1) * hp * wp + (oh - 1) * wp + ow
    max_off = int(offs[-1])
    wt = np.ascontiguousarray(w.reshape(cout, cin, -1).transpose(1, 0, 2))
    offs_t = (max_off - offs).astype(np.int64)
    block_w = _block_size(max(cout, cin), xp.itemsize)
    n_blocks = (length + block_w - 1) // block_w
    partial = np.empty((n_blocks, cout, cin, offs.shape[0]), dtype=xp.dtype)
    gw = np.zeros((cout, cin, offs.shape[0]), dtype=np.float64)
    gx = np.empty((n, cin) + tuple(s - 2 * p for s, p in zip((dp, hp, wp), pad)), dtype=xp.dtype) if need_input_grad else None
    total = dp * hp * wp
    block_x = _block_size(cin, xp.itemsize)
    gpad = np.zeros((cout, max_off + total), dtype=xp.dtype)
    gxp = np.empty((cin, total), dtype=xp.dtype)
    pd, ph, pw = pad
    for s in range(n):
        grid = gpad[:, max_off:max_off + od * hp * wp].reshape(cout, od, hp, wp)
        grid[:, :, :oh, :ow] = gout[s]
        src = xp[s].reshape(cin, -1)
        _shift_weight_grad(gpad, max_off, src, offs, length, block_w, partial)
        gw += partial.sum(axis=0, dtype=np.float64)
        if need_input_grad:
            _shift_correlate(gpad, wt, offs_t, gxp, total, block_x, numba.get_num_threads())
            full = gxp.reshape(cin, dp, hp, wp)
            gx[s] = full[:, pd:dp - pd, ph:hp - ph, pw:wp - pw]
    return gx, gw.reshape(w.shape).astype(w.dtype)


# -- generic (im2col) ---------------------------------------------------------


def _im2col(xp, kernel, stride, out_shape):
    n, cin = xp.shape[:2]
    od, oh, ow = out_shape
    sd, sh, sw = stride
    cols = np.empty((n, cin) + tuple(kernel) + (od, oh, ow), dtype=xp.dtype)
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for c in range(kernel[2]):
                cols[:, :, a, b, c] = xp[:, :, a:a + sd * od:sd, b:b + sh * oh:sh, c:c + sw * ow:sw]
    return cols.reshape(n, cin * int(np.prod(kernel)), od * oh * ow)


def _corr_generic_forward(x, w, stride, pad):
    kernel = w.shape[2:]
    xp = _pad(x, pad)
    out_shape = tuple(out_extent(x.shape[2 + i], kernel[i], stride[i], pad[i]) for i in range(3))
    cols = _im2col(xp, kernel, stride, out_shape)
    wm = w.reshape(w.shape[0], -1)
    out = np.matmul(wm, cols).reshape((x.shape[0], w.shape[0]) + out_shape)
    return out, cols


def _corr_generic_backward(x_shape, w, cols, gout, stride, pad):
    n, cin = x_shape[:2]
    cout = w.shape[0]
    kernel = w.shape[2:]
    od, oh, ow = gout.shape[2:]
    g = gout.reshape(n, cout, -1)
    gw = np.einsum("nov,nkv->ok", g, cols).reshape(w.shape)
    gcols = np.matmul(w.reshape(cout, -1).T, g).reshape((n, cin) + tuple(kernel) + (od, oh, ow))
    pd, ph, pw = pad
    sd, sh, sw = stride
    gxp = np.zeros((n, cin, x_shape[2] + 2 * pd, x_shape[3] + 2 * ph, x_shape[4] + 2 * pw), dtype=gout.dtype)
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for c in range(kernel[2]):
                gxp[:, :, a:a + sd * od:sd, b:b + sh * oh:sh, c:c + sw * ow:sw] += gcols[:, :, a, b, c]
    gx = gxp[:, :, pd:pd + x_shape[2], ph:ph + x_shape[3], pw:pw + x_shape[4]]
    return np.ascontiguousarray(gx), gw


# -- dispatch -----------------------------------------------------------------


def _is_pointwise(w, stride, pad):
    return w.shape[2:] == (1, 1, 1) and tuple(stride) == (1, 1, 1) and tuple(pad) == (0, 0, 0)


def conv3d_forward(x, w, b, stride, pad):
    """Return ``(out, ctx)``; ``ctx`` is whatever the backward pass needs."""
    if _is_pointwise(w, stride, pad):
        out = np.einsum("oi,nidhw->nodhw", w[:, :, 0, 0, 0], x, optimize=True)
        ctx = ("pointwise", x)
    elif tuple(stride) == (1, 1, 1):
        out, xp = _corr_s1_forward(x, w, pad)
        ctx = ("shift", xp)
    else:
        out, cols = _corr_generic_forward(x, w, stride, pad)
        ctx = ("im2col", cols)
    out += b.reshape(1, -1, 1, 1, 1)
    return out, ctx


def conv3d_backward(ctx, x_shape, w, gout, stride, pad, need_input_grad=True):
    kind, saved = ctx
    gb = gout.sum(axis=(0, 2, 3, 4))
    if kind == "pointwise":
        wm = w[:, :, 0, 0, 0]
        gw = np.einsum("nodhw,nidhw->oi", gout, saved, optimize=True).reshape(w.shape)
        gx = np.einsum("oi,nodhw->nidhw", wm, gout, optimize=True) if need_input_grad else None
    elif kind == "shift":
        gx, gw = _corr_s1_backward(saved, w, np.ascontiguousarray(gout), pad, need_input_grad)
    else:
        gx, gw = _corr_generic_backward(x_shape, w, saved, gout, stride, pad)
    return gx, gw.astype(w.dtype, copy=False), gb.astype(w.dtype, copy=False)
