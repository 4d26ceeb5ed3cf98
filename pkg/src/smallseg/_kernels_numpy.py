"""Pure-numpy implementations of the hot kernels.

Signature-compatible with ``_kernels_numba``. These are the reference /
fallback path: vectorized, allocation-heavier, and noticeably slower on
the convolution and fusion kernels (see ``benchmarks/bench_kernels.py``),
but they produce the same results within floating-point reassociation
noise and run anywhere numpy does.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pad1(x, apply_relu):
    if apply_relu:
        x = np.maximum(x, 0)
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))


def _col_from_padded(xp):
    # xp: (C, Z+2, Y+2, X+2) -> (Z*Y*X, C*27)
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    C, Z, Y, X = win.shape[:4]
    col = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(Z * Y * X, C * 27)
    return np.ascontiguousarray(col)


def conv3_fwd(xp, w, bias, out):
    Co = w.shape[0]
    col = _col_from_padded(xp)
    wmat = w.reshape(Co, -1).T
    flat = col @ wmat
    flat += bias[None, :]
    out[...] = flat.T.reshape(out.shape)


def conv3_dw(xp, dout, dw):
    Co = dout.shape[0]
    col = _col_from_padded(xp)
    flat = dout.reshape(Co, -1) @ col
    dw[...] = flat.reshape(dw.shape)


def im2col_k3(arr, col):
    col[...] = _col_from_padded(np.pad(arr, ((0, 0), (1, 1), (1, 1), (1, 1))))


def relu_bwd(dout, pre, dx):
    np.multiply(dout, pre > 0, out=dx)


def softmax_ce_grad(scores, labels, weights, grad, loss_per_row):
    m = scores.max(axis=0)
    e = np.exp(scores.astype(np.float64) - m[None, :])
    s = e.sum(axis=0)
    p = e / s[None, :]
    n = scores.shape[1]
    idx = np.arange(n)
    wt = weights[labels]
    loss_per_row[...] = wt * (np.log(s) + m - scores[labels, idx].astype(np.float64))
    g = p
    g[labels, idx] -= 1.0
    grad[...] = (wt[None, :] * g).astype(grad.dtype)


def softmax_channels(scores, probs):
    m = scores.max(axis=0)
    e = np.exp(scores - m[None, :])
    probs[...] = e / e.sum(axis=0)[None, :]


def _sample_coords(shape_out, M, off):
    Z, Y, X = shape_out
    zz, yy, xx = np.meshgrid(
        np.arange(Z, dtype=np.float64),
        np.arange(Y, dtype=np.float64),
        np.arange(X, dtype=np.float64),
        indexing="ij",
    )
    uz = M[0, 0] * zz + M[0, 1] * yy + M[0, 2] * xx + off[0]
    uy = M[1, 0] * zz + M[1, 1] * yy + M[1, 2] * xx + off[1]
    ux = M[2, 0] * zz + M[2, 1] * yy + M[2, 2] * xx + off[2]
    return uz, uy, ux


def _trilinear_sample(src, uz, uy, ux):
    Zs, Ys, Xs = src.shape
    cz = np.clip(uz, 0.0, Zs - 1)
    cy = np.clip(uy, 0.0, Ys - 1)
    cx = np.clip(ux, 0.0, Xs - 1)
    z0 = np.floor(cz).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x0 = np.floor(cx).astype(np.intp)
    z1 = np.minimum(z0 + 1, Zs - 1)
    y1 = np.minimum(y0 + 1, Ys - 1)
    x1 = np.minimum(x0 + 1, Xs - 1)
    fz = cz - z0
    fy = cy - y0
    fx = cx - x0
    c00 = src[z0, y0, x0] * (1 - fx) + src[z0, y0, x1] * fx
    c01 = src[z0, y1, x0] * (1 - fx) + src[z0, y1, x1] * fx
    c10 = src[z1, y0, x0] * (1 - fx) + src[z1, y0, x1] * fx
    c11 = src[z1, y1, x0] * (1 - fx) + src[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def _oob_mask(src_shape, uz, uy, ux):
    Zs, Ys, Xs = src_shape
    return (uz < 0) | (uz > Zs - 1) | (uy < 0) | (uy > Ys - 1) | (ux < 0) | (ux > Xs - 1)


def trilinear_affine(src, M, off, out, oob_zero):
    uz, uy, ux = _sample_coords(out.shape, M, off)
    vals = _trilinear_sample(src, uz, uy, ux)
    if oob_zero:
        vals = np.where(_oob_mask(src.shape, uz, uy, ux), 0, vals)
    out[...] = vals.astype(out.dtype)


def nearest_affine(src, M, off, out, oob_zero):
    Zs, Ys, Xs = src.shape
    uz, uy, ux = _sample_coords(out.shape, M, off)
    iz = np.floor(np.clip(uz, 0.0, Zs - 1) + 0.5).astype(np.intp)
    iy = np.floor(np.clip(uy, 0.0, Ys - 1) + 0.5).astype(np.intp)
    ix = np.floor(np.clip(ux, 0.0, Xs - 1) + 0.5).astype(np.intp)
    np.minimum(iz, Zs - 1, out=iz)
    np.minimum(iy, Ys - 1, out=iy)
    np.minimum(ix, Xs - 1, out=ix)
    vals = src[iz, iy, ix]
    if oob_zero:
        vals = np.where(_oob_mask(src.shape, uz, uy, ux), 0, vals)
    out[...] = vals


def mse_affine_grad(fixed, moving, M, off):
    Zs, Ys, Xs = moving.shape
    uz, uy, ux = _sample_coords(fixed.shape, M, off)
    cz = np.clip(uz, 0.0, Zs - 1)
    cy = np.clip(uy, 0.0, Ys - 1)
    cx = np.clip(ux, 0.0, Xs - 1)
    z0 = np.floor(cz).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x0 = np.floor(cx).astype(np.intp)
    z1 = np.minimum(z0 + 1, Zs - 1)
    y1 = np.minimum(y0 + 1, Ys - 1)
    x1 = np.minimum(x0 + 1, Xs - 1)
    fz = cz - z0
    fy = cy - y0
    fx = cx - x0
    v000 = moving[z0, y0, x0]
    v001 = moving[z0, y0, x1]
    v010 = moving[z0, y1, x0]
    v011 = moving[z0, y1, x1]
    v100 = moving[z1, y0, x0]
    v101 = moving[z1, y0, x1]
    v110 = moving[z1, y1, x0]
    v111 = moving[z1, y1, x1]
    c00 = v000 * (1 - fx) + v001 * fx
    c01 = v010 * (1 - fx) + v011 * fx
    c10 = v100 * (1 - fx) + v101 * fx
    c11 = v110 * (1 - fx) + v111 * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    val = c0 * (1 - fz) + c1 * fz
    r = val - fixed
    dz = c1 - c0
    dy = (c01 - c00) * (1 - fz) + (c11 - c10) * fz
    dx = (
        (v001 - v000) * (1 - fy) * (1 - fz)
        + (v011 - v010) * fy * (1 - fz)
        + (v101 - v100) * (1 - fy) * fz
        + (v111 - v110) * fy * fz
    )
    dz = np.where((uz < 0) | (uz > Zs - 1), 0.0, dz)
    dy = np.where((uy < 0) | (uy > Ys - 1), 0.0, dy)
    dx = np.where((ux < 0) | (ux > Xs - 1), 0.0, dx)
    n = float(r.size)
    J = float(np.sum(r * r)) / n
    rz, ry, rx = r * dz, r * dy, r * dx
    zz, yy, xx = np.meshgrid(
        np.arange(fixed.shape[0], dtype=np.float64),
        np.arange(fixed.shape[1], dtype=np.float64),
        np.arange(fixed.shape[2], dtype=np.float64),
        indexing="ij",
    )
    gM = np.empty((3, 3), dtype=np.float64)
    go = np.empty(3, dtype=np.float64)
    for i, rr in enumerate((rz, ry, rx)):
        go[i] = np.sum(rr)
        gM[i, 0] = np.sum(rr * zz)
        gM[i, 1] = np.sum(rr * yy)
        gM[i, 2] = np.sum(rr * xx)
    return J, gM * (2.0 / n), go * (2.0 / n)


def fuse_vote(t_int, t_grad, a_int, a_grad, a_lab, fg_any, coord_table, patch_r, search_r, inv_h, votes):
    A = a_int.shape[0]
    Z, Y, X = t_int.shape
    side = 2 * search_r + 1
    fg = fg_any.astype(bool)
    votes[0][~fg] = 1.0
    if not fg.any():
        return
    zi, yi, xi = np.nonzero(fg)
    # target-side patch features, gathered once per patch offset
    t_patches = {}
    for pz in range(-patch_r, patch_r + 1):
        for py in range(-patch_r, patch_r + 1):
            for px in range(-patch_r, patch_r + 1):
                t_patches[(pz, py, px)] = t_int[
                    np.clip(zi + pz, 0, Z - 1),
                    np.clip(yi + py, 0, Y - 1),
                    np.clip(xi + px, 0, X - 1),
                ]
    tg = t_grad[zi, yi, xi]
    flat = np.ravel_multi_index((zi, yi, xi), (Z, Y, X))
    vflat = votes.reshape(votes.shape[0], -1)
    for a in range(A):
        for oz in range(-search_r, search_r + 1):
            for oy in range(-search_r, search_r + 1):
                for ox in range(-search_r, search_r + 1):
                    sz = zi + oz
                    sy = yi + oy
                    sx = xi + ox
                    ok = (
                        (sz >= 0) & (sz < Z) & (sy >= 0) & (sy < Y) & (sx >= 0) & (sx < X)
                    )
                    if not ok.any():
                        continue
                    szc, syc, sxc = sz[ok], sy[ok], sx[ok]
                    d = np.full(
                        szc.shape,
                        coord_table[
                            ((oz + search_r) * side + (oy + search_r)) * side + (ox + search_r)
                        ],
                        dtype=np.float64,
                    )
                    for (pz, py, px), tvals in t_patches.items():
                        av = a_int[
                            a,
                            np.clip(szc + pz, 0, Z - 1),
                            np.clip(syc + py, 0, Y - 1),
                            np.clip(sxc + px, 0, X - 1),
                        ]
                        diff = tvals[ok] - av
                        d += diff * diff
                    gdiff = tg[ok] - a_grad[a, szc, syc, sxc]
                    d += gdiff * gdiff
                    wv = np.exp(-d * inv_h)
                    lab = a_lab[a, szc, syc, sxc]
                    np.add.at(vflat, (lab, flat[ok]), wv)
