"""Numba implementations of the hot kernels.

Layout conventions: spatial grids are C-contiguous arrays indexed
``[z, y, x]`` (x fastest); channel tensors are ``[c, z, y, x]``. All
kernels are pure functions of their inputs and write only into caller
provided output arrays where one is passed.

Parallel kernels only parallelize over independent output slices, so
results are bitwise identical for any thread count. Cross-voxel
reductions (registration objective, loss) either stay serial or emit
per-slice partials that the caller sums in a fixed order.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def pad1(x, apply_relu):
    # x: (C, Z, Y, X) -> zero-padded (C, Z+2, Y+2, X+2), relu optionally fused
    C, Z, Y, X = x.shape
    out = np.zeros((C, Z + 2, Y + 2, X + 2), dtype=x.dtype)
    for c in prange(C):
        for z in range(Z):
            for y in range(Y):
                src = x[c, z, y]
                dst = out[c, z + 1, y + 1]
                if apply_relu:
                    for i in range(X):
                        v = src[i]
                        dst[i + 1] = v if v > 0 else 0
                else:
                    for i in range(X):
                        dst[i + 1] = src[i]
    return out


@njit(parallel=True, cache=True)
def conv3_fwd(xp, w, bias, out):
    # xp: (Ci, Z+2, Y+2, X+2) padded; w: (Co, Ci, 3, 3, 3); out: (Co, Z, Y, X)
    Co, Ci = w.shape[0], w.shape[1]
    Z, Y, X = out.shape[1], out.shape[2], out.shape[3]
    for z in prange(Z):
        for y in range(Y):
            for co in range(Co):
                acc = np.zeros(X, dtype=xp.dtype)
                for ci in range(Ci):
                    for kz in range(3):
                        for ky in range(3):
                            line = xp[ci, z + kz, y + ky]
                            w0 = w[co, ci, kz, ky, 0]
                            w1 = w[co, ci, kz, ky, 1]
                            w2 = w[co, ci, kz, ky, 2]
                            for x in range(X):
                                acc[x] += w0 * line[x] + w1 * line[x + 1] + w2 * line[x + 2]
                b = bias[co]
                for x in range(X):
                    out[co, z, y, x] = acc[x] + b


@njit(parallel=True, fastmath=True, cache=True)
def conv3_dw(xp, dout, dw):
    # weight gradient; dw: (Co, Ci, 3, 3, 3) zeroed by caller
    Co = dout.shape[0]
    Ci = xp.shape[0]
    Z, Y, X = dout.shape[1], dout.shape[2], dout.shape[3]
    for cc in prange(Co * Ci):
        co = cc // Ci
        ci = cc % Ci
        acc = np.zeros(27, dtype=xp.dtype)
        for z in range(Z):
            for y in range(Y):
                dline = dout[co, z, y]
                for kz in range(3):
                    for ky in range(3):
                        xl = xp[ci, z + kz, y + ky]
                        s0 = acc[0] * 0
                        s1 = acc[0] * 0
                        s2 = acc[0] * 0
                        for x in range(X):
                            d = dline[x]
                            s0 += d * xl[x]
                            s1 += d * xl[x + 1]
                            s2 += d * xl[x + 2]
                        base = (kz * 3 + ky) * 3
                        acc[base] += s0
                        acc[base + 1] += s1
                        acc[base + 2] += s2
        for k in range(27):
            dw[co, ci, k // 9, (k // 3) % 3, k % 3] = acc[k]


@njit(parallel=True, cache=True)
def im2col_k3(arr, col):
    # arr: (C, Z, Y, X) -> col: (Z*Y*X, C*27); zero pad 1, stride 1
    C, Z, Y, X = arr.shape
    for z in prange(Z):
        for y in range(Y):
            rowbase = (z * Y + y) * X
            for c in range(C):
                for kz in range(3):
                    sz = z + kz - 1
                    for ky in range(3):
                        sy = y + ky - 1
                        cbase = c * 27 + (kz * 3 + ky) * 3
                        if sz < 0 or sz >= Z or sy < 0 or sy >= Y:
                            for i in range(X):
                                col[rowbase + i, cbase] = 0
                                col[rowbase + i, cbase + 1] = 0
                                col[rowbase + i, cbase + 2] = 0
                        else:
                            line = arr[c, sz, sy]
                            for i in range(X):
                                col[rowbase + i, cbase] = line[i - 1] if i - 1 >= 0 else 0
                                col[rowbase + i, cbase + 1] = line[i]
                                col[rowbase + i, cbase + 2] = line[i + 1] if i + 1 < X else 0


@njit(parallel=True, cache=True)
def relu_bwd(dout, pre, dx):
    # dx = dout where pre > 0 else 0 (flattened views)
    n = dout.size
    d = dout.ravel()
    p = pre.ravel()
    o = dx.ravel()
    for i in prange(n):
        o[i] = d[i] if p[i] > 0 else 0


@njit(parallel=True, fastmath=True, cache=True)
def softmax_ce_grad(scores, labels, weights, grad, loss_per_row):
    # scores: (C, N); labels: (N,); grad: (C, N) out; loss_per_row: (N,) out
    # loss_i = w[t_i] * (logsumexp(s_:i) - s_{t_i,i}); grad column = w[t_i] * (p - onehot)
    C, N = scores.shape
    for i in prange(N):
        m = scores[0, i]
        for c in range(1, C):
            v = scores[c, i]
            if v > m:
                m = v
        s = 0.0
        for c in range(C):
            s += np.exp(float(scores[c, i]) - float(m))
        t = labels[i]
        wt = weights[t]
        logz = np.log(s) + float(m)
        loss_per_row[i] = wt * (logz - float(scores[t, i]))
        inv = 1.0 / s
        for c in range(C):
            p = np.exp(float(scores[c, i]) - float(m)) * inv
            g = p
            if c == t:
                g = p - 1.0
            grad[c, i] = wt * g


@njit(parallel=True, cache=True)
def softmax_channels(scores, probs):
    # stable softmax over axis 0; scores, probs: (C, N)
    C, N = scores.shape
    for i in prange(N):
        m = scores[0, i]
        for c in range(1, C):
            v = scores[c, i]
            if v > m:
                m = v
        s = 0.0
        for c in range(C):
            e = np.exp(float(scores[c, i]) - float(m))
            probs[c, i] = e
            s += e
        inv = 1.0 / s
        for c in range(C):
            probs[c, i] = probs[c, i] * inv


@njit(parallel=True, cache=True)
def trilinear_affine(src, M, off, out, oob_zero):
    # out[z,y,x] = src sampled at M @ (z,y,x) + off in src index space
    Zs, Ys, Xs = src.shape
    Z, Y, X = out.shape
    for z in prange(Z):
        for y in range(Y):
            for x in range(X):
                uz = M[0, 0] * z + M[0, 1] * y + M[0, 2] * x + off[0]
                uy = M[1, 0] * z + M[1, 1] * y + M[1, 2] * x + off[1]
                ux = M[2, 0] * z + M[2, 1] * y + M[2, 2] * x + off[2]
                if oob_zero and (
                    uz < 0.0 or uz > Zs - 1 or uy < 0.0 or uy > Ys - 1 or ux < 0.0 or ux > Xs - 1
                ):
                    out[z, y, x] = 0
                    continue
                cz = min(max(uz, 0.0), float(Zs - 1))
                cy = min(max(uy, 0.0), float(Ys - 1))
                cx = min(max(ux, 0.0), float(Xs - 1))
                z0 = int(np.floor(cz))
                y0 = int(np.floor(cy))
                x0 = int(np.floor(cx))
                z1 = min(z0 + 1, Zs - 1)
                y1 = min(y0 + 1, Ys - 1)
                x1 = min(x0 + 1, Xs - 1)
                fz = cz - z0
                fy = cy - y0
                fx = cx - x0
                c00 = src[z0, y0, x0] * (1 - fx) + src[z0, y0, x1] * fx
                c01 = src[z0, y1, x0] * (1 - fx) + src[z0, y1, x1] * fx
                c10 = src[z1, y0, x0] * (1 - fx) + src[z1, y0, x1] * fx
                c11 = src[z1, y1, x0] * (1 - fx) + src[z1, y1, x1] * fx
                c0 = c00 * (1 - fy) + c01 * fy
                c1 = c10 * (1 - fy) + c11 * fy
                out[z, y, x] = c0 * (1 - fz) + c1 * fz


@njit(parallel=True, cache=True)
def nearest_affine(src, M, off, out, oob_zero):
    Zs, Ys, Xs = src.shape
    Z, Y, X = out.shape
    for z in prange(Z):
        for y in range(Y):
            for x in range(X):
                uz = M[0, 0] * z + M[0, 1] * y + M[0, 2] * x + off[0]
                uy = M[1, 0] * z + M[1, 1] * y + M[1, 2] * x + off[1]
                ux = M[2, 0] * z + M[2, 1] * y + M[2, 2] * x + off[2]
                if oob_zero and (
                    uz < 0.0 or uz > Zs - 1 or uy < 0.0 or uy > Ys - 1 or ux < 0.0 or ux > Xs - 1
                ):
                    out[z, y, x] = 0
                    continue
                iz = int(np.floor(min(max(uz, 0.0), float(Zs - 1)) + 0.5))
                iy = int(np.floor(min(max(uy, 0.0), float(Ys - 1)) + 0.5))
                ix = int(np.floor(min(max(ux, 0.0), float(Xs - 1)) + 0.5))
                if iz > Zs - 1:
                    iz = Zs - 1
                if iy > Ys - 1:
                    iy = Ys - 1
                if ix > Xs - 1:
                    ix = Xs - 1
                out[z, y, x] = src[iz, iy, ix]


@njit(cache=True)
def mse_affine_grad(fixed, moving, M, off):
    # serial by design: the reduction order is part of the contract.
    # Returns (J, gM, goff) for J = mean (moving(M@p+off) - fixed(p))^2,
    # sampling with edge clamping so the objective stays differentiable.
    Z, Y, X = fixed.shape
    Zs, Ys, Xs = moving.shape
    J = 0.0
    gM = np.zeros((3, 3), dtype=np.float64)
    go = np.zeros(3, dtype=np.float64)
    for z in range(Z):
        for y in range(Y):
            for x in range(X):
                uz = M[0, 0] * z + M[0, 1] * y + M[0, 2] * x + off[0]
                uy = M[1, 0] * z + M[1, 1] * y + M[1, 2] * x + off[1]
                ux = M[2, 0] * z + M[2, 1] * y + M[2, 2] * x + off[2]
                cz = min(max(uz, 0.0), float(Zs - 1))
                cy = min(max(uy, 0.0), float(Ys - 1))
                cx = min(max(ux, 0.0), float(Xs - 1))
                z0 = int(np.floor(cz))
                y0 = int(np.floor(cy))
                x0 = int(np.floor(cx))
                z1 = min(z0 + 1, Zs - 1)
                y1 = min(y0 + 1, Ys - 1)
                x1 = min(x0 + 1, Xs - 1)
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
                r = val - fixed[z, y, x]
                J += r * r
                # derivative of the trilinear blend w.r.t. the sample coords
                dz = (c1 - c0)
                dy = ((c01 - c00) * (1 - fz) + (c11 - c10) * fz)
                dx = (
                    (v001 - v000) * (1 - fy) * (1 - fz)
                    + (v011 - v010) * fy * (1 - fz)
                    + (v101 - v100) * (1 - fy) * fz
                    + (v111 - v110) * fy * fz
                )
                # clamped coords have zero gradient
                if uz < 0.0 or uz > Zs - 1:
                    dz = 0.0
                if uy < 0.0 or uy > Ys - 1:
                    dy = 0.0
                if ux < 0.0 or ux > Xs - 1:
                    dx = 0.0
                rz = r * dz
                ry = r * dy
                rx = r * dx
                go[0] += rz
                go[1] += ry
                go[2] += rx
                gM[0, 0] += rz * z
                gM[0, 1] += rz * y
                gM[0, 2] += rz * x
                gM[1, 0] += ry * z
                gM[1, 1] += ry * y
                gM[1, 2] += ry * x
                gM[2, 0] += rx * z
                gM[2, 1] += rx * y
                gM[2, 2] += rx * x
    n = float(Z * Y * X)
    return J / n, gM * (2.0 / n), go * (2.0 / n)


@njit(parallel=True, cache=True)
def fuse_vote(t_int, t_grad, a_int, a_grad, a_lab, fg_any, coord_table, patch_r, search_r, inv_h, votes):
    # t_int / t_grad: (Z, Y, X) standardized, feature-weighted target blocks
    # a_int / a_grad / a_lab: (A, Z, Y, X) warped atlas blocks (same scaling)
    # coord_table: ((2r+1)^3,) squared coordinate-feature distance per offset
    # votes: (C, Z, Y, X) accumulated vote mass, zeroed by caller
    A = a_int.shape[0]
    Z, Y, X = t_int.shape
    side = 2 * search_r + 1
    for z in prange(Z):
        for y in range(Y):
            for x in range(X):
                if fg_any[z, y, x] == 0:
                    votes[0, z, y, x] = 1.0
                    continue
                for a in range(A):
                    for oz in range(-search_r, search_r + 1):
                        sz = z + oz
                        if sz < 0 or sz >= Z:
                            continue
                        for oy in range(-search_r, search_r + 1):
                            sy = y + oy
                            if sy < 0 or sy >= Y:
                                continue
                            for ox in range(-search_r, search_r + 1):
                                sx = x + ox
                                if sx < 0 or sx >= X:
                                    continue
                                d = coord_table[
                                    ((oz + search_r) * side + (oy + search_r)) * side
                                    + (ox + search_r)
                                ]
                                # intensity patch block, edge-clamped
                                for pz in range(-patch_r, patch_r + 1):
                                    tz = min(max(z + pz, 0), Z - 1)
                                    az = min(max(sz + pz, 0), Z - 1)
                                    for py in range(-patch_r, patch_r + 1):
                                        ty = min(max(y + py, 0), Y - 1)
                                        ay = min(max(sy + py, 0), Y - 1)
                                        for px in range(-patch_r, patch_r + 1):
                                            tx = min(max(x + px, 0), X - 1)
                                            ax = min(max(sx + px, 0), X - 1)
                                            diff = t_int[tz, ty, tx] - a_int[a, az, ay, ax]
                                            d += diff * diff
                                gdiff = t_grad[z, y, x] - a_grad[a, sz, sy, sx]
                                d += gdiff * gdiff
                                wv = np.exp(-d * inv_h)
                                lab = a_lab[a, sz, sy, sx]
                                votes[lab, z, y, x] += wv
