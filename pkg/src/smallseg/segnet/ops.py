"""Layer primitives for the voxel classifier.

3x3x3 convolutions route to the numba direct kernels when the grid is
large enough for the line-vectorized loops to pay off, otherwise (and on
the numpy backend for gradients of small grids) to an im2col + BLAS path.
Pooling and the fixed-stencil linear upsampling are plain numpy: they are
bandwidth-trivial next to the convolutions.
"""

from __future__ import annotations

import numpy as np

from .. import backend
from .. import _kernels_numpy as knp

_DIRECT_MIN_X = 12


def _use_direct(xp) -> bool:
    return backend.active_backend() == "numba" and xp.shape[3] - 2 >= _DIRECT_MIN_X


def pad_act(x: np.ndarray, apply_relu: bool) -> np.ndarray:
    """Zero-pad by one voxel on each spatial face, optionally fusing relu."""
    return backend.kernels().pad1(x, apply_relu)


def conv3(xp: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3^3 convolution of a padded (Ci, Z+2, Y+2, X+2) tensor."""
    Co = w.shape[0]
    Z, Y, X = xp.shape[1] - 2, xp.shape[2] - 2, xp.shape[3] - 2
    out = np.empty((Co, Z, Y, X), dtype=xp.dtype)
    if _use_direct(xp):
        backend.kernels().conv3_fwd(xp, w, b, out)
    else:
        knp.conv3_fwd(xp, w, b, out)
    return out


def conv3_dw(xp: np.ndarray, dout: np.ndarray):
    """Weight and bias gradients for conv3."""
    Co, Ci = dout.shape[0], xp.shape[0]
    dw = np.empty((Co, Ci, 3, 3, 3), dtype=xp.dtype)
    if _use_direct(xp):
        backend.kernels().conv3_dw(xp, dout, dw)
    else:
        knp.conv3_dw(xp, dout, dw)
    db = dout.sum(axis=(1, 2, 3))
    return dw, db


def conv3_bwd_data(dout: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Input gradient: convolution of dout with the flipped transposed kernel."""
    wflip = np.ascontiguousarray(
        w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    )
    zero_b = np.zeros(wflip.shape[0], dtype=dout.dtype)
    return conv3(pad_act(dout, False), wflip, zero_b)


def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise conv: (Ci, Z, Y, X) x (Co, Ci) -> (Co, Z, Y, X)."""
    Ci = x.shape[0]
    flat = w @ x.reshape(Ci, -1)
    flat += b[:, None]
    return flat.reshape((w.shape[0],) + x.shape[1:])


def conv1x1_bwd(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    Ci, Co = x.shape[0], w.shape[0]
    dflat = dout.reshape(Co, -1)
    xflat = x.reshape(Ci, -1)
    dw = dflat @ xflat.T
    db = dflat.sum(axis=1)
    dx = (w.T @ dflat).reshape(x.shape)
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_bwd(dout: np.ndarray, pre: np.ndarray) -> np.ndarray:
    dx = np.empty_like(dout)
    backend.kernels().relu_bwd(dout, pre, dx)
    return dx


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2x2 mean pooling; spatial dims must be even."""
    C, Z, Y, X = x.shape
    v = x.reshape(C, Z // 2, 2, Y // 2, 2, X // 2, 2)
    return v.mean(axis=(2, 4, 6))


def avgpool2_bwd(dout: np.ndarray) -> np.ndarray:
    C, Z, Y, X = dout.shape
    d = (dout * (1.0 / 8.0))[:, :, None, :, None, :, None]
    out = np.broadcast_to(d, (C, Z, 2, Y, 2, X, 2))
    return np.ascontiguousarray(out.reshape(C, Z * 2, Y * 2, X * 2))


def _up_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Double one axis with the half-voxel-centre linear stencil.

    even output 2i:   0.75 x[i] + 0.25 x[i-1]   (edge-clamped)
    odd  output 2i+1: 0.75 x[i] + 0.25 x[i+1]
    """
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    lo = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    hi = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    even = 0.75 * x + 0.25 * lo
    odd = 0.75 * x + 0.25 * hi
    out = np.stack([even, odd], axis=-1).reshape(x.shape[:-1] + (2 * n,))
    return np.moveaxis(out, -1, axis)


def _up_axis_adj(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    n2 = g.shape[-1]
    n = n2 // 2
    even = g[..., 0::2]
    odd = g[..., 1::2]
    out = 0.75 * (even + odd)
    # even output 2i spreads 0.25 to input i-1; odd output 2i+1 to input i+1
    out[..., :-1] += 0.25 * even[..., 1:]
    out[..., 0] += 0.25 * even[..., 0]
    out[..., 1:] += 0.25 * odd[..., :-1]
    out[..., -1] += 0.25 * odd[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample2(x: np.ndarray) -> np.ndarray:
    """Trilinear x2 upsampling of a (C, Z, Y, X) tensor."""
    out = x
    for ax in (1, 2, 3):
        out = _up_axis(out, ax)
    return np.ascontiguousarray(out, dtype=x.dtype)


def upsample2_adj(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`upsample2` (exact transpose, for backprop)."""
    out = g
    for ax in (3, 2, 1):
        out = _up_axis_adj(out, ax)
    return np.ascontiguousarray(out, dtype=g.dtype)


def softmax_probs(scores: np.ndarray) -> np.ndarray:
    """Per-voxel softmax over channel axis 0 of (C, Z, Y, X) scores."""
    C = scores.shape[0]
    flat = scores.reshape(C, -1)
    probs = np.empty_like(flat)
    backend.kernels().softmax_channels(flat, probs)
    return probs.reshape(scores.shape)
