"""Sliding-window inference producing probability maps."""

from __future__ import annotations

import numpy as np

from ..volcore import InvalidArgumentError, ProbMap, Volume
from . import net, ops
from .ckpt import Checkpoint
from .train import standardize


def _as_model(model_or_ckpt) -> net.Model:
    if isinstance(model_or_ckpt, Checkpoint):
        return model_or_ckpt.to_model()
    return model_or_ckpt


def _axis_starts(dim: int, win: int, stride: int):
    if win >= dim:
        return [0]
    starts = list(range(0, dim - win + 1, stride))
    if starts[-1] != dim - win:
        starts.append(dim - win)
    return starts


def predict_channels(model_or_ckpt, channels: np.ndarray, window=None, overlap: float = 0.5,
                     spacing=(1.0, 1.0, 1.0)) -> ProbMap:
    """Blend overlapping window softmax outputs over a (C, Z, Y, X) stack."""
    model = _as_model(model_or_ckpt)
    cfg = model.cfg
    channels = np.ascontiguousarray(channels, dtype=np.float32)
    if channels.ndim != 4 or channels.shape[0] != cfg.in_channels:
        raise InvalidArgumentError(
            f"expected ({cfg.in_channels}, Z, Y, X) input channels, got {channels.shape}"
        )
    Z, Y, X = channels.shape[1:]
    if window is None:
        window = (min(32, X), min(32, Y), min(32, Z))
    if not (0.0 <= overlap < 1.0):
        raise InvalidArgumentError("overlap must lie in [0, 1)")
    wz, wy, wx = (min(int(window[2]), Z), min(int(window[1]), Y), min(int(window[0]), X))
    strides = tuple(max(1, int(round(w * (1.0 - overlap)))) for w in (wz, wy, wx))
    acc = np.zeros((cfg.num_classes, Z, Y, X), dtype=np.float32)
    cnt = np.zeros((Z, Y, X), dtype=np.float32)
    for z0 in _axis_starts(Z, wz, strides[0]):
        for y0 in _axis_starts(Y, wy, strides[1]):
            for x0 in _axis_starts(X, wx, strides[2]):
                sl = (slice(None), slice(z0, z0 + wz), slice(y0, y0 + wy), slice(x0, x0 + wx))
                scores = net.forward_padded(model, np.ascontiguousarray(channels[sl]))
                acc[sl] += ops.softmax_probs(scores)
                cnt[sl[1:]] += 1.0
    acc /= cnt[None]
    return ProbMap(acc, spacing)


def predict(model_or_ckpt, vol: Volume, extra_channels=None, window=None,
            overlap: float = 0.5) -> ProbMap:
    """Segment a volume: intensity is standardized, extras pass through.

    ``extra_channels`` may be a (K, Z, Y, X) array, a single (Z, Y, X)
    array, or a ProbMap whose channels are appended untouched (the
    auto-context path). The argmax LabelMap is available on the result.
    """
    chans = [standardize(vol.data)]
    if extra_channels is not None:
        if isinstance(extra_channels, ProbMap):
            extra = extra_channels.data
        else:
            extra = np.asarray(extra_channels, dtype=np.float32)
            if extra.ndim == 3:
                extra = extra[None]
        if extra.shape[1:] != vol.data.shape:
            raise InvalidArgumentError(
                f"extra channel geometry {extra.shape[1:]} != volume {vol.data.shape}"
            )
        chans.extend(np.ascontiguousarray(c, dtype=np.float32) for c in extra)
    stack = np.stack(chans, axis=0)
    model = _as_model(model_or_ckpt)
    if stack.shape[0] != model.cfg.in_channels:
        raise InvalidArgumentError(
            f"model expects {model.cfg.in_channels} channels, got {stack.shape[0]}"
        )
    return predict_channels(model, stack, window=window, overlap=overlap, spacing=vol.spacing)
