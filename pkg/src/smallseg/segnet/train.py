"""Deterministic patch-sampled training with Adam."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..volcore import InvalidArgumentError, LabelMap, Volume
from ..weighting import weighted_softmax_ce_with_grad
from . import net
from .ckpt import Checkpoint


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-5
    batch: int = 8
    patch: tuple[int, int, int] = (32, 32, 32)
    iterations: int = 2000
    seed: int = 0
    weights: tuple = ()

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidArgumentError("lr must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidArgumentError("betas must lie in (0, 1)")
        if self.batch < 1 or self.iterations < 1:
            raise InvalidArgumentError("batch and iterations must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_adam": self.eps_adam,
            "batch": self.batch,
            "patch": list(self.patch),
            "iterations": self.iterations,
            "seed": self.seed,
            "weights": list(self.weights),
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(
            lr=float(d["lr"]),
            beta1=float(d["beta1"]),
            beta2=float(d["beta2"]),
            eps_adam=float(d["eps_adam"]),
            batch=int(d["batch"]),
            patch=tuple(d["patch"]),
            iterations=int(d["iterations"]),
            seed=int(d["seed"]),
            weights=tuple(d["weights"]),
        )


def standardize(data: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance copy (variance floor 1e-6), float32."""
    data = np.asarray(data, dtype=np.float32)
    mu = float(data.mean())
    sd = float(data.std())
    return ((data - mu) / max(sd, 1e-6)).astype(np.float32)


def _draw_patch(img, lab, fg_flat, patch_zyx, rng):
    shape = lab.shape
    if rng.random() < 0.5 and fg_flat.size:
        c = np.unravel_index(fg_flat[rng.integers(fg_flat.size)], shape)
    else:
        c = tuple(int(rng.integers(s)) for s in shape)
    starts = []
    for ax in range(3):
        p = patch_zyx[ax]
        s = min(max(c[ax] - p // 2, 0), shape[ax] - p)
        starts.append(s)
    sl = tuple(slice(s, s + p) for s, p in zip(starts, patch_zyx))
    return img[(slice(None),) + sl].copy(), lab[sl].copy()


def sample_patches(vol, lab, patch, batch: int, rng):
    """Class-balanced patch batch from one subject.

    Half the draws centre on a uniformly chosen foreground voxel, half on a
    uniformly chosen voxel; windows are clamped inside the grid. ``vol`` may
    be a Volume or a pre-standardized (C, Z, Y, X) array.
    """
    if isinstance(vol, Volume):
        img = standardize(vol.data)[None]
    else:
        img = np.asarray(vol, dtype=np.float32)
        if img.ndim == 3:
            img = img[None]
    lab_arr = lab.data if isinstance(lab, LabelMap) else np.asarray(lab)
    patch_zyx = (int(patch[2]), int(patch[1]), int(patch[0]))
    if any(p > s or p < 1 for p, s in zip(patch_zyx, lab_arr.shape)):
        raise InvalidArgumentError(
            f"patch {tuple(patch)} does not fit volume dims {lab_arr.shape[::-1]}"
        )
    fg_flat = np.flatnonzero(lab_arr.reshape(-1))
    return [_draw_patch(img, lab_arr, fg_flat, patch_zyx, rng) for _ in range(batch)]


def _adam_step(params, grads, state, tcfg: TrainConfig):
    state["t"] += 1
    t = state["t"]
    b1, b2 = tcfg.beta1, tcfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= tcfg.lr * (m / bc1) / (np.sqrt(v / bc2) + tcfg.eps_adam)


def train_on_samples(model: net.Model, sample_fn, tcfg: TrainConfig, log_every: int = 0):
    """Generic loop: ``sample_fn(rng) -> [(channels, labels), ...]``.

    Runs ``tcfg.iterations`` Adam steps on the weighted softmax
    cross-entropy, single-stream deterministic under ``tcfg.seed``.
    Returns a Checkpoint carrying the final parameters and loss.
    """
    weights = np.asarray(tcfg.weights, dtype=np.float64)
    if weights.shape[0] != model.cfg.num_classes:
        raise InvalidArgumentError(
            f"tcfg.weights length {weights.shape[0]} != num_classes {model.cfg.num_classes}"
        )
    rng = np.random.default_rng(np.random.SeedSequence((int(tcfg.seed), 0x7472_6169)))
    state = {
        "t": 0,
        "m": {k: np.zeros_like(p) for k, p in model.params.items()},
        "v": {k: np.zeros_like(p) for k, p in model.params.items()},
    }
    curve = np.empty(tcfg.iterations, dtype=np.float64)
    for it in range(tcfg.iterations):
        samples = sample_fn(rng)
        grads = None
        loss_sum = 0.0
        for channels, labels in samples:
            scores, cache = net.forward(model, channels, want_cache=True)
            C = scores.shape[0]
            flat = scores.reshape(C, -1)
            loss, dflat = weighted_softmax_ce_with_grad(
                flat, labels.reshape(-1).astype(np.int64), weights
            )
            loss_sum += loss
            g = net.backward(model, cache, dflat.reshape(scores.shape))
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] += g[k]
        nb = len(samples)
        for k in grads:
            grads[k] /= nb
        batch_loss = loss_sum / nb
        if not np.isfinite(batch_loss):
            raise RuntimeError(f"training aborted: non-finite loss at iteration {it}")
        curve[it] = batch_loss
        _adam_step(model.params, grads, state, tcfg)
        if log_every and (it + 1) % log_every == 0:
            print(f"  iter {it + 1}/{tcfg.iterations}  loss {batch_loss:.4f}", flush=True)
    ckpt = Checkpoint(
        net_config=model.cfg,
        train_config=tcfg,
        params={k: v.astype(np.float32) for k, v in model.params.items()},
        iteration=tcfg.iterations,
        final_loss=float(curve[-1]),
    )
    ckpt.loss_curve = curve
    return ckpt


def train(model: net.Model, cohort, tcfg: TrainConfig, log_every: int = 0):
    """Train on a cohort of (Volume, LabelMap) pairs with patch sampling."""
    if not cohort:
        raise InvalidArgumentError("cohort must be non-empty")
    vols = [standardize(v.data)[None] for v, _ in cohort]
    labs = [l.data for _, l in cohort]
    fgs = [np.flatnonzero(l.reshape(-1)) for l in labs]
    patch_zyx = (int(tcfg.patch[2]), int(tcfg.patch[1]), int(tcfg.patch[0]))
    for l in labs:
        if any(p > s for p, s in zip(patch_zyx, l.shape)):
            raise InvalidArgumentError(
                f"patch {tuple(tcfg.patch)} exceeds volume dims {l.shape[::-1]}"
            )

    def sample_fn(rng):
        si = int(rng.integers(len(cohort)))
        return [
            _draw_patch(vols[si], labs[si], fgs[si], patch_zyx, rng)
            for _ in range(tcfg.batch)
        ]

    return train_on_samples(model, sample_fn, tcfg, log_every=log_every)
