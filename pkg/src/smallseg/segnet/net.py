"""Residual fully-convolutional voxel classifier.

Encoder: a 3^3 stem, then ``levels`` resolutions; each level runs
``res_units_per_level`` pre-activation residual units (two 3^3 convs),
and levels are joined by 2x mean pooling plus a pointwise conv that
doubles the feature width. Decoder: per-level pointwise projections back
to the base width, fused top-down by trilinear 2x upsampling with
additive skips, then a pointwise classifier head at full resolution.

Forward/backward are hand-rolled over the kernel primitives so training
stays deterministic and dtype-exact (float32 for training, float64 for
finite-difference checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..volcore import InvalidArgumentError
from . import ops


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    num_classes: int = 2
    levels: int = 3
    base_features: int = 8
    res_units_per_level: int = 2
    kernel: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        if self.levels < 1:
            raise InvalidArgumentError("levels must be >= 1")
        if self.in_channels < 1 or self.num_classes < 2 or self.base_features < 1:
            raise InvalidArgumentError("bad channel/feature counts")
        if tuple(self.kernel) != (3, 3, 3):
            raise InvalidArgumentError("only 3x3x3 kernels are supported")

    def features_at(self, level: int) -> int:
        return self.base_features * (2 ** level)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "levels": self.levels,
            "base_features": self.base_features,
            "res_units_per_level": self.res_units_per_level,
            "kernel": list(self.kernel),
        }

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        return NetConfig(
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            levels=int(d["levels"]),
            base_features=int(d["base_features"]),
            res_units_per_level=int(d["res_units_per_level"]),
            kernel=tuple(d["kernel"]),
        )


@dataclass
class Model:
    cfg: NetConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "Model":
        return Model(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()})


def _param_plan(cfg: NetConfig):
    """(name, shape, fan_in) for every tensor, in canonical order."""
    plan = []
    F = cfg.base_features
    plan.append(("stem.w", (F, cfg.in_channels, 3, 3, 3), cfg.in_channels * 27))
    plan.append(("stem.b", (F,), 0))
    for l in range(cfg.levels):
        fl = cfg.features_at(l)
        for u in range(cfg.res_units_per_level):
            for c in (1, 2):
                plan.append((f"enc{l}.u{u}.c{c}.w", (fl, fl, 3, 3, 3), fl * 27))
                plan.append((f"enc{l}.u{u}.c{c}.b", (fl,), 0))
        if l < cfg.levels - 1:
            fn = cfg.features_at(l + 1)
            plan.append((f"down{l}.w", (fn, fl), fl))
            plan.append((f"down{l}.b", (fn,), 0))
    for l in range(cfg.levels):
        fl = cfg.features_at(l)
        plan.append((f"proj{l}.w", (F, fl), fl))
        plan.append((f"proj{l}.b", (F,), 0))
    plan.append(("head.w", (cfg.num_classes, F), F))
    plan.append(("head.b", (cfg.num_classes,), 0))
    return plan


def build_net(cfg: NetConfig, seed: int, dtype=np.float32) -> Model:
    """He-initialized model; parameters are a pure function of the seed."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x6E65740A)))
    params = {}
    for name, shape, fan_in in _param_plan(cfg):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            std = np.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return Model(cfg, params)


def check_spatial(cfg: NetConfig, shape_zyx) -> None:
    d = cfg.divisor
    if any(s % d != 0 or s < d for s in shape_zyx):
        raise InvalidArgumentError(
            f"spatial dims {tuple(shape_zyx)} not divisible by 2^(levels-1)={d}"
        )


def forward(model: Model, x: np.ndarray, want_cache: bool = False):
    """Scores of shape (num_classes, Z, Y, X) for input (in_channels, Z, Y, X)."""
    cfg, P = model.cfg, model.params
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise InvalidArgumentError(
            f"input must be ({cfg.in_channels}, Z, Y, X), got {x.shape}"
        )
    check_spatial(cfg, x.shape[1:])
    cache = {"pads": {}, "z1": {}, "unit_in": {}, "pooled": {}, "feats": [], "g": []}
    xp = ops.pad_act(np.ascontiguousarray(x), False)
    if want_cache:
        cache["stem_pad"] = xp
    a = ops.conv3(xp, P["stem.w"], P["stem.b"])
    feats = []
    for l in range(cfg.levels):
        for u in range(cfg.res_units_per_level):
            key = (l, u)
            pa = ops.pad_act(a, True)
            z1 = ops.conv3(pa, P[f"enc{l}.u{u}.c1.w"], P[f"enc{l}.u{u}.c1.b"])
            pz = ops.pad_act(z1, True)
            z2 = ops.conv3(pz, P[f"enc{l}.u{u}.c2.w"], P[f"enc{l}.u{u}.c2.b"])
            if want_cache:
                cache["unit_in"][key] = a
                cache["z1"][key] = z1
                cache["pads"][key] = (pa, pz)
            a = a + z2
        feats.append(a)
        if l < cfg.levels - 1:
            pooled = ops.avgpool2(a)
            if want_cache:
                cache["pooled"][l] = pooled
            a = ops.conv1x1(pooled, P[f"down{l}.w"], P[f"down{l}.b"])
    g = None
    glist = [None] * cfg.levels
    for l in range(cfg.levels - 1, -1, -1):
        s = ops.conv1x1(ops.relu(feats[l]), P[f"proj{l}.w"], P[f"proj{l}.b"])
        g = s if g is None else s + ops.upsample2(g)
        glist[l] = g
    pre_head = ops.relu(glist[0])
    scores = ops.conv1x1(pre_head, P["head.w"], P["head.b"])
    if want_cache:
        cache["feats"] = feats
        cache["g"] = glist
        cache["pre_head"] = pre_head
        return scores, cache
    return scores


def backward(model: Model, cache: dict, dscores: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given the loss gradient on the scores."""
    cfg, P = model.cfg, model.params
    grads = {}
    feats = cache["feats"]
    glist = cache["g"]
    dg, dwh, dbh = ops.conv1x1_bwd(cache["pre_head"], P["head.w"], dscores)
    grads["head.w"] = dwh
    grads["head.b"] = dbh
    dg = ops.relu_bwd(dg, glist[0])
    dfeats = [None] * cfg.levels
    for l in range(cfg.levels):
        r = ops.relu(feats[l])
        dr, dwp, dbp = ops.conv1x1_bwd(r, P[f"proj{l}.w"], dg)
        grads[f"proj{l}.w"] = dwp
        grads[f"proj{l}.b"] = dbp
        dfeats[l] = ops.relu_bwd(dr, feats[l])
        if l < cfg.levels - 1:
            dg = ops.upsample2_adj(dg)
    da_next = None
    for l in range(cfg.levels - 1, -1, -1):
        da = dfeats[l]
        if da_next is not None:
            dpool, dwd, dbd = ops.conv1x1_bwd(
                cache["pooled"][l], P[f"down{l}.w"], da_next
            )
            grads[f"down{l}.w"] = dwd
            grads[f"down{l}.b"] = dbd
            da = da + ops.avgpool2_bwd(dpool)
        for u in range(cfg.res_units_per_level - 1, -1, -1):
            key = (l, u)
            pa, pz = cache["pads"][key]
            z1 = cache["z1"][key]
            a_in = cache["unit_in"][key]
            dz2 = da
            dw2, db2 = ops.conv3_dw(pz, dz2)
            grads[f"enc{l}.u{u}.c2.w"] = dw2
            grads[f"enc{l}.u{u}.c2.b"] = db2
            dr1 = ops.conv3_bwd_data(dz2, P[f"enc{l}.u{u}.c2.w"])
            dz1 = ops.relu_bwd(dr1, z1)
            dw1, db1 = ops.conv3_dw(pa, dz1)
            grads[f"enc{l}.u{u}.c1.w"] = dw1
            grads[f"enc{l}.u{u}.c1.b"] = db1
            dr0 = ops.conv3_bwd_data(dz1, P[f"enc{l}.u{u}.c1.w"])
            da = da + ops.relu_bwd(dr0, a_in)
        da_next = da
    dws, dbs = ops.conv3_dw(cache["stem_pad"], da_next)
    grads["stem.w"] = dws
    grads["stem.b"] = dbs
    return grads


def forward_padded(model: Model, x: np.ndarray) -> np.ndarray:
    """Forward with automatic zero padding to the level divisor, cropped back."""
    d = model.cfg.divisor
    Z, Y, X = x.shape[1:]
    pz, py, px = ((-Z) % d, (-Y) % d, (-X) % d)
    if pz or py or px:
        xpad = np.pad(x, ((0, 0), (0, pz), (0, py), (0, px)))
        scores = forward(model, xpad)
        return np.ascontiguousarray(scores[:, :Z, :Y, :X])
    return forward(model, x)
