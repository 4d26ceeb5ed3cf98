"""Deterministic synthetic whole-body phantom cohorts.

Each phantom is a labelled 3D grid holding a handful of large structures
and several very small ones (down to ~0.01% of the volume), with jittered
positions, sizes, orientations, a smooth deformation, a multiplicative
bias field, and additive noise. Small structures get intensity means close
to a neighbouring structure so they cannot be segmented from contrast
alone. Generation is a pure function of (spec, subject index).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .volcore import InvalidArgumentError, LabelMap, Volume

SHAPES = ("ellipsoid", "tube", "capped-tube")

SMALL_FRACTION_LO = 5e-5
SMALL_FRACTION_HI = 5e-3

_COHORT_STREAM = 0
_ATLAS_STREAM = 1


class GenerationError(RuntimeError):
    """Raised when a phantom cannot be generated after retries."""


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    is_small: bool
    base_fraction: float
    intensity_mean: float
    intensity_jitter: float
    shape: str
    anchor: tuple[float, float, float]  # normalized (x, y, z) in [0, 1]
    anchor_jitter: float


@dataclass(frozen=True)
class ClassTable:
    """Foreground class metadata plus the background intensity model."""

    entries: tuple[ClassSpec, ...]
    air_intensity: float = 0.05
    body_intensity: float = 0.45
    body_semiaxes: tuple[float, float, float] = (0.44, 0.40, 0.49)

    def __post_init__(self):
        ids = [e.class_id for e in self.entries]
        if 0 in ids:
            raise InvalidArgumentError("class 0 is reserved for background")
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("duplicate class ids in table")
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise InvalidArgumentError("foreground class ids must be 1..K contiguous")
        total = sum(e.base_fraction for e in self.entries)
        if total >= 0.6:
            raise InvalidArgumentError(
                f"foreground base fractions sum to {total:.3f}, must stay < 0.6"
            )
        for e in self.entries:
            if e.shape not in SHAPES:
                raise InvalidArgumentError(f"unknown shape {e.shape!r} for {e.name}")

    @property
    def num_classes(self) -> int:
        """Classes including background."""
        return len(self.entries) + 1

    @property
    def small_ids(self) -> tuple[int, ...]:
        return tuple(e.class_id for e in self.entries if e.is_small)

    def name_of(self, class_id: int) -> str:
        if class_id == 0:
            return "background"
        return self.entries[class_id - 1].name


def default_class_table() -> ClassTable:
    """18 foreground classes, 8 of them small, in fixed report order."""
    large = [
        # name, fraction, mean, shape, anchor(x, y, z)
        ("heart", 0.030, 0.65, "ellipsoid", (0.45, 0.45, 0.28)),
        ("right_lung", 0.050, 0.15, "ellipsoid", (0.32, 0.45, 0.24)),
        ("left_lung", 0.050, 0.15, "ellipsoid", (0.68, 0.45, 0.24)),
        ("liver", 0.050, 0.55, "ellipsoid", (0.38, 0.50, 0.38)),
        ("right_kidney", 0.012, 0.62, "ellipsoid", (0.36, 0.56, 0.46)),
        ("left_kidney", 0.012, 0.62, "ellipsoid", (0.64, 0.56, 0.46)),
        ("spleen", 0.012, 0.58, "ellipsoid", (0.70, 0.50, 0.37)),
        ("spine", 0.030, 0.85, "tube", (0.50, 0.62, 0.40)),
        ("pelvis", 0.030, 0.88, "ellipsoid", (0.50, 0.55, 0.62)),
        ("humerus", 0.010, 0.86, "tube", (0.13, 0.50, 0.28)),
    ]
    small = [
        ("adrenal_gland", 0.00010, 0.52, "ellipsoid", (0.42, 0.54, 0.44)),
        ("gall_bladder", 0.00120, 0.72, "ellipsoid", (0.44, 0.44, 0.42)),
        ("pancreas", 0.00200, 0.50, "capped-tube", (0.54, 0.48, 0.43)),
        ("bladder", 0.00400, 0.75, "ellipsoid", (0.50, 0.50, 0.60)),
        ("right_clavicle", 0.00120, 0.82, "tube", (0.34, 0.42, 0.14)),
        ("left_clavicle", 0.00120, 0.82, "tube", (0.66, 0.42, 0.14)),
        ("rectum", 0.00200, 0.48, "capped-tube", (0.50, 0.57, 0.67)),
        ("sacrum", 0.00400, 0.84, "ellipsoid", (0.50, 0.59, 0.57)),
    ]
    entries = []
    cid = 1
    for name, frac, mean, shape, anchor in large:
        entries.append(
            ClassSpec(cid, name, False, frac, mean, 0.03, shape, anchor, 0.030)
        )
        cid += 1
    for name, frac, mean, shape, anchor in small:
        entries.append(
            ClassSpec(cid, name, True, frac, mean, 0.02, shape, anchor, 0.020)
        )
        cid += 1
    return ClassTable(tuple(entries))


# Table-1 style report order: the 8 small structures by class id order above.
SMALL_REPORT_ORDER = (
    "adrenal_gland",
    "gall_bladder",
    "pancreas",
    "bladder",
    "right_clavicle",
    "left_clavicle",
    "rectum",
    "sacrum",
)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (56, 40, 128)
    spacing: tuple[float, float, float] = (4.0, 4.0, 4.0)
    class_table: ClassTable = field(default_factory=default_class_table)
    noise_sigma: float = 0.05
    bias_field_amplitude: float = 0.15
    deform_amplitude: float = 1.5  # voxels
    seed: int = 20240801

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")
        if self.deform_amplitude < 0:
            raise InvalidArgumentError("deform_amplitude must be >= 0")


def _rotation_matrix(angles):
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _shape_halfextent(shape, target_voxels, aspect_jitter):
    """Semi-axes (in voxels, local frame) sized to hit the target volume."""
    v = max(float(target_voxels), 1.0)
    if shape == "ellipsoid":
        base = np.array([1.0, 0.75, 0.60]) * aspect_jitter
        prod = np.prod(base)
        a = (3.0 * v / (4.0 * np.pi * prod)) ** (1.0 / 3.0)
        return base * a, shape
    if shape == "tube":
        # cylinder along local z, length 8 r
        r = (v / (8.0 * np.pi)) ** (1.0 / 3.0) * aspect_jitter[0]
        return np.array([r, r, 4.0 * r]), shape
    # capped-tube: cylinder of length 6 r plus hemispherical caps
    r = (v / (6.0 * np.pi + 4.0 * np.pi / 3.0)) ** (1.0 / 3.0) * aspect_jitter[0]
    return np.array([r, r, 3.0 * r]), shape


def _rasterize_organ(labels, class_id, center_xyz, half, shape, rot, overwrite):
    """Paint one primitive into ``labels`` (array indexed [z, y, x]).

    Small structures are carved with ``overwrite=True`` so they survive any
    earlier claim; large ones only take unclaimed voxels (first wins).
    """
    nz, ny, nx = labels.shape
    reach = float(np.max(half)) * 1.8 + 2.0
    cx, cy, cz = center_xyz
    x0, x1 = int(np.floor(cx - reach)), int(np.ceil(cx + reach))
    y0, y1 = int(np.floor(cy - reach)), int(np.ceil(cy + reach))
    z0, z1 = int(np.floor(cz - reach)), int(np.ceil(cz + reach))
    x0, x1 = max(x0, 0), min(x1, nx - 1)
    y0, y1 = max(y0, 0), min(y1, ny - 1)
    z0, z1 = max(z0, 0), min(z1, nz - 1)
    if x0 > x1 or y0 > y1 or z0 > z1:
        return 0
    zz, yy, xx = np.meshgrid(
        np.arange(z0, z1 + 1), np.arange(y0, y1 + 1), np.arange(x0, x1 + 1), indexing="ij"
    )
    d = np.stack([xx - cx, yy - cy, zz - cz], axis=-1).astype(np.float64)
    q = d @ rot  # rows are voxel offsets; rot columns are local axes
    hx, hy, hz = half
    if shape == "ellipsoid":
        inside = (q[..., 0] / hx) ** 2 + (q[..., 1] / hy) ** 2 + (q[..., 2] / hz) ** 2 <= 1.0
    elif shape == "tube":
        rad2 = q[..., 0] ** 2 + q[..., 1] ** 2
        inside = (rad2 <= hx * hx) & (np.abs(q[..., 2]) <= hz)
    else:  # capped-tube
        rad2 = q[..., 0] ** 2 + q[..., 1] ** 2
        cyl = (rad2 <= hx * hx) & (np.abs(q[..., 2]) <= hz)
        caps = rad2 + (np.abs(q[..., 2]) - hz) ** 2 <= hx * hx
        inside = cyl | (caps & (np.abs(q[..., 2]) > hz))
    sub = labels[z0 : z1 + 1, y0 : y1 + 1, x0 : x1 + 1]
    if not overwrite:
        inside = inside & (sub == 0)
    sub[inside] = class_id
    return int(np.count_nonzero(inside))


def _smooth_field(rng, dims_zyx, coarse_shape, sigma=1.0):
    """Smooth random field in [-1, 1], zoomed up from a coarse grid."""
    coarse = rng.standard_normal(coarse_shape)
    coarse = ndimage.gaussian_filter(coarse, sigma)
    factors = [t / c for t, c in zip(dims_zyx, coarse_shape)]
    fine = ndimage.zoom(coarse, factors, order=1, mode="nearest", grid_mode=True)
    fine = fine[: dims_zyx[0], : dims_zyx[1], : dims_zyx[2]]
    peak = np.abs(fine).max()
    if peak > 0:
        fine = fine / peak
    return fine


def _draw_subject_params(rng, table: ClassTable):
    params = {}
    for e in table.entries:
        params[e.class_id] = dict(
            anchor_off=rng.uniform(-e.anchor_jitter, e.anchor_jitter, size=3),
            size_jit=rng.uniform(0.85, 1.15),
            aspect_jit=rng.uniform(0.9, 1.1, size=3),
            angles=rng.uniform(-0.35, 0.35, size=3),
        )
    return params


def generate_phantom(spec: PhantomSpec, subject_index: int, _stream: int = _COHORT_STREAM):
    """One phantom: deterministic in (spec.seed, subject_index)."""
    table = spec.class_table
    nx, ny, nz = spec.dims
    dims_zyx = (nz, ny, nx)
    n_total = nx * ny * nz
    rng = np.random.default_rng(
        np.random.SeedSequence((int(spec.seed) & 0xFFFFFFFFFFFFFFFF, _stream, int(subject_index)))
    )
    order = [e for e in table.entries if not e.is_small] + [
        e for e in table.entries if e.is_small
    ]
    last_bad = "unknown"
    for _attempt in range(8):
        params = _draw_subject_params(rng, table)
        if spec.deform_amplitude > 0:
            coarse = tuple(max(2, d // 14) for d in dims_zyx)
            disp = [
                _smooth_field(rng, dims_zyx, coarse) * spec.deform_amplitude
                for _ in range(3)
            ]
        else:
            disp = None
        labels = np.zeros(dims_zyx, dtype=np.uint16)
        for e in order:
            p = params[e.class_id]
            anchor = np.asarray(e.anchor) + p["anchor_off"]
            center = anchor * np.array([nx, ny, nz], dtype=np.float64)
            target = e.base_fraction * n_total * p["size_jit"]
            half, shape = _shape_halfextent(e.shape, target, p["aspect_jit"])
            rot = _rotation_matrix(p["angles"])
            _rasterize_organ(labels, e.class_id, center, half, shape, rot, e.is_small)
        if disp is not None:
            zz, yy, xx = np.meshgrid(
                np.arange(nz, dtype=np.float64),
                np.arange(ny, dtype=np.float64),
                np.arange(nx, dtype=np.float64),
                indexing="ij",
            )
            coords = np.stack([zz + disp[0], yy + disp[1], xx + disp[2]])
            labels = ndimage.map_coordinates(labels, coords, order=0, mode="nearest")
        counts = np.bincount(labels.ravel(), minlength=table.num_classes)
        bad = None
        for e in table.entries:
            c = counts[e.class_id]
            if c < 1:
                bad = f"{e.name}: vanished"
                break
            if e.is_small:
                frac = c / n_total
                if not (SMALL_FRACTION_LO <= frac <= SMALL_FRACTION_HI):
                    bad = f"{e.name}: fraction {frac:.2e} outside window"
                    break
        if bad is None:
            intensity = _render_intensity(rng, spec, labels, params)
            return (
                Volume(intensity, spec.spacing),
                LabelMap(labels, spec.spacing, table.num_classes),
            )
        last_bad = bad
    raise GenerationError(
        f"phantom generation failed for subject {subject_index} after 8 attempts ({last_bad})"
    )


def _render_intensity(rng, spec: PhantomSpec, labels, params):
    table = spec.class_table
    nx, ny, nz = spec.dims
    dims_zyx = labels.shape
    means = np.zeros(table.num_classes, dtype=np.float64)
    for e in table.entries:
        off = rng.uniform(-0.5, 0.5) * e.intensity_jitter
        means[e.class_id] = e.intensity_mean + off
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    bx, by, bz = table.body_semiaxes
    body = (
        ((xx / nx - 0.5) / bx) ** 2 + ((yy / ny - 0.5) / by) ** 2 + ((zz / nz - 0.5) / bz) ** 2
    ) <= 1.0
    img = np.where(body, table.body_intensity, table.air_intensity)
    fg = labels != 0
    img[fg] = means[labels[fg]]
    if spec.bias_field_amplitude > 0:
        coarse = tuple(max(2, d // 12) for d in dims_zyx)
        bias = _smooth_field(rng, dims_zyx, coarse)
        img = img * (1.0 + spec.bias_field_amplitude * bias)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=dims_zyx)
    return img.astype(np.float32)


def generate_cohort(spec: PhantomSpec, n: int):
    """n phantoms with subject indices 0..n-1; n must be even."""
    n = int(n)
    if n < 2 or n % 2 != 0:
        raise InvalidArgumentError(f"cohort size must be even and >= 2, got {n}")
    return [generate_phantom(spec, i) for i in range(n)]


def make_atlas_db(spec: PhantomSpec, n_atlases: int, seed_offset: int = 0):
    """Held-out (Volume, LabelMap) pairs from a stream disjoint from cohorts."""
    from .multiatlas import AtlasDB

    n_atlases = int(n_atlases)
    if n_atlases < 1:
        raise InvalidArgumentError("n_atlases must be >= 1")
    pairs = [
        generate_phantom(spec, seed_offset + i, _stream=_ATLAS_STREAM)
        for i in range(n_atlases)
    ]
    return AtlasDB(pairs, spec.class_table.num_classes)


def mini_table(n_large: int = 3, n_small: int = 2) -> ClassTable:
    """Reduced class table for fast tests; keeps the weak-contrast design."""
    full = default_class_table()
    large = [e for e in full.entries if not e.is_small][:n_large]
    small = [e for e in full.entries if e.is_small]
    small = sorted(small, key=lambda e: -e.base_fraction)[:n_small]
    entries = []
    for i, e in enumerate(large + small, start=1):
        entries.append(replace(e, class_id=i))
    return ClassTable(tuple(entries))
