"""Core grid types, geometry arithmetic, and bit-exact file I/O.

Three dense grid kinds share one geometry model: :class:`Volume` (scalar
intensities), :class:`LabelMap` (integer class IDs), and :class:`ProbMap`
(per-voxel categorical distributions). Grids report their dimensions as
``(nx, ny, nz)`` while the backing numpy arrays are C-contiguous and
indexed ``[z, y, x]`` (x fastest), which is also the serialization order
of the SVF1 container. Voxel ``i`` along an axis is centred at physical
coordinate ``(i + 0.5) * spacing`` millimetres.

All operations are pure: inputs are never mutated.
"""

from __future__ import annotations

import struct

import numpy as np

from . import backend

MAGIC = b"SVF1"
KIND_INTENSITY = 0
KIND_LABEL = 1
KIND_PROB = 2
DTYPE_F32 = 0
DTYPE_U16 = 1


class InvalidArgumentError(ValueError):
    """Arguments violate an operation's preconditions."""


class BoundsError(IndexError):
    """A box or index falls outside a grid."""


class FormatError(ValueError):
    """A serialized grid is malformed. Carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise InvalidArgumentError(f"dims must be 3 positive integers, got {dims}")
    return dims


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise InvalidArgumentError(f"spacing must be 3 positive reals, got {spacing}")
    return spacing


class Volume:
    """A scalar 3D grid with physical spacing.

    ``data`` is float32, shape ``(nz, ny, nx)``; ``spacing`` is millimetres
    per voxel in ``(x, y, z)`` order.
    """

    kind = KIND_INTENSITY

    def __init__(self, data: np.ndarray, spacing):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 3:
            raise InvalidArgumentError(f"volume data must be 3D, got {data.ndim}D")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("volume data contains NaN or Inf")
        self.data = data
        self.spacing = _check_spacing(spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Grid size as ``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing)


class LabelMap:
    """A grid of non-negative class IDs sharing a Volume's geometry."""

    kind = KIND_LABEL

    def __init__(self, data: np.ndarray, spacing, num_classes: int):
        data = np.ascontiguousarray(data, dtype=np.uint16)
        if data.ndim != 3:
            raise InvalidArgumentError(f"label data must be 3D, got {data.ndim}D")
        num_classes = int(num_classes)
        if num_classes < 1:
            raise InvalidArgumentError("num_classes must be >= 1")
        if data.size and int(data.max()) >= num_classes:
            raise InvalidArgumentError(
                f"label values reach {int(data.max())}, outside [0, {num_classes})"
            )
        self.data = data
        self.spacing = _check_spacing(spacing)
        self.num_classes = num_classes

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def copy(self) -> "LabelMap":
        return LabelMap(self.data.copy(), self.spacing, self.num_classes)


class ProbMap:
    """Per-voxel categorical distribution over ``num_classes`` channels.

    ``data`` has shape ``(num_classes, nz, ny, nx)``; float32 or float64.
    Channel values must lie in [0, 1] and sum to 1 within 1e-5 per voxel.
    """

    kind = KIND_PROB

    def __init__(self, data: np.ndarray, spacing):
        if data.ndim != 4:
            raise InvalidArgumentError(f"prob data must be 4D (C,z,y,x), got {data.ndim}D")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        data = np.ascontiguousarray(data)
        if data.min() < -1e-7 or data.max() > 1.0 + 1e-5:
            raise InvalidArgumentError("prob channel values outside [0, 1]")
        sums = data.sum(axis=0, dtype=np.float64)
        err = float(np.abs(sums - 1.0).max()) if sums.size else 0.0
        if err > 1e-5:
            raise InvalidArgumentError(f"per-voxel prob sums deviate from 1 by {err:.3g}")
        self.data = data
        self.spacing = _check_spacing(spacing)

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        _, nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def argmax_labels(self) -> LabelMap:
        """Most probable class per voxel."""
        return LabelMap(
            self.data.argmax(axis=0).astype(np.uint16), self.spacing, self.num_classes
        )


class BoundingBox:
    """Inclusive voxel-index box, coordinates in (x, y, z) order."""

    def __init__(self, lo, hi, organ_id: int = 0):
        self.lo = tuple(int(v) for v in lo)
        self.hi = tuple(int(v) for v in hi)
        self.organ_id = int(organ_id)
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise InvalidArgumentError("box corners must have 3 components")
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise InvalidArgumentError(f"box lo {self.lo} exceeds hi {self.hi}")

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def check_inside(self, dims) -> None:
        for ax, (l, h, d) in enumerate(zip(self.lo, self.hi, dims)):
            if l < 0 or h >= d:
                raise BoundsError(
                    f"box [{self.lo}..{self.hi}] outside dims {tuple(dims)} on axis {ax}"
                )

    def slices(self):
        """Numpy index tuple in array (z, y, x) order."""
        return (
            slice(self.lo[2], self.hi[2] + 1),
            slice(self.lo[1], self.hi[1] + 1),
            slice(self.lo[0], self.hi[0] + 1),
        )

    def __repr__(self):
        return f"BoundingBox(lo={self.lo}, hi={self.hi}, organ_id={self.organ_id})"

    def __eq__(self, other):
        return (
            isinstance(other, BoundingBox)
            and self.lo == other.lo
            and self.hi == other.hi
            and self.organ_id == other.organ_id
        )


def make_volume(dims, spacing, fill: float = 0.0) -> Volume:
    """A constant-filled volume of the given geometry."""
    dims = _check_dims(dims)
    spacing = _check_spacing(spacing)
    fill = float(fill)
    if not np.isfinite(fill):
        raise InvalidArgumentError("fill must be finite")
    nx, ny, nz = dims
    return Volume(np.full((nz, ny, nx), fill, dtype=np.float32), spacing)


def crop(grid, box: BoundingBox):
    """Extract the box from a Volume, LabelMap, or ProbMap; spacing kept."""
    box.check_inside(grid.dims)
    sl = box.slices()
    if isinstance(grid, Volume):
        return Volume(grid.data[sl].copy(), grid.spacing)
    if isinstance(grid, LabelMap):
        return LabelMap(grid.data[sl].copy(), grid.spacing, grid.num_classes)
    if isinstance(grid, ProbMap):
        return ProbMap(grid.data[(slice(None),) + sl].copy(), grid.spacing)
    raise InvalidArgumentError(f"cannot crop object of type {type(grid).__name__}")


def paste(target: LabelMap, patch: LabelMap, box: BoundingBox, organ_id: int) -> LabelMap:
    """Write a binary patch into a copy of ``target`` as ``organ_id``.

    Inside the box the pasted organ is authoritative: voxels where the
    patch is foreground (nonzero) become ``organ_id``; voxels where it is
    background lose any prior ``organ_id`` claim but other labels are kept.
    """
    box.check_inside(target.dims)
    organ_id = int(organ_id)
    if not (0 <= organ_id < target.num_classes):
        raise InvalidArgumentError(
            f"organ_id {organ_id} outside [0, {target.num_classes})"
        )
    if tuple(patch.dims) != tuple(box.extent):
        raise InvalidArgumentError(
            f"patch dims {patch.dims} do not match box extent {box.extent}"
        )
    out = target.data.copy()
    sl = box.slices()
    region = out[sl]
    fg = patch.data != 0
    region[(~fg) & (region == organ_id)] = 0
    region[fg] = organ_id
    return LabelMap(out, target.spacing, target.num_classes)


def _resample_geometry(dims, spacing, new_spacing):
    new_dims = tuple(
        max(1, int(round(d * s / ns))) for d, s, ns in zip(dims, spacing, new_spacing)
    )
    # half-voxel-centre convention: out index i samples ((i+0.5)*ns/s) - 0.5
    scale = [ns / s for s, ns in zip(spacing, new_spacing)]
    offset = [0.5 * sc - 0.5 for sc in scale]
    return new_dims, scale, offset


def resample(grid, new_spacing, mode: str):
    """Resample to a new spacing, preserving physical extent.

    ``mode`` is ``linear`` (intensities) or ``nearest`` (labels; the only
    mode a LabelMap accepts).
    """
    new_spacing = _check_spacing(new_spacing)
    if mode not in ("linear", "nearest"):
        raise InvalidArgumentError(f"mode must be 'linear' or 'nearest', got {mode!r}")
    is_label = isinstance(grid, LabelMap)
    if is_label and mode != "nearest":
        raise InvalidArgumentError("label maps must be resampled with mode='nearest'")
    if not isinstance(grid, (Volume, LabelMap)):
        raise InvalidArgumentError(f"cannot resample {type(grid).__name__}")
    new_dims, scale, offset = _resample_geometry(grid.dims, grid.spacing, new_spacing)
    nx, ny, nz = new_dims
    # kernels work in (z, y, x) index order
    M = np.diag([scale[2], scale[1], scale[0]]).astype(np.float64)
    off = np.array([offset[2], offset[1], offset[0]], dtype=np.float64)
    kern = backend.kernels()
    if mode == "linear":
        out = np.empty((nz, ny, nx), dtype=np.float32)
        kern.trilinear_affine(grid.data, M, off, out, False)
        return Volume(out, new_spacing)
    out = np.empty((nz, ny, nx), dtype=grid.data.dtype)
    kern.nearest_affine(grid.data, M, off, out, False)
    if is_label:
        return LabelMap(out, new_spacing, grid.num_classes)
    return Volume(out, new_spacing)


def one_hot(labels: LabelMap) -> ProbMap:
    """Indicator ProbMap: channel c is 1 exactly where the label is c."""
    C = labels.num_classes
    nz, ny, nx = labels.data.shape
    out = np.zeros((C, nz, ny, nx), dtype=np.float32)
    flat = out.reshape(C, -1)
    idx = labels.data.reshape(-1).astype(np.intp)
    flat[idx, np.arange(idx.size)] = 1.0
    return ProbMap(out, labels.spacing)


_HEADER = struct.Struct("<4sB3I3fIB")  # magic, kind, dims, spacing, num_classes, dtype


def write_volume(grid, path) -> None:
    """Serialize a grid to an SVF1 file, bit-exactly."""
    if isinstance(grid, Volume):
        kind, num_classes, payload = KIND_INTENSITY, 0, grid.data
        dtype_code = DTYPE_F32
    elif isinstance(grid, LabelMap):
        kind, num_classes, payload = KIND_LABEL, grid.num_classes, grid.data
        dtype_code = DTYPE_U16
    elif isinstance(grid, ProbMap):
        kind, num_classes = KIND_PROB, grid.num_classes
        payload = grid.data.astype(np.float32)  # files carry float32 channels
        dtype_code = DTYPE_F32
    else:
        raise InvalidArgumentError(f"cannot serialize {type(grid).__name__}")
    nx, ny, nz = grid.dims
    sx, sy, sz = grid.spacing
    header = _HEADER.pack(MAGIC, kind, nx, ny, nz, sx, sy, sz, num_classes, dtype_code)
    raw = payload.astype("<f4" if dtype_code == DTYPE_F32 else "<u2", copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raw.tobytes())


def read_volume(path):
    """Load an SVF1 file back into the grid kind it was written from."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"file truncated at {len(blob)} bytes", len(blob))
    magic, kind, nx, ny, nz, sx, sy, sz, num_classes, dtype_code = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if kind not in (KIND_INTENSITY, KIND_LABEL, KIND_PROB):
        raise FormatError(f"unknown kind code {kind}", 4)
    if dtype_code not in (DTYPE_F32, DTYPE_U16):
        raise FormatError(f"unknown dtype code {dtype_code}", 33)
    dims = (nx, ny, nz)
    try:
        dims = _check_dims(dims)
        spacing = _check_spacing((sx, sy, sz))
    except InvalidArgumentError as exc:
        raise FormatError(f"bad geometry: {exc}", 5) from exc
    n_voxels = nx * ny * nz
    channels = num_classes if kind == KIND_PROB else 1
    itemsize = 4 if dtype_code == DTYPE_F32 else 2
    expected = n_voxels * channels * itemsize
    got = len(blob) - _HEADER.size
    if got != expected:
        raise FormatError(
            f"payload is {got} bytes, expected {expected}", _HEADER.size + min(got, expected)
        )
    dt = np.dtype("<f4") if dtype_code == DTYPE_F32 else np.dtype("<u2")
    payload = np.frombuffer(blob, dtype=dt, offset=_HEADER.size).copy()
    if kind == KIND_INTENSITY:
        if dtype_code != DTYPE_F32:
            raise FormatError("intensity payload must be float32", 33)
        return Volume(payload.reshape(nz, ny, nx), spacing)
    if kind == KIND_LABEL:
        if dtype_code != DTYPE_U16:
            raise FormatError("label payload must be uint16", 33)
        if num_classes < 1:
            raise FormatError("label file needs num_classes >= 1", 29)
        return LabelMap(payload.reshape(nz, ny, nx), spacing, num_classes)
    if num_classes < 1:
        raise FormatError("prob file needs num_classes >= 1", 29)
    return ProbMap(payload.reshape(num_classes, nz, ny, nx), spacing)
