"""Local fibre directions from Hessian eigenanalysis, pooled into cubes.

The smoothed grey image of a bright fibre curves strongly across the
fibre and hardly at all along it, so the Hessian eigenvector with the
smallest-magnitude eigenvalue estimates the fibre axis. Voxel axes are
then pooled per ``c``-voxel cube through the orientation tensor.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry
from ._parallel import map_ordered
from .errors import InputFormatError, ValidationError

DEGENERATE_EPS = 1e-9
DEFAULT_SIGMA = 1.5
DEFAULT_CUBE = 4
DEFAULT_MIN_VOXELS = 8

DIRECTION_CSV_HEADER = ["ix", "iy", "iz", "x", "y", "z", "count", "valid"]


@dataclass
class Volume3D:
    """8-bit voxel array indexed ``[x, y, z]``."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or self.voxels.size == 0:
            raise ValidationError("volume must be a non-empty 3D array")

    @property
    def dims(self):
        return tuple(int(v) for v in self.voxels.shape)


def write_volume(vol: Volume3D, raw_path, json_path=None):
    """Headerless u8 file, x fastest, plus JSON sidecar."""
    raw_path = Path(raw_path)
    json_path = Path(json_path) if json_path else raw_path.with_suffix(".json")
    vol.voxels.astype(np.uint8).ravel(order="F").tofile(raw_path)
    meta = {"dims": list(vol.dims), "dtype": "u8", "order": "x-fastest",
            "spacing": list(vol.spacing)}
    json_path.write_text(json.dumps(meta) + "\n")


def read_volume(raw_path, json_path=None) -> Volume3D:
    raw_path = Path(raw_path)
    json_path = Path(json_path) if json_path else raw_path.with_suffix(".json")
    try:
        meta = json.loads(json_path.read_text())
        dims = tuple(int(v) for v in meta["dims"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputFormatError(json_path, f"bad volume sidecar: {exc}") from exc
    if meta.get("dtype", "u8") != "u8" or meta.get("order", "x-fastest") != "x-fastest":
        raise InputFormatError(json_path, "only dtype u8 with x-fastest order is supported")
    try:
        data = np.fromfile(raw_path, dtype=np.uint8)
    except OSError as exc:
        raise InputFormatError(raw_path, str(exc)) from exc
    if data.size != int(np.prod(dims)):
        raise InputFormatError(raw_path, f"expected {int(np.prod(dims))} bytes, found {data.size}")
    spacing = tuple(float(v) for v in meta.get("spacing", (1.0, 1.0, 1.0)))
    return Volume3D(data.reshape(dims, order="F"), spacing)


def smooth(voxels, sigma: float) -> np.ndarray:
    """Separable Gaussian, truncated at 3 sigma, reflective boundaries."""
    return ndimage.gaussian_filter(np.asarray(voxels, dtype=np.float32), sigma,
                                   mode="reflect", truncate=3.0)


def otsu_threshold(values) -> float:
    from skimage.filters import threshold_otsu

    values = np.asarray(values)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return hi
    return float(threshold_otsu(values))


def _hessian(padded: np.ndarray):
    """Central-difference Hessian of the interior of a 1-voxel padded array.

    Returns the six unique components (xx, yy, zz, xy, xz, yz).
    """
    f = padded
    c = f[1:-1, 1:-1, 1:-1]
    hxx = f[2:, 1:-1, 1:-1] - 2 * c + f[:-2, 1:-1, 1:-1]
    hyy = f[1:-1, 2:, 1:-1] - 2 * c + f[1:-1, :-2, 1:-1]
    hzz = f[1:-1, 1:-1, 2:] - 2 * c + f[1:-1, 1:-1, :-2]
    hxy = (f[2:, 2:, 1:-1] - f[2:, :-2, 1:-1] - f[:-2, 2:, 1:-1] + f[:-2, :-2, 1:-1]) / 4
    hxz = (f[2:, 1:-1, 2:] - f[2:, 1:-1, :-2] - f[:-2, 1:-1, 2:] + f[:-2, 1:-1, :-2]) / 4
    hyz = (f[1:-1, 2:, 2:] - f[1:-1, 2:, :-2] - f[1:-1, :-2, 2:] + f[1:-1, :-2, :-2]) / 4
    return hxx, hyy, hzz, hxy, hxz, hyz


def _axes_from_hessian(h, mask):
    """Smallest-|eigenvalue| eigenvectors at masked voxels.

    Returns ``(dirs, valid)`` with ``dirs`` of shape ``mask.shape + (3,)``.
    """
    dirs = np.full(mask.shape + (3,), np.nan, dtype=np.float32)
    valid = np.zeros(mask.shape, dtype=bool)
    m = int(mask.sum())
    if m == 0:
        return dirs, valid
    hxx, hyy, hzz, hxy, hxz, hyz = (comp[mask].astype(np.float64) for comp in h)
    mats = np.empty((m, 3, 3))
    mats[:, 0, 0], mats[:, 1, 1], mats[:, 2, 2] = hxx, hyy, hzz
    mats[:, 0, 1] = mats[:, 1, 0] = hxy
    mats[:, 0, 2] = mats[:, 2, 0] = hxz
    mats[:, 1, 2] = mats[:, 2, 1] = hyz
    w, v = np.linalg.eigh(mats)
    aw = np.abs(w)
    order = np.argsort(aw, axis=1)
    smallest = order[:, 0]
    gap = np.take_along_axis(aw, order[:, 1:2], 1)[:, 0] - np.take_along_axis(aw, order[:, :1], 1)[:, 0]
    ok = gap >= DEGENERATE_EPS
    vec = v[np.arange(m), :, smallest]
    vec[ok] = geometry.canonicalize(vec[ok])
    vec[~ok] = np.nan
    dirs[mask] = vec
    valid[mask] = ok
    return dirs, valid


@dataclass
class VoxelDirections:
    """Per-voxel fibre axes. ``mask`` marks fibre voxels, ``valid`` those
    whose Hessian was non-degenerate."""

    dirs: np.ndarray
    mask: np.ndarray
    valid: np.ndarray
    threshold: float


def hessian_directions(vol, sigma: float = DEFAULT_SIGMA, fibre_threshold=None) -> VoxelDirections:
    """Per-voxel axes for voxels brighter than ``fibre_threshold`` after
    smoothing (Otsu threshold of the smoothed volume by default)."""
    voxels = vol.voxels if isinstance(vol, Volume3D) else np.asarray(vol)
    if voxels.ndim != 3 or voxels.size == 0:
        raise ValidationError("volume must be a non-empty 3D array")
    if sigma < 0.5:
        raise ValidationError("sigma must be >= 0.5")
    s = smooth(voxels, sigma)
    thr = otsu_threshold(s) if fibre_threshold is None else float(fibre_threshold)
    mask = s > thr
    padded = np.pad(s, 1, mode="symmetric")
    dirs, valid = _axes_from_hessian(_hessian(padded), mask)
    return VoxelDirections(dirs, mask, valid, thr)


@dataclass
class DirectionField:
    """One axial direction per cube of ``cube_edge`` voxels.

    ``directions`` is ``(mx, my, mz, 3)`` with NaN rows for invalid cubes;
    ``counts`` holds fibre-voxel counts.
    """

    directions: np.ndarray
    valid: np.ndarray
    counts: np.ndarray
    cube_edge: int
    meta: dict = field(default_factory=dict)

    @property
    def grid_dims(self):
        return tuple(int(v) for v in self.valid.shape)

    def valid_directions(self):
        return self.directions[self.valid]


def _tensor_sums(dirs, valid, c, shape):
    mx, my, mz = shape
    d = np.where(valid[..., None], dirs, 0.0).astype(np.float64)
    d = d[: mx * c, : my * c, : mz * c]
    t = np.empty((mx, my, mz, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            blk = (d[..., a] * d[..., b]).reshape(mx, c, my, c, mz, c).sum(axis=(1, 3, 5))
            t[..., a, b] = blk
            t[..., b, a] = blk
    return t


def _block_count(arr, c, shape):
    mx, my, mz = shape
    a = arr[: mx * c, : my * c, : mz * c]
    return a.reshape(mx, c, my, c, mz, c).sum(axis=(1, 3, 5), dtype=np.int64)


def aggregate_to_cubes(vd: VoxelDirections, c: int = DEFAULT_CUBE,
                       min_voxels: int = DEFAULT_MIN_VOXELS) -> DirectionField:
    """Principal axis of the orientation tensor of valid voxels per cube.

    Cubes with fewer than ``min_voxels`` valid voxels are invalid. Partial
    cubes at the far faces of the volume are dropped.
    """
    if c < 2:
        raise ValidationError("cube edge must be >= 2")
    shape = tuple(n // c for n in vd.mask.shape)
    if min(shape) < 1:
        raise ValidationError("volume smaller than one cube")
    n_valid = _block_count(vd.valid, c, shape)
    counts = _block_count(vd.mask, c, shape)
    t = _tensor_sums(vd.dirs, vd.valid, c, shape)
    ok = n_valid >= min_voxels
    directions = np.full(shape + (3,), np.nan)
    if ok.any():
        _, v = np.linalg.eigh(t[ok])
        directions[ok] = geometry.canonicalize(v[:, :, -1])
    return DirectionField(directions, ok, counts, int(c))


def direction_field(vol, sigma: float = DEFAULT_SIGMA, c: int = DEFAULT_CUBE,
                    fibre_threshold=None, min_voxels: int = DEFAULT_MIN_VOXELS) -> DirectionField:
    """Hessian directions plus cube aggregation, processed in z-slabs.

    Equivalent to ``aggregate_to_cubes(hessian_directions(...))`` but keeps
    only one slab of per-voxel directions in memory at a time.
    """
    voxels = vol.voxels if isinstance(vol, Volume3D) else np.asarray(vol)
    if voxels.ndim != 3 or voxels.size == 0:
        raise ValidationError("volume must be a non-empty 3D array")
    if sigma < 0.5:
        raise ValidationError("sigma must be >= 0.5")
    if c < 2:
        raise ValidationError("cube edge must be >= 2")
    s = smooth(voxels, sigma)
    thr = otsu_threshold(s) if fibre_threshold is None else float(fibre_threshold)
    padded = np.pad(s, 1, mode="symmetric")
    del s
    mx, my, mz = (n // c for n in voxels.shape)
    if min(mx, my, mz) < 1:
        raise ValidationError("volume smaller than one cube")
    step = max(1, 32 // c) * c
    bounds = [(z, min(z + step, mz * c)) for z in range(0, mz * c, step)]

    def work(b):
        z0, z1 = b
        sub = padded[:, :, z0:z1 + 2]
        mask = sub[1:-1, 1:-1, 1:-1] > thr
        dirs, valid = _axes_from_hessian(_hessian(sub), mask)
        return aggregate_to_cubes(VoxelDirections(dirs, mask, valid, thr), c, min_voxels)

    parts = map_ordered(work, bounds)
    df = DirectionField(
        np.concatenate([p.directions for p in parts], axis=2),
        np.concatenate([p.valid for p in parts], axis=2),
        np.concatenate([p.counts for p in parts], axis=2),
        int(c),
    )
    df.meta = {"sigma": float(sigma), "threshold": thr, "min_voxels": int(min_voxels)}
    return df


def write_direction_field(df: DirectionField, csv_path, json_path=None):
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIRECTION_CSV_HEADER)
        for idx in np.ndindex(*df.grid_dims):
            ok = bool(df.valid[idx])
            vec = [repr(float(v)) for v in df.directions[idx]] if ok else ["", "", ""]
            w.writerow([*idx, *vec, int(df.counts[idx]), int(ok)])
    meta = {"grid_dims": list(df.grid_dims), "cube_edge": df.cube_edge, **df.meta}
    json_path.write_text(json.dumps(meta, indent=2) + "\n")


def read_direction_field(csv_path, json_path=None) -> DirectionField:
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    meta = {}
    if json_path.exists():
        try:
            meta = json.loads(json_path.read_text())
        except json.JSONDecodeError as exc:
            raise InputFormatError(json_path, str(exc), exc.lineno) from exc
    rows = []
    try:
        fh = open(csv_path, newline="")
    except OSError as exc:
        raise InputFormatError(csv_path, str(exc)) from exc
    with fh:
        reader = csv.reader(fh)
        if next(reader, None) != DIRECTION_CSV_HEADER:
            raise InputFormatError(csv_path, f"expected header {','.join(DIRECTION_CSV_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(DIRECTION_CSV_HEADER):
                    raise ValueError(f"expected {len(DIRECTION_CSV_HEADER)} fields")
                ix, iy, iz = (int(v) for v in row[:3])
                ok = bool(int(row[7]))
                vec = [float(v) for v in row[3:6]] if ok else [np.nan] * 3
                rows.append((ix, iy, iz, *vec, int(row[6]), ok))
            except ValueError as exc:
                raise InputFormatError(csv_path, str(exc), lineno) from exc
    if "grid_dims" in meta:
        shape = tuple(int(v) for v in meta["grid_dims"])
    elif rows:
        shape = tuple(max(r[k] for r in rows) + 1 for k in range(3))
    else:
        raise InputFormatError(csv_path, "empty direction field")
    directions = np.full(shape + (3,), np.nan)
    valid = np.zeros(shape, dtype=bool)
    counts = np.zeros(shape, dtype=np.int64)
    for lineno, (ix, iy, iz, x, y, z, n, ok) in enumerate(rows, start=2):
        if not (0 <= ix < shape[0] and 0 <= iy < shape[1] and 0 <= iz < shape[2]):
            raise InputFormatError(csv_path, "cube index outside grid", lineno)
        directions[ix, iy, iz] = (x, y, z)
        valid[ix, iy, iz] = ok
        counts[ix, iy, iz] = n
    extra = {k: v for k, v in meta.items() if k not in ("grid_dims", "cube_edge")}
    return DirectionField(directions, valid, counts, int(meta.get("cube_edge", DEFAULT_CUBE)), extra)
