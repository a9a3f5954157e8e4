"""Layered random sequential adsorption (RSA) of straight cylindrical fibres.

Fibres are placed one at a time with uniformly random centres and
von Mises-Fisher axes; a candidate is rejected if its axis segment comes
closer than the sum of radii to any placed fibre. Placement runs slab by
slab in increasing z, each slab as thick as one fibre. Fibres centred in
the anomaly region draw their axis from a different distribution, which
gives ground truth for the clustering stages.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry
from ._parallel import map_ordered, slab_bounds
from .errors import InputFormatError, JammedBeforeTarget, ValidationError

MAX_VOLUME_FRACTION = 0.3
JAM_RATIO = 0.9

FIBRE_CSV_HEADER = ["cx", "cy", "cz", "ax", "ay", "az", "radius", "half_length", "is_anomaly"]


@dataclass(frozen=True)
class Cylinder:
    center: tuple
    axis: tuple
    radius: float
    half_length: float
    is_anomaly: bool = False

    def __post_init__(self):
        if not (self.radius > 0 and self.half_length > 0):
            raise ValidationError("cylinder radius and half_length must be positive")


@dataclass(frozen=True)
class DirectionParams:
    """von Mises-Fisher axis distribution: mean axis and concentration."""

    mean_axis: tuple = (1.0, 0.0, 0.0)
    kappa: float = 20.0

    def validate(self):
        if self.kappa < 0:
            raise ValidationError("kappa must be >= 0")
        geometry.normalize(self.mean_axis)


@dataclass(frozen=True)
class AnomalyRegion:
    """Axis-aligned box ``[lo, hi)`` or ball, in voxel coordinates.

    ``kind == "none"`` is the empty region.
    """

    kind: str = "box"
    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (0.0, 0.0, 0.0)
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0

    @classmethod
    def box(cls, lo, hi):
        return cls(kind="box", lo=tuple(map(float, lo)), hi=tuple(map(float, hi)))

    @classmethod
    def ball(cls, center, radius):
        return cls(kind="ball", center=tuple(map(float, center)), radius=float(radius))

    @classmethod
    def empty(cls):
        return cls(kind="none")

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "none":
            return np.zeros(len(p), dtype=bool)
        if self.kind == "box":
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            return np.all((p >= lo) & (p < hi), axis=1)
        if self.kind == "ball":
            d2 = np.sum((p - np.asarray(self.center)) ** 2, axis=1)
            return d2 <= self.radius**2
        raise ValidationError(f"unknown anomaly region kind {self.kind!r}")

    def to_dict(self):
        if self.kind == "box":
            return {"kind": "box", "lo": list(self.lo), "hi": list(self.hi)}
        if self.kind == "ball":
            return {"kind": "ball", "center": list(self.center), "radius": self.radius}
        return {"kind": "none"}

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind", "none")
        if kind == "box":
            return cls.box(d["lo"], d["hi"])
        if kind == "ball":
            return cls.ball(d["center"], d["radius"])
        if kind == "none":
            return cls.empty()
        raise ValidationError(f"unknown anomaly region kind {kind!r}")


@dataclass(frozen=True)
class RsaParams:
    dims: tuple = (200, 200, 300)
    radius: float = 2.0
    length: float = 16.0
    volume_fraction: float = 0.15
    max_attempts: int = 200_000
    normal: DirectionParams = field(default_factory=DirectionParams)
    anomaly: DirectionParams = field(
        default_factory=lambda: DirectionParams((0.0, 0.0, 1.0), 20.0)
    )
    region: AnomalyRegion = field(
        default_factory=lambda: AnomalyRegion.box((64, 64, 96), (128, 128, 192))
    )
    seed: int = 0

    @property
    def half_length(self):
        return self.length / 2.0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError(f"invalid dims {self.dims}")
        if not (self.radius > 0 and self.length > 0):
            raise ValidationError("fibre radius and length must be positive")
        if not (0 <= self.volume_fraction < MAX_VOLUME_FRACTION):
            raise ValidationError(
                f"volume_fraction must lie in [0, {MAX_VOLUME_FRACTION})"
            )
        if self.max_attempts < 0:
            raise ValidationError("max_attempts must be >= 0")
        self.normal.validate()
        self.anomaly.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["region"] = self.region.to_dict()
        d["normal"] = {"mean_axis": list(self.normal.mean_axis), "kappa": self.normal.kappa}
        d["anomaly"] = {"mean_axis": list(self.anomaly.mean_axis), "kappa": self.anomaly.kappa}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        for key in ("radius", "length", "volume_fraction"):
            if key in d:
                kw[key] = float(d[key])
        for key in ("max_attempts", "seed"):
            if key in d:
                kw[key] = int(d[key])
        if "dims" in d:
            kw["dims"] = tuple(int(v) for v in d["dims"])
        for key in ("normal", "anomaly"):
            if key in d:
                kw[key] = DirectionParams(
                    tuple(float(v) for v in d[key]["mean_axis"]), float(d[key]["kappa"])
                )
        if "region" in d:
            kw["region"] = AnomalyRegion.from_dict(d["region"])
        unknown = set(d) - set(kw) - {"preset"}
        if unknown:
            raise ValidationError(f"unknown RSA parameters: {sorted(unknown)}")
        return cls(**kw)


def preset(name: str, **overrides) -> RsaParams:
    """Named parameter sets.

    ``rotated`` turns the mean fibre axis inside a central box from x to z
    (visible to the mean-direction attribute); ``dispersed`` keeps the axis
    but lowers the concentration (visible to the entropy attribute).
    """
    if name == "rotated":
        p = RsaParams()
    elif name == "dispersed":
        p = RsaParams(anomaly=DirectionParams((1.0, 0.0, 0.0), 0.5))
    elif name == "homogeneous":
        p = RsaParams(region=AnomalyRegion.empty())
    else:
        raise ValidationError(f"unknown RSA preset {name!r}")
    return RsaParams(**{**p.__dict__, **overrides})


@dataclass
class FibreSystem:
    centers: np.ndarray
    axes: np.ndarray
    radii: np.ndarray
    half_lengths: np.ndarray
    is_anomaly: np.ndarray
    dims: tuple
    region: AnomalyRegion
    normal: DirectionParams
    anomaly: DirectionParams
    volume_fraction: float = 0.0
    jammed: bool = False

    def __len__(self):
        return len(self.centers)

    @property
    def cylinders(self):
        return [
            Cylinder(tuple(c), tuple(a), float(r), float(h), bool(an))
            for c, a, r, h, an in zip(
                self.centers, self.axes, self.radii, self.half_lengths, self.is_anomaly
            )
        ]

    def endpoints(self):
        d = self.axes * self.half_lengths[:, None]
        return self.centers - d, self.centers + d

    def metadata(self):
        return {
            "dims": list(self.dims),
            "region": self.region.to_dict(),
            "normal": {"mean_axis": list(self.normal.mean_axis), "kappa": self.normal.kappa},
            "anomaly": {"mean_axis": list(self.anomaly.mean_axis), "kappa": self.anomaly.kappa},
            "n_fibres": len(self),
            "volume_fraction": self.volume_fraction,
            "jammed": self.jammed,
        }


def segment_distance(p0, p1, q0, q1) -> np.ndarray:
    """Shortest distance between segment p0-p1 and segments q0[k]-q1[k].

    ``p0``/``p1`` are single points; ``q0``/``q1`` are ``(m, 3)`` arrays.
    Closest-point parametrisation with clamping to both segments.
    """
    q0 = np.atleast_2d(q0)
    q1 = np.atleast_2d(q1)
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = float(d1 @ d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = r @ d1
    b = d2 @ d1
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-12 * a * e, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        t = (b * s + f) / e
    # re-clamp t and recompute s where t left [0, 1]
    lo = t < 0
    hi = t > 1
    t = np.clip(t, 0.0, 1.0)
    s = np.where(lo, np.clip(-c / a, 0.0, 1.0), s)
    s = np.where(hi, np.clip((b - c) / a, 0.0, 1.0), s)
    cp = p0 + s[:, None] * d1
    cq = q0 + t[:, None] * d2
    return np.linalg.norm(cp - cq, axis=1)


def _inside_length(p0, p1, dims) -> float:
    """Length of segment p0-p1 clipped to the box [0, dims]."""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if p0[k] < 0 or p0[k] > dims[k]:
                return 0.0
            continue
        ta = (0.0 - p0[k]) / d[k]
        tb = (dims[k] - p0[k]) / d[k]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    return max(0.0, t1 - t0) * float(np.linalg.norm(d))


class _SpatialHash:
    """Uniform grid of cells holding fibre indices for candidate lookup."""

    def __init__(self, cell):
        self.cell = cell
        self.cells = {}

    def key(self, p):
        return tuple(int(math.floor(v / self.cell)) for v in p)

    def add(self, p, idx):
        self.cells.setdefault(self.key(p), []).append(idx)

    def near(self, p):
        kx, ky, kz = self.key(p)
        out = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    out.extend(self.cells.get((kx + dx, ky + dy, kz + dz), ()))
        return out


def generate_rsa(params: RsaParams, strict: bool = False) -> FibreSystem:
    """Run layered RSA and return the placed fibres.

    Stops when every slab reaches the target volume fraction or the attempt
    budget runs out. If the final fraction is below 90% of the target the
    system is flagged ``jammed`` and a warning is issued; with
    ``strict=True`` :class:`JammedBeforeTarget` is raised instead.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    dims = np.asarray(params.dims, dtype=float)
    r, h = float(params.radius), params.half_length
    domain_volume = float(np.prod(dims))
    cross = math.pi * r * r

    cap = 1024
    centers = np.empty((cap, 3))
    axes = np.empty((cap, 3))
    starts = np.empty((cap, 3))
    ends = np.empty((cap, 3))
    anomalous = np.empty(cap, dtype=bool)
    n = 0
    placed_volume = 0.0
    grid = _SpatialHash(2.0 * (r + h))

    slab = 2.0 * h
    n_slabs = max(1, int(math.ceil(dims[2] / slab)))
    attempts_left = params.max_attempts

    if params.volume_fraction > 0:
        for s in range(n_slabs):
            z0 = s * slab
            z1 = min(dims[2], z0 + slab)
            slab_target = params.volume_fraction * dims[0] * dims[1] * (z1 - z0)
            # remaining budget shared among remaining slabs
            budget = attempts_left // (n_slabs - s)
            slab_volume = 0.0
            while slab_volume < slab_target and budget > 0:
                budget -= 1
                attempts_left -= 1
                c = rng.random(3) * np.array([dims[0], dims[1], z1 - z0]) + [0.0, 0.0, z0]
                is_an = bool(params.region.contains(c)[0])
                dp = params.anomaly if is_an else params.normal
                a = geometry.canonicalize(geometry.sample_vmf(rng, dp.mean_axis, dp.kappa, 1)[0])
                p0 = c - h * a
                p1 = c + h * a
                cand = grid.near(c)
                if cand:
                    idx = np.asarray(cand)
                    dist = segment_distance(p0, p1, starts[idx], ends[idx])
                    if np.any(dist <= 2.0 * r):
                        continue
                if n == cap:
                    cap *= 2
                    centers = np.resize(centers, (cap, 3))
                    axes = np.resize(axes, (cap, 3))
                    starts = np.resize(starts, (cap, 3))
                    ends = np.resize(ends, (cap, 3))
                    anomalous = np.resize(anomalous, cap)
                centers[n], axes[n], starts[n], ends[n], anomalous[n] = c, a, p0, p1, is_an
                grid.add(c, n)
                n += 1
                v = cross * _inside_length(p0, p1, dims)
                slab_volume += v
                placed_volume += v

    achieved = placed_volume / domain_volume
    jammed = params.volume_fraction > 0 and achieved < JAM_RATIO * params.volume_fraction
    fs = FibreSystem(
        centers=centers[:n].copy(),
        axes=axes[:n].copy(),
        radii=np.full(n, r),
        half_lengths=np.full(n, h),
        is_anomaly=anomalous[:n].copy(),
        dims=tuple(int(v) for v in params.dims),
        region=params.region,
        normal=params.normal,
        anomaly=params.anomaly,
        volume_fraction=achieved,
        jammed=bool(jammed),
    )
    if jammed:
        if strict:
            raise JammedBeforeTarget(fs, achieved, params.volume_fraction)
        warnings.warn(
            f"RSA jammed at volume fraction {achieved:.4f} (target {params.volume_fraction:.4f})",
            RuntimeWarning,
            stacklevel=2,
        )
    return fs


def count_intersections(fs: FibreSystem) -> int:
    """Number of intersecting fibre pairs, by exhaustive pairwise check."""
    p0, p1 = fs.endpoints()
    bad = 0
    for i in range(len(fs) - 1):
        d = segment_distance(p0[i], p1[i], p0[i + 1:], p1[i + 1:])
        bad += int(np.sum(d <= fs.radii[i] + fs.radii[i + 1:]))
    return bad


def _rasterize_slab(fs: FibreSystem, z0: int, z1: int) -> np.ndarray:
    nx, ny, _ = fs.dims
    out = np.zeros((nx, ny, z1 - z0), dtype=bool)
    if len(fs) == 0:
        return out
    a = fs.axes
    ext = fs.half_lengths[:, None] * np.abs(a) + fs.radii[:, None] * np.sqrt(
        np.clip(1.0 - a * a, 0.0, 1.0)
    )
    lo = np.floor(fs.centers - ext - 0.5).astype(int)
    hi = np.ceil(fs.centers + ext - 0.5).astype(int) + 1
    hits = np.nonzero((hi[:, 2] > z0) & (lo[:, 2] < z1))[0]
    for i in hits:
        xs = slice(max(lo[i, 0], 0), min(hi[i, 0], nx))
        ys = slice(max(lo[i, 1], 0), min(hi[i, 1], ny))
        zs = slice(max(lo[i, 2], z0), min(hi[i, 2], z1))
        if xs.start >= xs.stop or ys.start >= ys.stop or zs.start >= zs.stop:
            continue
        gx = np.arange(xs.start, xs.stop) + 0.5 - fs.centers[i, 0]
        gy = np.arange(ys.start, ys.stop) + 0.5 - fs.centers[i, 1]
        gz = np.arange(zs.start, zs.stop) + 0.5 - fs.centers[i, 2]
        dx, dy, dz = np.meshgrid(gx, gy, gz, indexing="ij", sparse=True)
        t = dx * a[i, 0] + dy * a[i, 1] + dz * a[i, 2]
        rad2 = dx * dx + dy * dy + dz * dz - t * t
        inside = (np.abs(t) <= fs.half_lengths[i]) & (rad2 <= fs.radii[i] ** 2)
        out[xs, ys, zs.start - z0:zs.stop - z0] |= inside
    return out


def voxelize(fs: FibreSystem, blur_sigma: float = 0.0, noise_sigma: float = 0.0,
             seed: int = 0) -> np.ndarray:
    """Render fibres as an 8-bit ``(nx, ny, nz)`` volume.

    Voxel ``(i, j, k)`` has its centre at ``(i + .5, j + .5, k + .5)`` and is
    set to 255 when that centre lies inside a cylinder. Optional Gaussian
    blur and clipped additive Gaussian noise emulate CT imaging.
    """
    nx, ny, nz = fs.dims
    bounds = slab_bounds(nz, 32)
    slabs = map_ordered(lambda b: _rasterize_slab(fs, *b), bounds)
    mask = np.concatenate(slabs, axis=2) if slabs else np.zeros(fs.dims, dtype=bool)
    if blur_sigma <= 0 and noise_sigma <= 0:
        return np.where(mask, np.uint8(255), np.uint8(0))
    vol = mask.astype(np.float32) * 255.0
    if blur_sigma > 0:
        vol = ndimage.gaussian_filter(vol, blur_sigma, mode="reflect", truncate=3.0)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        vol += rng.normal(0.0, noise_sigma, size=vol.shape).astype(np.float32)
    return np.clip(np.rint(vol), 0, 255).astype(np.uint8)


def write_fibres_csv(fs: FibreSystem, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIBRE_CSV_HEADER)
        for c, a, r, h, an in zip(fs.centers, fs.axes, fs.radii, fs.half_lengths, fs.is_anomaly):
            w.writerow([repr(float(v)) for v in (*c, *a, r, h)] + [int(an)])


def write_system(fs: FibreSystem, csv_path, json_path):
    write_fibres_csv(fs, csv_path)
    Path(json_path).write_text(json.dumps(fs.metadata(), indent=2) + "\n")


def read_system(csv_path, json_path) -> FibreSystem:
    try:
        meta = json.loads(Path(json_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputFormatError(json_path, str(exc)) from exc
    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FIBRE_CSV_HEADER:
            raise InputFormatError(csv_path, f"expected header {','.join(FIBRE_CSV_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(FIBRE_CSV_HEADER):
                    raise ValueError(f"expected {len(FIBRE_CSV_HEADER)} fields")
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise InputFormatError(csv_path, str(exc), lineno) from exc
    arr = np.asarray(rows, dtype=float).reshape(-1, len(FIBRE_CSV_HEADER))
    try:
        return FibreSystem(
            centers=arr[:, 0:3].copy(),
            axes=arr[:, 3:6].copy(),
            radii=arr[:, 6].copy(),
            half_lengths=arr[:, 7].copy(),
            is_anomaly=arr[:, 8].astype(bool),
            dims=tuple(int(v) for v in meta["dims"]),
            region=AnomalyRegion.from_dict(meta["region"]),
            normal=DirectionParams(tuple(meta["normal"]["mean_axis"]), meta["normal"]["kappa"]),
            anomaly=DirectionParams(tuple(meta["anomaly"]["mean_axis"]), meta["anomaly"]["kappa"]),
            volume_fraction=float(meta.get("volume_fraction", 0.0)),
            jammed=bool(meta.get("jammed", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFormatError(json_path, f"malformed system metadata: {exc}") from exc


def ground_truth_labels(fs: FibreSystem, spec=None, cube_edge: int = 4):
    """Label every window of the domain: anomaly iff its centre lies in
    the anomaly region."""
    return region_labels(fs.region, fs.dims, spec, cube_edge)


def region_labels(region: AnomalyRegion, dims, spec=None, cube_edge: int = 4):
    from .clusters import ANOMALY, ClusterMap
    from .features import WindowSpec

    spec = (spec or WindowSpec()).validate()
    cube_grid = tuple(int(n) // cube_edge for n in dims)
    gdims = spec.grid_dims(cube_grid)
    coords = np.array(list(np.ndindex(*gdims)), dtype=int).reshape(-1, 3)
    inside = region.contains(spec.centers(coords, cube_edge)) if len(coords) else np.zeros(0, bool)
    return ClusterMap(coords, inside.astype(int), gdims, ANOMALY)
