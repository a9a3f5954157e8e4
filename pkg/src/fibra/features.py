"""Window attributes over a direction field.

Each window is a ``w``-cube block of the direction grid. Its attributes are
the coordinate-wise mean of the (canonicalised) cube axes and a
nearest-neighbour estimate of the entropy of their distribution on the
sphere.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from ._parallel import map_ordered
from .errors import (DegenerateWindow, EmptyWindow, InputFormatError, NoValidWindows,
                     TooFewPoints, ValidationError)

EULER_GAMMA = 0.5772
# additive constant of the estimator; see README for the two readings of it
LOG_C1 = 1.1447
LITERAL_LOG_C1 = math.log(1.1447)
RHO_CLAMP = 1e-6

ENTROPY = "entropy"
MEAN_DIR = "mean_dir"
BOTH = "both"
MODES = (ENTROPY, MEAN_DIR, BOTH)
MODE_COLUMNS = {ENTROPY: ("H",), MEAN_DIR: ("X", "Y", "Z"), BOTH: ("H", "X", "Y", "Z")}

FEATURE_CSV_HEADER = ["wx", "wy", "wz", "N", "H", "X", "Y", "Z"]


@dataclass(frozen=True)
class WindowSpec:
    w: int = 8
    stride: int = 8
    n_min: int = 16

    def validate(self):
        if self.w < 2:
            raise ValidationError("window edge must be >= 2 cubes")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")
        if self.n_min < 2:
            raise ValidationError("N_min must be >= 2")
        return self

    def grid_dims(self, cube_grid):
        """Number of window positions along each axis."""
        return tuple(max(0, (m - self.w) // self.stride + 1) for m in cube_grid)

    def centers(self, coords, cube_edge):
        """Window centres in voxel coordinates."""
        coords = np.asarray(coords, dtype=float)
        return (coords * self.stride + self.w / 2.0) * cube_edge


def mean_direction(directions) -> np.ndarray:
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    if len(d) == 0:
        raise EmptyWindow("mean of an empty window")
    return d.sum(axis=0) / len(d)


def nn_distances(directions, mode: str = geometry.AXIAL) -> np.ndarray:
    """Geodesic distance from each point to its nearest other point."""
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    if len(d) < 2:
        raise TooFewPoints("nearest neighbours need at least 2 points")
    dist = geometry.pairwise_distance(d, mode)
    np.fill_diagonal(dist, np.inf)
    return dist.min(axis=1)


def _entropy_and_clamp(directions, mode, log_c1, euler, clamp):
    rho = nn_distances(directions, mode)
    n = len(rho)
    log_rho_bar = float(np.mean(np.log(np.maximum(rho, clamp))))
    h = 2.0 * log_rho_bar + log_c1 + euler + math.log(n - 1)
    return h, float(np.mean(rho < clamp))


def nn_entropy(directions, mode: str = geometry.AXIAL, log_c1: float = LOG_C1,
               euler: float = EULER_GAMMA, clamp: float = RHO_CLAMP) -> float:
    """Nearest-neighbour entropy estimate (nats) of directions on the sphere.

    H = 2 ln(geometric mean of rho_i) + log_c1 + euler + ln(N - 1), where
    rho_i is the geodesic distance of point i to its nearest neighbour,
    clamped below at ``clamp`` radians.
    """
    h, frac = _entropy_and_clamp(directions, mode, log_c1, euler, clamp)
    if frac > 0.5:
        warnings.warn(f"{frac:.0%} of nearest-neighbour distances clamped",
                      DegenerateWindow, stacklevel=2)
    return h


@dataclass
class FeatureGrid:
    """Raw per-window attributes plus the standardisation applied for
    clustering. Unused attributes are NaN."""

    coords: np.ndarray
    n: np.ndarray
    entropy: np.ndarray
    mean_dir: np.ndarray
    mode: str
    grid_dims: tuple
    spec: WindowSpec = field(default_factory=WindowSpec)
    cube_edge: int = 4
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    def __len__(self):
        return len(self.coords)

    @property
    def columns(self):
        return MODE_COLUMNS[self.mode]

    @property
    def dim(self):
        return len(self.columns)

    def raw_matrix(self) -> np.ndarray:
        cols = {"H": self.entropy[:, None], "X": self.mean_dir[:, 0:1],
                "Y": self.mean_dir[:, 1:2], "Z": self.mean_dir[:, 2:3]}
        return np.hstack([cols[c] for c in self.columns]).astype(float)

    def matrix(self) -> np.ndarray:
        """Feature matrix used for clustering (standardised if recorded)."""
        x = self.raw_matrix()
        if self.shift is not None:
            x = (x - self.shift) / self.scale
        return x

    def standardize(self):
        x = self.raw_matrix()
        self.shift = x.mean(axis=0)
        sd = x.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)
        return self

    def centers(self):
        return self.spec.centers(self.coords, self.cube_edge)


def _window_features(df, spec, mode, metric, log_c1, coord):
    c = np.asarray(coord) * spec.stride
    sl = tuple(slice(c[k], c[k] + spec.w) for k in range(3))
    valid = df.valid[sl]
    dirs = df.directions[sl][valid]
    n = len(dirs)
    if n < spec.n_min:
        return None
    h = np.nan
    degenerate = False
    if mode in (ENTROPY, BOTH):
        h, frac = _entropy_and_clamp(dirs, metric, log_c1, EULER_GAMMA, RHO_CLAMP)
        degenerate = frac > 0.5
    m = mean_direction(dirs) if mode in (MEAN_DIR, BOTH) else np.full(3, np.nan)
    return n, h, m, degenerate


def extract_features(df, spec: WindowSpec = WindowSpec(), mode: str = MEAN_DIR,
                     standardize: bool | None = None, metric: str = geometry.AXIAL,
                     log_c1: float = LOG_C1) -> FeatureGrid:
    """Compute window attributes over every stride-spaced window.

    Windows with fewer than ``spec.n_min`` valid cubes are skipped. By
    default features are z-scored only in the combined mode.
    """
    spec.validate()
    if mode not in MODES:
        raise ValidationError(f"unknown attribute mode {mode!r}")
    if df.valid.size == 0:
        raise ValidationError("empty direction field")
    gdims = spec.grid_dims(df.grid_dims)
    positions = list(np.ndindex(*gdims))
    results = map_ordered(lambda p: _window_features(df, spec, mode, metric, log_c1, p), positions)
    kept = [(p, r) for p, r in zip(positions, results) if r is not None]
    if not kept:
        raise NoValidWindows(f"no window has >= {spec.n_min} valid cubes")
    n_deg = sum(r[3] for _, r in kept)
    if n_deg:
        warnings.warn(f"{n_deg} windows had mostly coincident directions",
                      DegenerateWindow, stacklevel=2)
    fg = FeatureGrid(
        coords=np.array([p for p, _ in kept], dtype=int).reshape(-1, 3),
        n=np.array([r[0] for _, r in kept], dtype=int),
        entropy=np.array([r[1] for _, r in kept], dtype=float),
        mean_dir=np.array([r[2] for _, r in kept], dtype=float).reshape(-1, 3),
        mode=mode,
        grid_dims=gdims,
        spec=spec,
        cube_edge=df.cube_edge,
        degenerate=np.array([r[3] for _, r in kept], dtype=bool),
    )
    if standardize is None:
        standardize = mode == BOTH
    if standardize:
        fg.standardize()
    return fg


def _fmt(v):
    return "" if not np.isfinite(v) else repr(float(v))


def write_features(fg: FeatureGrid, csv_path, json_path=None):
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FEATURE_CSV_HEADER)
        for i in range(len(fg)):
            w.writerow([*(int(v) for v in fg.coords[i]), int(fg.n[i]), _fmt(fg.entropy[i]),
                        *(_fmt(v) for v in fg.mean_dir[i])])
    meta = {
        "mode": fg.mode,
        "columns": list(fg.columns),
        "grid_dims": list(fg.grid_dims),
        "window": {"w": fg.spec.w, "stride": fg.spec.stride, "n_min": fg.spec.n_min},
        "cube_edge": fg.cube_edge,
        "normalization": None if fg.shift is None else {
            "shift": [float(v) for v in fg.shift], "scale": [float(v) for v in fg.scale]},
    }
    json_path.write_text(json.dumps(meta, indent=2) + "\n")


def read_features(csv_path, json_path=None) -> FeatureGrid:
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    try:
        meta = json.loads(json_path.read_text())
        mode = meta["mode"]
        spec = WindowSpec(**meta["window"])
        gdims = tuple(int(v) for v in meta["grid_dims"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputFormatError(json_path, f"bad feature sidecar: {exc}") from exc
    if mode not in MODES:
        raise InputFormatError(json_path, f"unknown attribute mode {mode!r}")
    coords, ns, hs, ms = [], [], [], []
    try:
        fh = open(csv_path, newline="")
    except OSError as exc:
        raise InputFormatError(csv_path, str(exc)) from exc
    with fh:
        reader = csv.reader(fh)
        if next(reader, None) != FEATURE_CSV_HEADER:
            raise InputFormatError(csv_path, f"expected header {','.join(FEATURE_CSV_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(FEATURE_CSV_HEADER):
                    raise ValueError(f"expected {len(FEATURE_CSV_HEADER)} fields")
                coords.append([int(v) for v in row[:3]])
                ns.append(int(row[3]))
                vals = [float(v) if v != "" else np.nan for v in row[4:]]
                hs.append(vals[0])
                ms.append(vals[1:])
                needed = {"H": vals[0], "X": vals[1], "Y": vals[2], "Z": vals[3]}
                if any(not np.isfinite(needed[c]) for c in MODE_COLUMNS[mode]):
                    raise ValueError(f"missing value for mode {mode}")
            except ValueError as exc:
                raise InputFormatError(csv_path, str(exc), lineno) from exc
    norm = meta.get("normalization")
    return FeatureGrid(
        coords=np.array(coords, dtype=int).reshape(-1, 3),
        n=np.array(ns, dtype=int),
        entropy=np.array(hs, dtype=float),
        mean_dir=np.array(ms, dtype=float).reshape(-1, 3),
        mode=mode,
        grid_dims=gdims,
        spec=spec,
        cube_edge=int(meta.get("cube_edge", 4)),
        shift=None if norm is None else np.array(norm["shift"], dtype=float),
        scale=None if norm is None else np.array(norm["scale"], dtype=float),
    )
