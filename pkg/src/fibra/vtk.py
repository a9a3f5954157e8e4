"""ASCII legacy VTK ``STRUCTURED_POINTS`` files for window grids."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputFormatError


def _fmt(v, is_int):
    if is_int:
        return str(int(v))
    return repr(float(v))


def write_vtk(path, fields: dict, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
              title="fibra window grid"):
    """Write 3D arrays of identical shape as point scalars, x fastest."""
    arrays = {name: np.asarray(a) for name, a in fields.items()}
    shapes = {a.shape for a in arrays.values()}
    if len(shapes) != 1 or len(next(iter(shapes))) != 3:
        raise ValueError("all fields must be 3D arrays of one shape")
    nx, ny, nz = next(iter(shapes))
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx} {ny} {nz}",
        "ORIGIN " + " ".join(repr(float(v)) for v in origin),
        "SPACING " + " ".join(repr(float(v)) for v in spacing),
        f"POINT_DATA {nx * ny * nz}",
    ]
    for name, a in arrays.items():
        is_int = np.issubdtype(a.dtype, np.integer) or a.dtype == bool
        lines.append(f"SCALARS {name} {'int' if is_int else 'double'} 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(_fmt(v, is_int) for v in a.ravel(order="F"))
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path):
    """Parse a file written by :func:`write_vtk`.

    Returns ``(fields, spacing, origin)``.
    """
    path = Path(path)
    try:
        tokens = path.read_text().split("\n")
    except OSError as exc:
        raise InputFormatError(path, str(exc)) from exc
    dims = spacing = origin = None
    npts = None
    fields = {}
    i = 0
    while i < len(tokens):
        line = tokens[i].strip()
        head = line.split()
        if not head:
            i += 1
            continue
        key = head[0]
        if key == "DIMENSIONS":
            dims = tuple(int(v) for v in head[1:4])
        elif key == "SPACING":
            spacing = tuple(float(v) for v in head[1:4])
        elif key == "ORIGIN":
            origin = tuple(float(v) for v in head[1:4])
        elif key == "POINT_DATA":
            npts = int(head[1])
        elif key == "SCALARS":
            name, kind = head[1], head[2]
            if npts is None or dims is None:
                raise InputFormatError(path, "SCALARS before DIMENSIONS/POINT_DATA", i + 1)
            start = i + 2
            raw = tokens[start:start + npts]
            try:
                conv = int if kind == "int" else float
                vals = np.array([conv(v) for v in raw])
            except ValueError as exc:
                raise InputFormatError(path, str(exc), start + 1) from exc
            if len(vals) != npts:
                raise InputFormatError(path, f"field {name} truncated", start + 1)
            fields[name] = vals.reshape(dims, order="F")
            i = start + npts
            continue
        i += 1
    if dims is None:
        raise InputFormatError(path, "missing DIMENSIONS")
    return fields, spacing, origin


def cluster_map_fields(cmap):
    labels = cmap.to_grid(fill=-1)
    anomaly = np.zeros(cmap.grid_dims, dtype=int)
    anomaly[tuple(cmap.coords.T)] = cmap.anomaly_mask.astype(int)
    return {"label": labels, "anomaly": anomaly}


def feature_fields(fg):
    out = {}
    values = {"H": fg.entropy, "X": fg.mean_dir[:, 0], "Y": fg.mean_dir[:, 1], "Z": fg.mean_dir[:, 2]}
    for name in fg.columns:
        g = np.full(fg.grid_dims, np.nan)
        g[tuple(fg.coords.T)] = values[name]
        out[name] = g
    n = np.zeros(fg.grid_dims, dtype=int)
    n[tuple(fg.coords.T)] = fg.n
    out["N"] = n
    return out


def grid_geometry(spec, cube_edge):
    """Spacing and origin (voxel units) of window centres."""
    step = float(spec.stride * cube_edge)
    first = spec.w * cube_edge / 2.0
    return (step, step, step), (first, first, first)


def export_vtk(path, cmap=None, features=None, spec=None, cube_edge=4):
    """Write labels and/or features of one window grid to a VTK file."""
    fields = {}
    if cmap is not None:
        fields.update(cluster_map_fields(cmap))
    if features is not None:
        fields.update(feature_fields(features))
        spec = spec or features.spec
        cube_edge = features.cube_edge
    if not fields:
        raise ValueError("nothing to export")
    if spec is None:
        spacing, origin = (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)
    else:
        spacing, origin = grid_geometry(spec, cube_edge)
    write_vtk(path, fields, spacing, origin)
