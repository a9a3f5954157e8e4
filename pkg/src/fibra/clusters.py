"""Window label maps and the anomaly/normal interpretation of clusters.

Exported labels follow one colour convention: ``0`` normal material,
``1`` anomaly, ``2, 3, ...`` artefact clusters in decreasing size.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputFormatError, ValidationError

NORMAL = 0
ANOMALY = 1

LABEL_CSV_HEADER = ["wx", "wy", "wz", "label", "is_anomaly"]


@dataclass
class ClusterMap:
    coords: np.ndarray
    labels: np.ndarray
    grid_dims: tuple
    anomaly_label: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=int).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        self.grid_dims = tuple(int(v) for v in self.grid_dims)
        if len(self.coords) != len(self.labels):
            raise ValidationError("coords and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def anomaly_mask(self) -> np.ndarray:
        if self.anomaly_label is None:
            return np.zeros(len(self), dtype=bool)
        return self.labels == self.anomaly_label

    @property
    def n_clusters(self) -> int:
        return len(np.unique(self.labels))

    def sizes(self) -> dict:
        u, c = np.unique(self.labels, return_counts=True)
        return {int(a): int(b) for a, b in zip(u, c)}

    def to_grid(self, fill=-1) -> np.ndarray:
        grid = np.full(self.grid_dims, fill, dtype=int)
        grid[tuple(self.coords.T)] = self.labels
        return grid


def _nearest_center_label(cmap, candidates):
    centre = (np.asarray(cmap.grid_dims, dtype=float) - 1.0) / 2.0
    inside = np.isin(cmap.labels, candidates)
    d = np.sum((cmap.coords - centre) ** 2, axis=1).astype(float)
    d[~inside] = np.inf
    return int(cmap.labels[int(np.argmin(d))])


def select_anomaly(cmap: ClusterMap, entropy=None) -> ClusterMap:
    """Relabel a raw clustering into normal / anomaly / artefacts.

    Of the two most populous clusters the smaller one is the anomaly. Ties
    go to the higher mean entropy when ``entropy`` is given, otherwise to
    the cluster of the window nearest the grid centre. Remaining clusters
    become artefacts.
    """
    u, counts = np.unique(cmap.labels, return_counts=True)
    if len(u) == 0:
        return ClusterMap(cmap.coords, cmap.labels, cmap.grid_dims, None)
    # size descending, label ascending for equal sizes
    order = np.lexsort((u, -counts))
    u, counts = u[order], counts[order]
    if len(u) == 1:
        return ClusterMap(cmap.coords, np.zeros(len(cmap), dtype=int), cmap.grid_dims, None)
    a, b = int(u[0]), int(u[1])
    if counts[0] != counts[1]:
        anomaly = b
    elif entropy is not None and np.all(np.isfinite(entropy)):
        e = np.asarray(entropy, dtype=float)
        ea, eb = e[cmap.labels == a].mean(), e[cmap.labels == b].mean()
        anomaly = a if ea > eb else b
    else:
        anomaly = _nearest_center_label(cmap, [a, b])
    normal = b if anomaly == a else a
    mapping = {normal: NORMAL, anomaly: ANOMALY}
    for k, lab in enumerate(u[2:], start=2):
        mapping[int(lab)] = k
    labels = np.array([mapping[int(v)] for v in cmap.labels], dtype=int)
    return ClusterMap(cmap.coords, labels, cmap.grid_dims, ANOMALY)


def write_cluster_map(cmap: ClusterMap, csv_path, json_path=None, extra=None):
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    mask = cmap.anomaly_mask
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_CSV_HEADER)
        for c, lab, an in zip(cmap.coords, cmap.labels, mask):
            w.writerow([int(c[0]), int(c[1]), int(c[2]), int(lab), int(an)])
    meta = {"grid_dims": list(cmap.grid_dims), "n_clusters": cmap.n_clusters,
            "sizes": {str(k): v for k, v in cmap.sizes().items()}}
    if extra:
        meta.update(extra)
    json_path.write_text(json.dumps(meta, indent=2) + "\n")


def read_cluster_map(csv_path, json_path=None) -> ClusterMap:
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    coords, labels, flags = [], [], []
    try:
        fh = open(csv_path, newline="")
    except OSError as exc:
        raise InputFormatError(csv_path, str(exc)) from exc
    with fh:
        reader = csv.reader(fh)
        if next(reader, None) != LABEL_CSV_HEADER:
            raise InputFormatError(csv_path, f"expected header {','.join(LABEL_CSV_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(LABEL_CSV_HEADER):
                    raise ValueError(f"expected {len(LABEL_CSV_HEADER)} fields")
                vals = [int(v) for v in row]
            except ValueError as exc:
                raise InputFormatError(csv_path, str(exc), lineno) from exc
            if vals[4] != int(vals[3] == ANOMALY):
                raise InputFormatError(csv_path, "is_anomaly disagrees with label", lineno)
            coords.append(vals[:3])
            labels.append(vals[3])
            flags.append(vals[4])
    grid_dims = None
    if json_path.exists():
        try:
            grid_dims = json.loads(json_path.read_text())["grid_dims"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputFormatError(json_path, f"bad label sidecar: {exc}") from exc
    coords = np.asarray(coords, dtype=int).reshape(-1, 3)
    if grid_dims is None:
        grid_dims = tuple(coords.max(axis=0) + 1) if len(coords) else (0, 0, 0)
    return ClusterMap(coords, labels, grid_dims, ANOMALY if any(flags) else None)
