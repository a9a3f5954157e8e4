"""Adaptive Weights Clustering (AWC).

Binary weights ``w_ij`` between feature vectors are grown over a geometric
sequence of radii. At each step a pair within the new radius keeps (or
gains) its weight unless the overlap of the two points' current
neighbourhoods is significantly smaller than what two overlapping balls
of a uniform density would give. Clusters are the connected components of
the final weight graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.special import betainc

from .clusters import ClusterMap, select_anomaly
from .errors import TooFewPoints, ValidationError

DENSE_LIMIT = 5000
Q_EPS = 1e-12

# lambda values per attribute mode, as reported for raw features
LAMBDA_PRESETS = {
    "rsa": {"entropy": 9.2, "mean_dir": 10.0, "both": 0.2},
    "real": {"entropy": 19.27, "mean_dir": 4.27, "both": 1.21},
}


@dataclass(frozen=True)
class AwcParams:
    lam: float = 10.0
    n0: int | None = None
    growth: float = 1.25
    max_steps: int = 100

    def validate(self):
        if not self.lam > 0:
            raise ValidationError("lambda must be > 0")
        if not self.growth > 1:
            raise ValidationError("radius growth factor must be > 1")
        if self.n0 is not None and self.n0 < 1:
            raise ValidationError("n0 must be >= 1")
        return self

    def neighbours(self, d):
        return 2 * d + 2 if self.n0 is None else int(self.n0)


def ball_overlap_q(t, d: int):
    """Intersection-over-union of two radius-1 d-balls at centre distance t.

    V_and / V = I_{1 - t^2/4}((d + 1)/2, 1/2) (two spherical caps), and
    q = V_and / (2 V - V_and).
    """
    t = np.clip(np.asarray(t, dtype=float), 0.0, 2.0)
    ratio = betainc((d + 1) / 2.0, 0.5, 1.0 - t * t / 4.0)
    return ratio / (2.0 - ratio)


def kl_bernoulli(theta, q):
    """KL divergence between Bernoulli(theta) and Bernoulli(q)."""
    theta = np.asarray(theta, dtype=float)
    q = np.clip(np.asarray(q, dtype=float), Q_EPS, 1.0 - Q_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(theta > 0, theta * np.log(theta / q), 0.0)
        b = np.where(theta < 1, (1.0 - theta) * np.log((1.0 - theta) / (1.0 - q)), 0.0)
    return a + b


def test_statistic(n_and, n_or, q):
    """Signed KL statistic; negative when the overlap exceeds q."""
    total = n_and + n_or
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(total > 0, n_and / np.where(total > 0, total, 1), 0.0)
    return total * kl_bernoulli(theta, q) * np.sign(q - theta)


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, a):
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


def components(w) -> np.ndarray:
    """Connected-component labels of a symmetric weight matrix.

    Labels are ordered by component size, largest first (ties by the
    smallest member index).
    """
    if sparse.issparse(w):
        coo = sparse.triu(w, k=1).tocoo()
        n = w.shape[0]
        rows, cols = coo.row[coo.data != 0], coo.col[coo.data != 0]
    else:
        w = np.asarray(w)
        n = w.shape[0]
        rows, cols = np.nonzero(np.triu(w, k=1))
    uf = UnionFind(n)
    for a, b in zip(rows.tolist(), cols.tolist()):
        uf.union(a, b)
    roots = np.array([uf.find(i) for i in range(n)], dtype=int)
    uniq, first, counts = np.unique(roots, return_index=True, return_counts=True)
    order = np.lexsort((first, -counts))
    relabel = np.empty(len(uniq), dtype=int)
    relabel[order] = np.arange(len(uniq))
    return relabel[np.searchsorted(uniq, roots)]


@dataclass
class AwcResult:
    cluster_map: ClusterMap | None
    labels: np.ndarray
    weights: object
    radii: list
    h0: float
    n_degenerate: int = 0
    history: list = field(default_factory=list, repr=False)

    @property
    def n_clusters(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def edges(self):
        w = sparse.triu(sparse.csr_matrix(self.weights), k=1).tocoo()
        keep = w.data != 0
        return np.stack([w.row[keep], w.col[keep]], axis=1)


def _initial_radius(x, n0):
    tree = cKDTree(x)
    dist, _ = tree.query(x, k=n0 + 1)
    return float(np.median(dist[:, n0])), tree


def _step_dense(dist, w, h_prev, h, lam, d):
    wf = w.astype(np.float64)
    b = (dist <= h_prev).astype(np.float64)
    s = wf @ wf
    n_and = s - 2.0 * wf
    np.fill_diagonal(n_and, 0.0)
    # sum over l != i, j of w_il * [l outside the ball around j]
    p = wf.sum(axis=1)[:, None] - wf @ b.T
    n_excl = p - (1.0 - b)
    n_or = n_excl + n_excl.T
    q = ball_overlap_q(dist / h_prev, d)
    t = test_statistic(n_and, n_or, q)
    in_radius = dist <= h
    new = in_radius & (t <= lam)
    degenerate = in_radius & (n_and + n_or == 0)
    new[degenerate] = w[degenerate]
    np.fill_diagonal(new, True)
    return new, int(np.count_nonzero(np.triu(degenerate, 1)))


def _step_sparse(tree, x, w, h_prev, h, lam, d):
    n = len(x)
    pairs = tree.query_pairs(h, output_type="ndarray")
    i, j = pairs[:, 0], pairs[:, 1]
    dist = np.linalg.norm(x[i] - x[j], axis=1)
    bp = tree.sparse_distance_matrix(tree, h_prev, output_type="coo_matrix").tocsr()
    bp.data[:] = 1.0
    bp.setdiag(1.0)
    wf = w.astype(np.float64).tocsr()
    s = (wf @ wf).tocsr()
    wb = (wf @ bp.T).tocsr()
    rows = np.asarray(wf.sum(axis=1)).ravel()
    wij = np.asarray(wf[i, j]).ravel()
    bij = (dist <= h_prev).astype(float)
    n_and = np.asarray(s[i, j]).ravel() - 2.0 * wij
    n_ij = rows[i] - np.asarray(wb[i, j]).ravel() - (1.0 - bij)
    n_ji = rows[j] - np.asarray(wb[j, i]).ravel() - (1.0 - bij)
    n_or = n_ij + n_ji
    q = ball_overlap_q(dist / h_prev, d)
    t = test_statistic(n_and, n_or, q)
    keep = t <= lam
    degenerate = (n_and + n_or) == 0
    keep[degenerate] = wij[degenerate] > 0
    upper = sparse.coo_matrix((np.ones(int(keep.sum())), (i[keep], j[keep])), shape=(n, n))
    new = (upper + upper.T + sparse.identity(n)).tocsr()
    new.data[:] = 1.0
    return new.astype(bool), int(degenerate.sum())


def awc_cluster(x, params: AwcParams = AwcParams(), dense: bool | None = None) -> AwcResult:
    """Run AWC on an ``(n, d)`` matrix; returns labels sorted by cluster size."""
    params.validate()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    n0 = params.neighbours(d)
    if n < n0 + 1:
        raise TooFewPoints(f"AWC needs more than n0 = {n0} points, got {n}")
    h0, tree = _initial_radius(x, n0)
    if dense is None:
        dense = n <= DENSE_LIMIT
    if dense:
        dist = np.sqrt(np.maximum(0.0, np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)))
        diameter = float(dist.max())
    else:
        hull = x[np.unique(np.r_[x.argmin(axis=0), x.argmax(axis=0)])]
        diameter = float(max(np.linalg.norm(x - p, axis=1).max() for p in hull))
    if h0 <= 0:
        h0 = max(diameter * 1e-9, 1e-12)
    if dense:
        w = dist <= h0
    else:
        w = tree.sparse_distance_matrix(tree, h0, output_type="coo_matrix").tocsr()
        w.data[:] = 1.0
        w.setdiag(1.0)
        w = w.astype(bool)
    radii = [h0]
    history = [w]
    n_degen = 0
    h_prev = h0
    for _ in range(params.max_steps):
        if h_prev > diameter / 2.0:
            break
        h = params.growth * h_prev
        if dense:
            w, deg = _step_dense(dist, w, h_prev, h, params.lam, d)
        else:
            w, deg = _step_sparse(tree, x, w, h_prev, h, params.lam, d)
        n_degen += deg
        radii.append(h)
        history.append(w)
        h_prev = h
    labels = components(w)
    return AwcResult(None, labels, w, radii, h0, n_degen, history)


def awc_fit(features, params: AwcParams = AwcParams(), dense: bool | None = None) -> AwcResult:
    """AWC over a FeatureGrid; the two largest clusters give normal and
    anomaly, the rest are artefacts."""
    res = awc_cluster(features.matrix(), params, dense)
    raw = ClusterMap(features.coords, res.labels, features.grid_dims)
    entropy = features.entropy if "H" in features.columns else None
    res.cluster_map = select_anomaly(raw, entropy)
    return res
