"""Spatial stochastic EM (SEM) for Gaussian mixtures on a window grid.

Starting from ``k_init`` randomly labelled classes, each iteration fits
Gaussians to the current labels, computes posteriors, tilts them towards
the labels of the six grid neighbours (Potts-style factor
``exp(beta * neighbour_fraction)``), samples new labels and drops classes
that fell below ``n_min`` members. The best of several restarts is kept and
its surviving components are merged down to two by Bhattacharyya distance.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from ._parallel import map_ordered
from .clusters import ClusterMap, select_anomaly
from .errors import TooFewWindows, ValidationError

FLOOR_FACTOR = 1e-6
MIN_FLOOR = 1e-12

_OFFSETS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


@dataclass(frozen=True)
class SemParams:
    k_init: int = 10
    max_iter: int = 200
    beta: float = 1.0
    n_min: int | None = None
    eps_lab: float = 0.005
    restarts: int = 5
    seed: int = 0
    spatial: bool = True

    def validate(self):
        if self.k_init < 2:
            raise ValidationError("k_init must be >= 2")
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if self.restarts < 1 or self.max_iter < 1:
            raise ValidationError("restarts and max_iter must be >= 1")
        return self

    def prune_threshold(self, n, d):
        if self.n_min is not None:
            return int(self.n_min)
        return max(d + 2, math.ceil(0.005 * n))


@dataclass
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray

    def to_dict(self):
        return {"weight": float(self.weight), "mean": [float(v) for v in self.mean],
                "cov": [[float(v) for v in row] for row in self.cov]}


@dataclass
class SemResult:
    cluster_map: ClusterMap
    components: list
    trace: list
    restart_loglik: list
    best_restart: int
    n_iter: int
    n_surviving: int
    raw_labels: np.ndarray = field(repr=False, default=None)

    def mixture_dict(self):
        return {
            "weights": [c.weight for c in self.components],
            "means": [[float(v) for v in c.mean] for c in self.components],
            "covariances": [[[float(v) for v in r] for r in c.cov] for c in self.components],
            "trace": [float(v) for v in self.trace],
            "restart_loglik": [float(v) for v in self.restart_loglik],
            "best_restart": self.best_restart,
            "n_iter": self.n_iter,
            "n_surviving": self.n_surviving,
        }


def grid_neighbors(coords) -> np.ndarray:
    """``(n, 6)`` indices of face-adjacent windows, ``-1`` where absent."""
    coords = np.asarray(coords, dtype=int).reshape(-1, 3)
    index = {tuple(c): i for i, c in enumerate(coords)}
    out = np.full((len(coords), 6), -1, dtype=int)
    for i, c in enumerate(coords):
        for k, off in enumerate(_OFFSETS):
            out[i, k] = index.get(tuple(c + off), -1)
    return out


def neighbor_fractions(neighbors, labels, n_labels) -> np.ndarray:
    """Fraction of each window's existing neighbours carrying each label."""
    n = len(labels)
    frac = np.zeros((n, n_labels))
    present = neighbors >= 0
    deg = present.sum(axis=1)
    rows = np.repeat(np.arange(n), 6)[present.ravel()]
    np.add.at(frac, (rows, labels[neighbors[present]]), 1.0)
    has = deg > 0
    frac[has] /= deg[has, None]
    return frac


def gaussian_logpdf(x, mean, cov) -> np.ndarray:
    d = x.shape[1]
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (x - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * math.log(2 * math.pi) + logdet + np.sum(z * z, axis=0))


def _fit(x, labels, k, floor):
    """Per-class weight, mean and floored covariance from hard labels."""
    n, d = x.shape
    w = np.empty(k)
    mu = np.empty((k, d))
    cov = np.empty((k, d, d))
    for j in range(k):
        xj = x[labels == j]
        w[j] = len(xj) / n
        mu[j] = xj.mean(axis=0)
        diff = xj - mu[j]
        cov[j] = diff.T @ diff / len(xj) + np.diag(floor)
    return w, mu, cov


def _log_joint(x, w, mu, cov):
    return np.stack([math.log(w[j]) + gaussian_logpdf(x, mu[j], cov[j])
                     for j in range(len(w))], axis=1)


def _compact(labels, keep):
    """Renumber labels so that the kept classes are 0..len(keep)-1."""
    remap = np.full(labels.max() + 1 if len(labels) else 1, -1, dtype=int)
    remap[keep] = np.arange(len(keep))
    return remap[labels]


def _sample(rng, logp):
    p = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(p))[:, None] * cdf[:, -1:]
    return np.minimum((u > cdf).sum(axis=1), p.shape[1] - 1)


def _run(x, neighbors, params, n_min, floor, rng):
    n = len(x)
    k = params.k_init
    labels = rng.integers(0, k, size=n)
    counts = np.bincount(labels, minlength=k)
    keep = np.nonzero(counts >= n_min)[0]
    if len(keep) == 0:
        keep = np.array([int(np.argmax(counts))])
    if len(keep) < k:
        dead = ~np.isin(labels, keep)
        labels[dead] = keep[rng.integers(0, len(keep), size=int(dead.sum()))]
        labels = _compact(labels, keep)
        k = len(keep)
    trace = []
    it = 0
    for it in range(1, params.max_iter + 1):
        w, mu, cov = _fit(x, labels, k, floor)
        logp = _log_joint(x, w, mu, cov)
        trace.append(float(logsumexp(logp, axis=1).sum()))
        if params.spatial:
            logp = logp + params.beta * neighbor_fractions(neighbors, labels, k)
        new = _sample(rng, logp)
        counts = np.bincount(new, minlength=k)
        keep = np.nonzero(counts >= n_min)[0]
        if len(keep) == 0:
            keep = np.array([int(np.argmax(counts))])
        if len(keep) < k:
            dead = ~np.isin(new, keep)
            sub = logp[np.ix_(dead, keep)]
            new[dead] = keep[np.argmax(sub, axis=1)]
            new = _compact(new, keep)
            changed = 1.0
            k = len(keep)
        else:
            changed = float(np.mean(new != labels))
        labels = new
        if changed < params.eps_lab:
            break
    w, mu, cov = _fit(x, labels, k, floor)
    loglik = float(logsumexp(_log_joint(x, w, mu, cov), axis=1).sum())
    return labels, (w, mu, cov), loglik, trace, it


def bhattacharyya(mu1, cov1, mu2, cov2) -> float:
    cov = 0.5 * (cov1 + cov2)
    diff = mu1 - mu2
    term1 = 0.125 * float(diff @ np.linalg.solve(cov, diff))
    _, ld = np.linalg.slogdet(cov)
    _, ld1 = np.linalg.slogdet(cov1)
    _, ld2 = np.linalg.slogdet(cov2)
    return term1 + 0.5 * (ld - 0.5 * (ld1 + ld2))


def merge_components(w, mu, cov, target=2):
    """Greedily merge closest pairs (moment matching) down to ``target``.

    Returns merged ``(w, mu, cov)`` and, for each input component, the
    index of the merged group it ended in.
    """
    groups = [[j] for j in range(len(w))]
    w = list(w)
    mu = [np.asarray(m, dtype=float) for m in mu]
    cov = [np.asarray(c, dtype=float) for c in cov]
    while len(w) > target:
        best, pair = np.inf, None
        for a in range(len(w)):
            for b in range(a + 1, len(w)):
                dist = bhattacharyya(mu[a], cov[a], mu[b], cov[b])
                if dist < best:
                    best, pair = dist, (a, b)
        a, b = pair
        ws = w[a] + w[b]
        m = (w[a] * mu[a] + w[b] * mu[b]) / ws
        c = (w[a] * (cov[a] + np.outer(mu[a] - m, mu[a] - m))
             + w[b] * (cov[b] + np.outer(mu[b] - m, mu[b] - m))) / ws
        w[a], mu[a], cov[a] = ws, m, c
        groups[a] = groups[a] + groups[b]
        del w[b], mu[b], cov[b], groups[b]
    owner = np.empty(sum(len(g) for g in groups), dtype=int)
    for g, members in enumerate(groups):
        owner[members] = g
    return np.array(w), np.array(mu), np.array(cov), owner


def sem_cluster(x, neighbors=None, params: SemParams = SemParams()):
    """Run spatial SEM on a plain ``(n, d)`` matrix.

    ``neighbors`` is an ``(n, 6)`` adjacency array (see
    :func:`grid_neighbors`); ``None`` means no spatial structure. Returns
    ``(group_labels, components, info)`` with at most two groups.
    """
    params.validate()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < params.k_init * (d + 2):
        raise TooFewWindows(f"{n} windows < k_init*(d+2) = {params.k_init * (d + 2)}")
    if neighbors is None:
        neighbors = np.full((n, 6), -1, dtype=int)
    n_min = params.prune_threshold(n, d)
    floor = FLOOR_FACTOR * np.maximum(x.var(axis=0), MIN_FLOOR)
    streams = np.random.SeedSequence(params.seed).spawn(params.restarts)
    runs = map_ordered(
        lambda ss: _run(x, neighbors, params, n_min, floor, np.random.default_rng(ss)), streams
    )
    logliks = [r[2] for r in runs]
    best = int(np.argmax(logliks))
    labels, (w, mu, cov), loglik, trace, n_iter = runs[best]
    assert all(loglik >= other for other in logliks)

    mw, mmu, mcov, owner = merge_components(w, mu, cov, 2)
    # final assignment: group posterior with the same neighbour tilt
    logp = _log_joint(x, w, mu, cov)
    group_logp = np.stack([logsumexp(logp[:, owner == g], axis=1)
                           for g in range(len(mw))], axis=1)
    if params.spatial:
        group_logp = group_logp + params.beta * neighbor_fractions(
            neighbors, owner[labels], len(mw))
    final = np.argmax(group_logp, axis=1)
    comps = [GaussianComponent(float(mw[g]), mmu[g], mcov[g]) for g in range(len(mw))]
    info = {"trace": trace, "restart_loglik": logliks, "best_restart": best,
            "n_iter": n_iter, "n_surviving": len(w), "sampled_labels": labels}
    return final, comps, info


def sem_fit(features, params: SemParams = SemParams()) -> SemResult:
    """Cluster a :class:`~fibra.features.FeatureGrid` into anomaly/normal."""
    x = features.matrix()
    neighbors = grid_neighbors(features.coords)
    final, comps, info = sem_cluster(x, neighbors, params)
    raw = ClusterMap(features.coords, final, features.grid_dims)
    entropy = features.entropy if "H" in features.columns else None
    cmap = select_anomaly(raw, entropy)
    # order components to match exported labels (0 normal, 1 anomaly)
    ordered = []
    for lab in sorted(set(cmap.labels.tolist())):
        g = int(final[np.nonzero(cmap.labels == lab)[0][0]])
        ordered.append(comps[g])
    return SemResult(cmap, ordered, info["trace"], info["restart_loglik"],
                     info["best_restart"], info["n_iter"], info["n_surviving"], final)


def write_mixture(result: SemResult, path, params: SemParams | None = None):
    d = result.mixture_dict()
    if params is not None:
        d["params"] = asdict(params)
    Path(path).write_text(json.dumps(d, indent=2) + "\n")
