import math

import numpy as np
import pytest
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from fibra import awc
from fibra.errors import TooFewPoints, ValidationError
from fibra.features import FeatureGrid, WindowSpec


def _blobs(rng, sep=20.0, n=100, d=3):
    a = rng.normal(size=(n, d))
    b = rng.normal(size=(n, d))
    b[:, 0] += sep
    return np.vstack([a, b]), np.r_[np.zeros(n, int), np.ones(n, int)]


def test_q_endpoints_and_1d_value():
    for d in (1, 2, 3, 4, 7):
        assert awc.ball_overlap_q(0.0, d) == pytest.approx(1.0, abs=1e-15)
        assert awc.ball_overlap_q(2.0, d) == pytest.approx(0.0, abs=1e-15)
    assert abs(awc.ball_overlap_q(1.0, 1) - 1 / 3) <= 1e-15
    # 1-D by hand: overlap 2 - t, union 2 + t
    t = np.linspace(0, 2, 41)
    np.testing.assert_allclose(awc.ball_overlap_q(t, 1), (2 - t) / (2 + t), atol=1e-14)


def test_q_matches_sphere_lens_volume():
    s = np.linspace(0, 2, 201)
    v = 4 / 3 * math.pi
    v_and = math.pi * (4 + s) * (2 - s) ** 2 / 12
    np.testing.assert_allclose(awc.ball_overlap_q(s, 3), v_and / (2 * v - v_and), atol=1e-9)


def test_q_matches_monte_carlo_in_4d(rng):
    p = rng.uniform(-1, 1, size=(400000, 4))
    p = p[np.sum(p * p, axis=1) <= 1]
    for t in (0.5, 1.0, 1.5):
        shifted = p - [t, 0, 0, 0]
        frac = np.mean(np.sum(shifted * shifted, axis=1) <= 1)  # V_and / V
        assert awc.ball_overlap_q(t, 4) == pytest.approx(frac / (2 - frac), abs=5e-3)


@pytest.mark.parametrize("d", [1, 3, 4])
def test_q_strictly_decreasing(d):
    q = awc.ball_overlap_q(np.linspace(0, 2, 2001)[1:-1], d)
    assert np.all(np.diff(q) < 0)


def test_kl_bernoulli():
    theta, q = np.meshgrid(np.linspace(0, 1, 51), np.linspace(0.01, 0.99, 50))
    kl = awc.kl_bernoulli(theta, q)
    assert np.all(kl >= -1e-15)
    zero = np.isclose(theta, q, atol=1e-12)
    assert np.all(np.abs(kl[zero]) <= 1e-12)
    assert np.all(kl[~zero] > 0)
    assert awc.kl_bernoulli(0.5, 0.25) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3))


def test_statistic_sign_convention():
    # overlap stronger than expected: negative, so it always passes the gate
    assert awc.test_statistic(np.array(9.0), np.array(1.0), 0.5) < 0
    assert awc.test_statistic(np.array(1.0), np.array(9.0), 0.5) > 0
    assert awc.test_statistic(np.array(0.0), np.array(0.0), 0.5) == 0


def test_components_examples():
    assert awc.components(np.eye(5)).tolist() == [0, 1, 2, 3, 4]
    assert awc.components(np.ones((5, 5))).tolist() == [0] * 5
    w = np.zeros((7, 7), bool)
    w[:3, :3] = True
    w[3:, 3:] = True
    labels = awc.components(w)
    assert np.bincount(labels).tolist() == [4, 3]
    assert labels.tolist() == [1, 1, 1, 0, 0, 0, 0]
    np.testing.assert_array_equal(awc.components(sparse.csr_matrix(w)), labels)


def test_components_match_scipy(rng):
    for _ in range(20):
        a = rng.random((60, 60)) < 0.03
        w = a | a.T | np.eye(60, dtype=bool)
        ours = awc.components(w)
        n, ref = connected_components(sparse.csr_matrix(w), directed=False)
        assert ours.max() + 1 == n
        # same partition: a bijection between label sets
        pairs = set(zip(ours.tolist(), ref.tolist()))
        assert len(pairs) == n
        sizes = np.bincount(ours)
        assert np.all(np.diff(sizes) <= 0)


def _oracle_step(x, w, h_prev, h, lam):
    """Literal per-pair evaluation of one weight update."""
    n, d = x.shape
    dist = np.linalg.norm(x[:, None] - x[None], axis=-1)
    new = np.eye(n, dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            if dist[i, j] > h:
                continue
            n_and = n_i = n_j = 0
            for l in range(n):
                if l in (i, j):
                    continue
                in_i, in_j = dist[i, l] <= h_prev, dist[j, l] <= h_prev
                if in_i and in_j:
                    n_and += w[i, l] * w[j, l]
                if in_i and not in_j:
                    n_i += w[i, l]
                if in_j and not in_i:
                    n_j += w[j, l]
            tot = n_and + n_i + n_j
            if tot == 0:
                keep = bool(w[i, j])
            else:
                theta = n_and / tot
                q = float(awc.ball_overlap_q(dist[i, j] / h_prev, d))
                t = tot * float(awc.kl_bernoulli(theta, q)) * np.sign(q - theta)
                keep = t <= lam
            new[i, j] = new[j, i] = keep
    return new


@pytest.mark.parametrize("lam", [0.5, 3.0, 10.0])
def test_single_step_matches_oracle(rng, lam):
    x, _ = _blobs(rng, sep=3.0, n=20, d=2)
    dist = np.linalg.norm(x[:, None] - x[None], axis=-1)
    h0, tree = awc._initial_radius(x, 6)
    w = dist <= h0
    # make the previous weights less trivial
    w = awc._step_dense(dist, w, h0, 1.25 * h0, 2.0, 2)[0]
    h_prev, h = 1.25 * h0, 1.25 ** 2 * h0
    expect = _oracle_step(x, w, h_prev, h, lam)
    dense, _ = awc._step_dense(dist, w, h_prev, h, lam, 2)
    np.testing.assert_array_equal(dense, expect)
    sp, _ = awc._step_sparse(tree, x, sparse.csr_matrix(w), h_prev, h, lam, 2)
    np.testing.assert_array_equal(sp.toarray(), expect)


def test_weights_symmetric_with_unit_diagonal(rng):
    x, _ = _blobs(rng, sep=6.0, n=80)
    res = awc.awc_cluster(x, awc.AwcParams(lam=5.0))
    assert len(res.history) == len(res.radii) > 2
    for w in res.history:
        w = np.asarray(w)
        assert w.dtype == bool
        assert np.array_equal(w, w.T) and w.diagonal().all()


def test_radius_schedule(rng):
    x, _ = _blobs(rng, sep=8.0, n=60)
    res = awc.awc_cluster(x, awc.AwcParams(growth=1.5))
    np.testing.assert_allclose(np.diff(np.log(res.radii)), math.log(1.5))
    diameter = np.linalg.norm(x[:, None] - x[None], axis=-1).max()
    assert res.radii[-2] <= diameter / 2 < res.radii[-1]
    kth = np.sort(np.linalg.norm(x[:, None] - x[None], axis=-1), axis=1)[:, 8]
    assert res.h0 == pytest.approx(np.median(kth))


def test_raising_lambda_keeps_first_step_weights(rng):
    x, _ = _blobs(rng, sep=4.0, n=60)
    dist = np.linalg.norm(x[:, None] - x[None], axis=-1)
    h0, _ = awc._initial_radius(x, 8)
    w0 = dist <= h0
    prev = None
    for lam in (0.1, 0.5, 1, 2, 5, 10, 50, 1e12):
        w1, _ = awc._step_dense(dist, w0, h0, 1.25 * h0, lam, 3)
        if prev is not None:
            assert not np.any(prev & ~w1)
        prev = w1


def test_two_far_blobs(rng):
    for lam in (4.0, 8.0, 12.0):
        x, truth = _blobs(rng)
        res = awc.awc_cluster(x, awc.AwcParams(lam=lam))
        assert res.n_clusters == 2
        errors = min(np.sum(res.labels != truth), np.sum(res.labels == truth))
        assert errors == 0


def test_infinite_lambda_single_blob(rng):
    x = rng.normal(size=(150, 3))
    assert awc.awc_cluster(x, awc.AwcParams(lam=1e12)).n_clusters == 1


def test_dense_and_sparse_agree(rng):
    x, _ = _blobs(rng, sep=5.0, n=120)
    a = awc.awc_cluster(x, awc.AwcParams(lam=6.0), dense=True)
    b = awc.awc_cluster(x, awc.AwcParams(lam=6.0), dense=False)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(np.asarray(a.weights), b.weights.toarray())
    assert a.n_degenerate == b.n_degenerate


def test_deterministic(rng):
    x, _ = _blobs(rng, sep=5.0, n=80)
    a = awc.awc_cluster(x, awc.AwcParams(lam=3.0))
    b = awc.awc_cluster(x, awc.AwcParams(lam=3.0))
    np.testing.assert_array_equal(a.labels, b.labels)


def test_point_order_does_not_change_partition(rng):
    x, _ = _blobs(rng, sep=6.0, n=80)
    perm = rng.permutation(len(x))
    a = awc.awc_cluster(x, awc.AwcParams(lam=5.0)).labels[perm]
    b = awc.awc_cluster(x[perm], awc.AwcParams(lam=5.0)).labels
    # equal partitions: label pairs form a bijection
    pairs = set(zip(a.tolist(), b.tolist()))
    assert len(pairs) == a.max() + 1 == b.max() + 1


def test_params_and_sizes():
    with pytest.raises(ValidationError):
        awc.awc_cluster(np.zeros((20, 1)), awc.AwcParams(lam=0))
    with pytest.raises(ValidationError):
        awc.awc_cluster(np.zeros((20, 1)), awc.AwcParams(growth=1.0))
    with pytest.raises(TooFewPoints):
        awc.awc_cluster(np.zeros((8, 3)))  # n0 = 8 needs 9 points
    assert awc.AwcParams().neighbours(4) == 10


def test_presets():
    assert awc.LAMBDA_PRESETS["rsa"] == {"entropy": 9.2, "mean_dir": 10.0, "both": 0.2}
    assert awc.LAMBDA_PRESETS["real"] == {"entropy": 19.27, "mean_dir": 4.27, "both": 1.21}


def test_awc_fit_labels_and_edges(rng):
    coords = np.array(list(np.ndindex(6, 6, 6)))
    box = np.all((coords >= 1) & (coords < 4), axis=1)
    m = np.where(box[:, None], [0.0, 0.1, 0.9], [0.8, 0.0, 0.2]) + rng.normal(0, 0.01, (216, 3))
    fg = FeatureGrid(coords, np.full(216, 64), np.full(216, np.nan), m, "mean_dir",
                     (6, 6, 6), WindowSpec(), 4)
    res = awc.awc_fit(fg, awc.AwcParams(lam=10.0))
    np.testing.assert_array_equal(res.cluster_map.anomaly_mask, box)
    e = res.edges()
    assert np.all(e[:, 0] < e[:, 1])
    assert not np.any(box[e[:, 0]] != box[e[:, 1]])
