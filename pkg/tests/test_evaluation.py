import itertools

import numpy as np
import pytest

from fibra.clusters import ClusterMap, select_anomaly
from fibra.errors import GridMismatch
from fibra.evaluation import evaluate, rand_index


def _cmap(labels, anomaly=1, shape=None):
    labels = np.asarray(labels)
    shape = shape or (len(labels), 1, 1)
    coords = np.array(list(np.ndindex(*shape)))[: len(labels)]
    return ClusterMap(coords, labels, shape, anomaly)


def test_rand_index_matches_pair_count(rng):
    for _ in range(10):
        a = rng.integers(0, 3, 40)
        b = rng.integers(0, 4, 40)
        agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in itertools.combinations(range(40), 2))
        assert rand_index(a, b) == pytest.approx(agree / (40 * 39 / 2), abs=1e-12)
    assert rand_index([0, 0, 1], [5, 5, 7]) == 1.0


def test_identity_is_perfect():
    t = _cmap([0] * 30 + [1] * 10)
    r = evaluate(t, t)
    assert r.misclassification == 0 and r.rand_index == 1 and not r.swapped
    assert r.precision["anomaly"] == 1 and r.recall["normal"] == 1
    assert r.confusion == {"tp": 10, "fp": 0, "fn": 0, "tn": 30}


def test_swapped_prediction_is_matched():
    truth = _cmap([0] * 30 + [1] * 10)
    pred = _cmap([1] * 30 + [0] * 10)
    r = evaluate(pred, truth)
    assert r.swapped and r.misclassification == 0


def test_counts_errors():
    truth = _cmap([0] * 30 + [1] * 10)
    pred = _cmap([0] * 28 + [1] * 2 + [1] * 7 + [0] * 3)
    r = evaluate(pred, truth)
    assert r.misclassification == pytest.approx(5 / 40)
    assert r.confusion == {"tp": 7, "fp": 2, "fn": 3, "tn": 28}
    assert r.precision["anomaly"] == pytest.approx(7 / 9)
    assert r.recall["anomaly"] == pytest.approx(0.7)


def test_artefact_clusters_count_as_normal():
    truth = _cmap([0] * 30 + [1] * 10)
    pred = select_anomaly(_cmap([0] * 25 + [2] * 5 + [1] * 10))
    r = evaluate(pred, truth)
    assert r.n_clusters == 3 and r.misclassification == 0 and r.rand_index < 1


def test_empty_anomaly_and_undefined_ratios():
    truth = _cmap([0] * 20, anomaly=None)
    r = evaluate(truth, truth)
    assert r.misclassification == 0 and r.precision["anomaly"] is None


def test_grid_mismatch():
    with pytest.raises(GridMismatch):
        evaluate(_cmap([0, 1, 0]), _cmap([0, 1, 0, 0]))
    truth = _cmap([0, 1, 0, 0], shape=(2, 2, 1))
    pred = ClusterMap(np.array([[0, 0, 0], [5, 5, 0]]), np.array([0, 1]), (2, 2, 1), 1)
    with pytest.raises(GridMismatch):
        evaluate(pred, truth)


def test_subset_of_windows_evaluated():
    truth = _cmap([0, 1, 0, 1, 0, 0], shape=(3, 2, 1))
    pred = ClusterMap(truth.coords[[1, 2, 3]], np.array([1, 0, 1]), (3, 2, 1), 1)
    r = evaluate(pred, truth)
    assert r.n_windows == 3 and r.misclassification == 0
