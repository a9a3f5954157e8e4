import math
import warnings

import numpy as np
import pytest

from fibra import geometry, rsa
from fibra.errors import JammedBeforeTarget, ValidationError
from fibra.features import WindowSpec

SMALL = dict(dims=(64, 64, 64), radius=2.0, length=16.0,
             region=rsa.AnomalyRegion.box((16, 16, 16), (48, 48, 48)))


def _point_segment(p, a, b):
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0, 1)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def oracle_segment_distance(a0, a1, b0, b1, iters=100):
    """Ternary search over the first segment; the distance from a point
    moving along a line to a convex set is convex in the line parameter."""
    lo = np.zeros(len(a0))
    hi = np.ones(len(a0))

    def f(s):
        return _point_segment(a0 + s[:, None] * (a1 - a0), b0, b1)

    for _ in range(iters):
        m1 = lo + (hi - lo) / 3
        m2 = hi - (hi - lo) / 3
        left = f(m1) < f(m2)
        hi = np.where(left, m2, hi)
        lo = np.where(left, lo, m1)
    return f((lo + hi) / 2)


def brute_force_violations(fs):
    p0, p1 = fs.endpoints()
    i, j = np.triu_indices(len(fs), k=1)
    d = oracle_segment_distance(p0[i], p1[i], p0[j], p1[j])
    return int(np.sum(d <= fs.radii[i] + fs.radii[j]))


def test_segment_distance_matches_oracle(rng):
    a0, a1 = rng.normal(size=(2, 2000, 3)) * 3
    b0, b1 = rng.normal(size=(2, 2000, 3)) * 3
    fast = np.array([rsa.segment_distance(a0[k], a1[k], b0[k:k + 1], b1[k:k + 1])[0]
                     for k in range(2000)])
    np.testing.assert_allclose(fast, oracle_segment_distance(a0, a1, b0, b1), atol=1e-7)


def test_segment_distance_parallel_segments():
    d = rsa.segment_distance(np.zeros(3), np.array([0, 0, 4.0]),
                             np.array([[1.0, 0, 2]]), np.array([[1.0, 0, 9]]))
    assert d[0] == pytest.approx(1.0)


def test_zero_fraction_is_empty():
    fs = rsa.generate_rsa(rsa.RsaParams(volume_fraction=0.0, **SMALL))
    assert len(fs) == 0
    vol = rsa.voxelize(fs)
    assert vol.shape == (64, 64, 64) and not vol.any()


def test_deterministic():
    p = rsa.RsaParams(volume_fraction=0.1, seed=5, **SMALL)
    a, b = rsa.generate_rsa(p), rsa.generate_rsa(p)
    np.testing.assert_array_equal(a.centers, b.centers)
    np.testing.assert_array_equal(a.axes, b.axes)
    np.testing.assert_array_equal(a.is_anomaly, b.is_anomaly)
    np.testing.assert_array_equal(rsa.voxelize(a, 0.7, 10, seed=1), rsa.voxelize(b, 0.7, 10, seed=1))


@pytest.mark.parametrize("seed", [0, 1])
def test_no_intersections(seed):
    fs = rsa.generate_rsa(rsa.RsaParams(volume_fraction=0.2, seed=seed, **SMALL))
    assert len(fs) > 200
    assert brute_force_violations(fs) == 0
    assert rsa.count_intersections(fs) == 0


def test_oracle_detects_planted_intersection():
    fs = rsa.generate_rsa(rsa.RsaParams(volume_fraction=0.05, seed=3, **SMALL))
    fs.centers = np.vstack([fs.centers, fs.centers[:1] + 0.5])
    fs.axes = np.vstack([fs.axes, fs.axes[:1]])
    fs.radii = np.append(fs.radii, fs.radii[0])
    fs.half_lengths = np.append(fs.half_lengths, fs.half_lengths[0])
    fs.is_anomaly = np.append(fs.is_anomaly, False)
    assert brute_force_violations(fs) >= 1
    assert rsa.count_intersections(fs) >= 1


def test_system_invariants():
    fs = rsa.generate_rsa(rsa.RsaParams(volume_fraction=0.15, seed=2, **SMALL))
    assert np.all((fs.centers >= 0) & (fs.centers < np.array(fs.dims)))
    assert geometry.is_canonical(fs.axes).all()
    np.testing.assert_allclose(np.linalg.norm(fs.axes, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(fs.is_anomaly, fs.region.contains(fs.centers))
    # layered: placement order follows z-slabs of one fibre length
    slab = np.floor(fs.centers[:, 2] / 16.0)
    assert np.all(np.diff(slab) >= 0)


def test_region_dependent_axes():
    fs = rsa.generate_rsa(rsa.RsaParams(volume_fraction=0.15, seed=4, **SMALL))
    cos_z = np.abs(fs.axes[:, 2])
    assert cos_z[fs.is_anomaly].mean() > 0.85
    assert cos_z[~fs.is_anomaly].mean() < 0.35


def test_dispersion_monotone_in_kappa():
    means = []
    for kappa in (1.0, 10.0, 100.0):
        p = rsa.RsaParams(volume_fraction=0.1, seed=9,
                          anomaly=rsa.DirectionParams((0.0, 0.0, 1.0), kappa), **SMALL)
        fs = rsa.generate_rsa(p)
        a = fs.axes[fs.is_anomaly]
        means.append(geometry.geodesic_distance(a, [0, 0, 1], "axial").mean())
    assert means[0] > means[1] > means[2]


def test_voxel_fraction_close_to_target():
    p = rsa.RsaParams(dims=(96, 96, 96), volume_fraction=0.15, seed=1)
    fs = rsa.generate_rsa(p)
    assert not fs.jammed
    achieved = (rsa.voxelize(fs) > 0).mean()
    assert abs(achieved - 0.15) / 0.15 <= 0.10


def test_jammed_flag_and_strict():
    p = rsa.RsaParams(volume_fraction=0.2, max_attempts=50, **SMALL)
    with pytest.warns(RuntimeWarning, match="jammed"):
        fs = rsa.generate_rsa(p)
    assert fs.jammed and len(fs) > 0
    with pytest.raises(JammedBeforeTarget) as info:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rsa.generate_rsa(p, strict=True)
    assert info.value.system.jammed


@pytest.mark.parametrize("bad", [dict(volume_fraction=0.3), dict(volume_fraction=-0.1),
                                 dict(radius=0.0), dict(length=-1.0),
                                 dict(normal=rsa.DirectionParams((1, 0, 0), -1.0))])
def test_param_validation(bad):
    with pytest.raises(ValidationError):
        rsa.generate_rsa(rsa.RsaParams(**{**SMALL, **bad}))


def _single(center, axis, radius, half_length, dims):
    return rsa.FibreSystem(
        np.array([center], dtype=float), np.array([axis], dtype=float), np.array([radius]),
        np.array([half_length]), np.array([False]), dims, rsa.AnomalyRegion.empty(),
        rsa.DirectionParams(), rsa.DirectionParams())


@pytest.mark.parametrize("axis", [(0, 0, 1), (1, 0, 0), (0, 1, 0)])
def test_single_cylinder_volume(axis):
    r, h = 5.0, 20.0
    fs = _single((32.0, 32.0, 32.0), axis, r, h, (64, 64, 64))
    vol = rsa.voxelize(fs)
    exact = math.pi * r * r * 2 * h
    assert abs(int((vol > 0).sum()) - exact) / exact <= 0.05


def test_oblique_cylinder_volume():
    r, h = 4.0, 18.0
    fs = _single((32.0, 32.0, 32.0), geometry.normalize([1, 2, 2]), r, h, (64, 64, 64))
    exact = math.pi * r * r * 2 * h
    assert abs(int((rsa.voxelize(fs) > 0).sum()) - exact) / exact <= 0.05


def test_voxelize_binary_without_blur():
    fs = rsa.generate_rsa(rsa.RsaParams(volume_fraction=0.1, seed=1, **SMALL))
    vol = rsa.voxelize(fs, 0.0, 0.0)
    assert vol.dtype == np.uint8
    assert set(np.unique(vol)) <= {0, 255}
    noisy = rsa.voxelize(fs, 1.0, 10.0, seed=2)
    assert noisy.dtype == np.uint8 and len(np.unique(noisy)) > 2


def test_voxelize_matches_pointwise_rule(rng):
    fs = rsa.generate_rsa(rsa.RsaParams(volume_fraction=0.1, seed=6, **SMALL))
    vol = rsa.voxelize(fs)
    idx = rng.integers(0, 64, size=(3000, 3))
    p = idx + 0.5
    inside = np.zeros(len(p), dtype=bool)
    for c, a, r, h in zip(fs.centers, fs.axes, fs.radii, fs.half_lengths):
        t = (p - c) @ a
        rad2 = np.sum((p - c) ** 2, axis=1) - t * t
        inside |= (np.abs(t) <= h) & (rad2 <= r * r)
    np.testing.assert_array_equal(vol[tuple(idx.T)] == 255, inside)


def test_ground_truth_empty_and_full():
    spec = WindowSpec(4, 4, 2)
    empty = _single((1, 1, 1), (0, 0, 1), 1, 1, (64, 64, 64))
    labels = rsa.ground_truth_labels(empty, spec, 4)
    assert labels.grid_dims == (4, 4, 4) and not labels.anomaly_mask.any()
    empty.region = rsa.AnomalyRegion.box((0, 0, 0), (64, 64, 64))
    assert rsa.ground_truth_labels(empty, spec, 4).anomaly_mask.all()


def test_ground_truth_central_box_enumeration():
    fs = _single((1, 1, 1), (0, 0, 1), 1, 1, (200, 200, 300))
    fs.region = rsa.AnomalyRegion.box((60, 50, 100), (140, 150, 210))
    spec = WindowSpec(8, 4, 16)
    labels = rsa.ground_truth_labels(fs, spec, 4)
    count = 0
    n_windows = 0
    for i in range((50 - 8) // 4 + 1):
        for j in range((50 - 8) // 4 + 1):
            for k in range((75 - 8) // 4 + 1):
                n_windows += 1
                cx, cy, cz = (i * 16 + 16, j * 16 + 16, k * 16 + 16)
                count += 60 <= cx < 140 and 50 <= cy < 150 and 100 <= cz < 210
    assert len(labels) == n_windows
    assert int(labels.anomaly_mask.sum()) == count > 0


def test_ball_region():
    reg = rsa.AnomalyRegion.ball((10, 10, 10), 5)
    assert reg.contains([[10, 10, 14.9], [10, 10, 15.1]]).tolist() == [True, False]
    assert rsa.AnomalyRegion.from_dict(reg.to_dict()) == reg


def test_presets():
    assert rsa.preset("rotated").anomaly.mean_axis == (0.0, 0.0, 1.0)
    assert rsa.preset("dispersed").anomaly.kappa < rsa.preset("dispersed").normal.kappa
    assert rsa.preset("homogeneous").region.kind == "none"
    assert rsa.preset("rotated", seed=3).seed == 3
    assert rsa.RsaParams().dims == (200, 200, 300)
    with pytest.raises(ValidationError):
        rsa.preset("nope")


def test_params_dict_round_trip():
    p = rsa.preset("dispersed", seed=11)
    assert rsa.RsaParams.from_dict(p.to_dict()) == p


def test_system_csv_round_trip(tmp_path):
    fs = rsa.generate_rsa(rsa.RsaParams(volume_fraction=0.05, seed=1, **SMALL))
    rsa.write_system(fs, tmp_path / "f.csv", tmp_path / "s.json")
    header = (tmp_path / "f.csv").read_text().splitlines()[0]
    assert header == "cx,cy,cz,ax,ay,az,radius,half_length,is_anomaly"
    back = rsa.read_system(tmp_path / "f.csv", tmp_path / "s.json")
    np.testing.assert_array_equal(back.centers, fs.centers)
    np.testing.assert_array_equal(back.axes, fs.axes)
    np.testing.assert_array_equal(back.is_anomaly, fs.is_anomaly)
    assert back.region == fs.region and back.dims == fs.dims
