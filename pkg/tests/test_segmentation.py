import math
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from planartrace.oracle import oracle_knn
from planartrace.segmentation import (
    MAD_SCALE,
    build_linkage,
    create_slices,
    estimate_all,
    estimate_attributes,
    flatness_threshold,
    knn_index,
    robust_inliers,
)


def plane_grid(nx=25, ny=20, spacing=0.5, z=0.0, offset=(0.0, 0.0)):
    x, y = np.meshgrid(np.arange(nx) * spacing + offset[0], np.arange(ny) * spacing + offset[1])
    return np.c_[x.ravel(), y.ravel(), np.full(x.size, z)]


def test_knn_collinear():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    knn = knn_index(pts, 2)
    assert sorted(knn[1].tolist()) == [0, 2]
    assert knn[1].tolist() == [0, 2]  # equal distance: lower index first
    assert knn[0].tolist() == [1, 2]


def test_knn_duplicates_ordered_by_index():
    pts = np.array([[0.0, 0, 0], [5.0, 0, 0], [0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
    knn = knn_index(pts, 3)
    assert knn[0].tolist() == [2, 3, 4]
    assert knn[2].tolist() == [0, 3, 4]


def test_knn_matches_bruteforce(rng):
    pts = rng.random((1000, 3))
    np.testing.assert_array_equal(knn_index(pts, 30), oracle_knn(pts, 30))


def test_knn_on_lattice_ties(rng):
    # many exact ties on an integer lattice exercise the widening query
    pts = np.array(np.meshgrid(range(6), range(6), range(3))).reshape(3, -1).T.astype(float)
    pts = pts[rng.permutation(len(pts))]
    np.testing.assert_array_equal(knn_index(pts, 12), oracle_knn(pts, 12))


@pytest.mark.parametrize("k", [0, 5])
def test_knn_rejects_bad_k(k):
    with pytest.raises(ValueError):
        knn_index(np.zeros((5, 3)) + np.arange(5)[:, None], k)


def test_perfect_plane_attributes(rng):
    nb = np.c_[rng.uniform(-1, 1, (30, 2)), np.zeros(30)]
    n, lam, cs, noise = estimate_attributes(nb)
    assert abs(abs(n[2]) - 1) < 1e-12
    assert lam == 0.0
    assert cs.all() and not noise


def test_mad_example():
    d = np.array([0.1, 0.2, 0.3, 0.4, 10.0])
    # hand arithmetic: median 0.3, MAD 1.4826 * 0.1, R_z(10) = 9.7 / 0.14826
    rz10 = 9.7 / (MAD_SCALE * 0.1)
    assert abs(rz10 - 65.4256037) < 1e-6 and rz10 > 2.5
    assert robust_inliers(d).tolist() == [True, True, True, True, False]


def test_mad_zero_keeps_median_values():
    d = np.array([0.0, 0.0, 0.0, 0.0, 0.5])
    assert robust_inliers(d).tolist() == [True, True, True, True, False]


def test_noisy_plane_normal(rng):
    sigma = 0.01
    for _ in range(50):
        nb = np.c_[rng.uniform(-1, 1, (30, 2)), rng.normal(0, sigma, 30)]
        n, lam, _, _ = estimate_attributes(nb)
        assert math.degrees(math.acos(min(1.0, abs(n[2])))) < 2.0
        assert lam < 4 * sigma**2


def test_coincident_neighbours_are_noise():
    _, _, cs, noise = estimate_attributes(np.ones((30, 3)))
    assert noise and not cs.any()


def test_flatness_threshold_example():
    vals = [0.01, 0.01, 0.01, 0.01, 0.5]
    mean = statistics.fmean(vals)
    sd = statistics.stdev(vals)
    assert abs(mean - 0.108) < 1e-12
    assert abs(sd - 0.219135) < 1e-6
    th = flatness_threshold(vals)
    assert abs(th - (mean + sd)) < 1e-12
    assert abs(th - 0.327135) < 1e-6
    assert 0.5 > th


def _linkage(pts, k=30):
    knn = knn_index(pts, k)
    attrs = estimate_all(pts, knn)
    return attrs, build_linkage(attrs)


def test_no_cross_patch_links():
    a = plane_grid(12, 12)
    b = plane_grid(12, 12, z=10.0)
    pts = np.vstack([a, b])
    attrs, tab = _linkage(pts, 20)
    side = np.arange(len(pts)) >= len(a)
    linked = tab.cnp >= 0
    assert np.all(side[linked] == side[tab.cnp[linked]])


def test_single_plane_single_center():
    pts = plane_grid(14, 14)
    _, tab = _linkage(pts)
    assert len(tab.centers) == 1
    assert tab.centers[0] == 0


def test_linkage_terminates_and_decreases(rng):
    pts = np.c_[rng.uniform(0, 10, (400, 2)), rng.normal(0, 0.02, 400)]
    attrs, tab = _linkage(pts)
    i = np.flatnonzero(tab.cnp >= 0)
    j = tab.cnp[i]
    lam = attrs.flatness
    assert np.all((lam[j] < lam[i]) | ((lam[j] == lam[i]) & (j < i)))
    # every link target is in the consistent set of its source
    for a, b in zip(i[:50], j[:50]):
        assert b in attrs.consistent_set(a)
    clustered = tab.cluster >= 0
    assert np.all(tab.is_center[tab.cluster[clustered]])


def test_create_slices_single_plane():
    pts = plane_grid(25, 20)
    _, tab = _linkage(pts)
    slices = create_slices(tab, pts, 200)
    assert len(slices) == 1 and len(slices[0]) == 500


def test_create_slices_drops_small_cluster():
    pts = np.vstack([plane_grid(25, 20), plane_grid(15, 10, z=0.0, offset=(100.0, 0.0))])
    _, tab = _linkage(pts)
    slices = create_slices(tab, pts, 200)
    assert [len(s) for s in slices] == [500]


def test_create_slices_empty_warns(caplog):
    pts = plane_grid(10, 10)
    _, tab = _linkage(pts, 10)
    assert create_slices(tab, pts, 1000) == []
    assert "zero slices" in caplog.text or "no cluster" in caplog.text


@given(st.integers(0, 2**31 - 1))
def test_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    nb = np.c_[rng.uniform(-1, 1, (30, 2)), rng.normal(0, 0.05, 30)]
    rot = Rotation.random(random_state=seed).as_matrix()
    n0, l0, cs0, _ = estimate_attributes(nb)
    n1, l1, cs1, _ = estimate_attributes(nb @ rot.T + rng.normal(size=3))
    dev = math.acos(min(1.0, abs(float((rot @ n0) @ n1))))
    assert dev < 1e-6
    assert abs(l0 - l1) < 1e-9


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.5, 2.0, 8.0, 0.125]))
def test_scale_consistent_cs(seed, s):
    rng = np.random.default_rng(seed)
    nb = np.c_[rng.uniform(-1, 1, (30, 2)), rng.normal(0, 0.05, 30)]
    nb[rng.integers(0, 30, 3), 2] += 1.0
    _, _, cs0, _ = estimate_attributes(nb)
    _, _, cs1, _ = estimate_attributes(nb * s)
    np.testing.assert_array_equal(cs0, cs1)
