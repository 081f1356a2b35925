"""Per-point plane attributes, P-Linkage connectivity and slice creation.

Pipeline for a cloud of N points::

    knn = knn_index(points, K)
    attrs = estimate_all(points, knn)
    table = build_linkage(attrs)
    slices = create_slices(table, points, min_slice_size)

All stages are vectorised over points and deterministic: neighbour ties are
broken by point index, linkage ties by normal deviation and then index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

MAD_SCALE = 1.4826
RZ_THRESHOLD = 2.5

# Relative floors that turn round-off on exactly planar input into exact zeros.
_FLATNESS_FLOOR = 1e-12  # times trace(cov)
_DISTANCE_FLOOR = 1e-9  # times sqrt(trace(cov))
_DEVIATION_TIE = 1e-12  # radians


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def knn_index(points, k: int) -> np.ndarray:
    """K nearest other points of every point, nearest first.

    Returns an (N, K) int array. Equal distances are ordered by point index, so
    duplicates of a point appear in index order.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if k < 1 or k >= n:
        raise ValueError(f"need 1 <= K < N, got K={k}, N={n}")
    tree = cKDTree(pts)
    out = np.empty((n, k), dtype=np.int64)
    todo = np.arange(n)
    m = min(n, k + 4)
    while len(todo):
        dk, ik = tree.query(pts[todo], m)
        dk = dk.reshape(len(todo), m)
        ik = ik.reshape(len(todo), m).astype(np.int64)
        d = _pairwise_dist(pts[todo][:, None, :], pts[ik])
        # push self to the end
        d = np.where(ik == todo[:, None], np.inf, d)
        order = np.lexsort((ik, d), axis=1)
        ik_sorted = np.take_along_axis(ik, order, axis=1)
        d_sorted = np.take_along_axis(d, order, axis=1)
        kth = d_sorted[:, k - 1]
        # an unreturned point may tie with the K-th one; widen the query for those rows
        ambiguous = (dk[:, -1] <= kth * (1 + 1e-12)) & (m < n)
        done = ~ambiguous
        out[todo[done]] = ik_sorted[done, :k]
        todo = todo[ambiguous]
        m = min(n, 2 * m)
    return out


@dataclass
class CloudAttributes:
    """Per-point normal, flatness and consistent set for a whole cloud.

    ``consistent`` is an (N, K) mask over ``knn``; row i marks CS(X_i).
    """

    knn: np.ndarray
    normals: np.ndarray
    flatness: np.ndarray
    consistent: np.ndarray
    noise: np.ndarray

    def __len__(self):
        return len(self.flatness)

    def consistent_set(self, i: int) -> np.ndarray:
        return self.knn[i][self.consistent[i]]


@dataclass
class PointAttributes:
    normal: np.ndarray
    flatness: float
    consistent_set: np.ndarray
    knn: np.ndarray
    cnp: int | None = None
    noise: bool = False


def _plane_stats(centered: np.ndarray, count: int):
    """Smallest-eigenpair of the scatter of (B, M, 3) centered samples."""
    cov = np.einsum("bki,bkj->bij", centered, centered) / count
    w, v = np.linalg.eigh(cov)
    trace = w.sum(axis=1)
    lam = w[:, 0]
    normal = v[:, :, 0]
    degenerate = (trace <= 0) | (w[:, 1] <= _FLATNESS_FLOOR * trace)
    lam = np.where(lam <= _FLATNESS_FLOOR * trace, 0.0, lam)
    return normal, lam, trace, degenerate


def robust_inliers(dist: np.ndarray) -> np.ndarray:
    """MAD consistency mask along the last axis: R_z < 2.5.

    When the MAD is zero, values equal to the median are kept and everything
    else is rejected.
    """
    med = np.median(dist, axis=-1, keepdims=True)
    dev = np.abs(dist - med)
    mad = MAD_SCALE * np.median(dev, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        rz = np.where(mad > 0, dev / np.where(mad > 0, mad, 1.0), np.where(dev == 0, 0.0, np.inf))
    return rz < RZ_THRESHOLD


def _orthogonal_distances(samples, centroid, normal, trace):
    d = np.einsum("bki,bi->bk", samples - centroid[:, None, :], normal)
    floor = _DISTANCE_FLOOR * np.sqrt(trace)[:, None]
    return np.where(np.abs(d) <= floor, 0.0, d)


def _estimate_batch(nbrs: np.ndarray):
    """Attributes for (B, K, 3) neighbour coordinates (nearest first)."""
    k = nbrs.shape[1]
    half = k // 2
    first = nbrs[:, :half]
    centroid = first.mean(axis=1)
    normal, lam, trace, degenerate = _plane_stats(first - centroid[:, None, :], half)
    dist = _orthogonal_distances(nbrs, centroid, normal, trace)
    cs = robust_inliers(dist)
    cs &= ~degenerate[:, None]
    return normal, lam, cs, degenerate


def estimate_attributes(neighbors) -> tuple[np.ndarray, float, np.ndarray, bool]:
    """Normal, flatness and consistent-set mask from one point's K neighbours.

    The covariance uses the first K/2 neighbours about their own centroid; the
    consistent set is taken over all K. Returns ``(normal, flatness, mask, noise)``.
    """
    nbrs = np.asarray(neighbors, dtype=float)[None]
    if nbrs.shape[1] < 4:
        raise ValueError("need at least 4 neighbours")
    normal, lam, cs, degenerate = _estimate_batch(nbrs)
    noise = bool(degenerate[0] or not cs[0].any())
    return normal[0], float(lam[0]), cs[0], noise


def estimate_all(points, knn: np.ndarray, chunk: int = 65536) -> CloudAttributes:
    pts = np.asarray(points, dtype=float)
    n, k = knn.shape
    if k < 4:
        raise ValueError("K must be at least 4")
    normals = np.empty((n, 3))
    lam = np.empty(n)
    cs = np.empty((n, k), dtype=bool)
    degenerate = np.empty(n, dtype=bool)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        normals[sl], lam[sl], cs[sl], degenerate[sl] = _estimate_batch(pts[knn[sl]])
    noise = degenerate | ~cs.any(axis=1)
    return CloudAttributes(knn, normals, lam, cs, noise)


def normal_deviation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Unsigned angle between normal lines, in [0, pi/2]."""
    cross = np.cross(a, b)
    s = np.sqrt(np.sum(cross * cross, axis=-1))
    c = np.abs(np.sum(a * b, axis=-1))
    return np.arctan2(s, c)


@dataclass
class LinkageTable:
    """Lookup table of the linkage step.

    ``cnp[i]`` is the closest neighbouring point of i (-1 if none), ``cluster[i]``
    the candidate center that i's CNP chain ends at (-1 if unclustered).
    """

    cnp: np.ndarray
    cluster: np.ndarray
    flatness: np.ndarray
    is_center: np.ndarray
    noise: np.ndarray
    threshold: float

    @property
    def centers(self) -> np.ndarray:
        return np.flatnonzero(self.is_center)


def flatness_threshold(flatness, alpha: float = 1.0) -> float:
    """Global mean flatness plus ``alpha`` sample standard deviations."""
    f = np.asarray(flatness, dtype=float)
    if len(f) == 0:
        return 0.0
    std = float(np.std(f, ddof=1)) if len(f) > 1 else 0.0
    return float(np.mean(f)) + alpha * std


def build_linkage(attrs: CloudAttributes, alpha: float = 1.0) -> LinkageTable:
    knn = attrs.knn
    n = len(attrs)
    lam = attrs.flatness
    noise = attrs.noise.copy()
    idx = np.arange(n)

    # "better" is the total order (flatness, index): strict and cycle free
    lam_j = lam[knn]
    better = (lam_j < lam[:, None]) | ((lam_j == lam[:, None]) & (knn < idx[:, None]))
    cand = attrs.consistent & better & ~noise[knn] & ~noise[:, None]
    dev = normal_deviation(attrs.normals[:, None, :], attrs.normals[knn])
    dev = np.where(cand, dev, np.inf)
    best = dev.min(axis=1)
    has = np.isfinite(best)
    # among near-equal deviations prefer the lowest point index
    tied = cand & (dev <= best[:, None] + _DEVIATION_TIE)
    pick = np.where(tied, knn, np.iinfo(np.int64).max).min(axis=1)
    cnp = np.where(has, pick, -1)

    th = flatness_threshold(lam[~noise], alpha)
    is_center = ~has & ~noise & (lam <= th)

    root = np.where(has, cnp, idx)
    while True:
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    cluster = np.where(is_center[root] & ~noise, root, -1)
    return LinkageTable(cnp, cluster, lam.copy(), is_center, noise, th)


@dataclass
class Slice:
    members: np.ndarray
    normal: np.ndarray
    flatness: float
    centroid: np.ndarray
    consistent_set: np.ndarray

    def __len__(self):
        return len(self.members)


def slice_from_members(points: np.ndarray, members) -> Slice | None:
    """Fit slice attributes over all members; None for a degenerate set."""
    members = np.unique(np.asarray(members, dtype=np.int64))
    if len(members) < 3:
        return None
    q = points[members][None]
    centroid = q.mean(axis=1)
    normal, lam, trace, degenerate = _plane_stats(q - centroid[:, None, :], len(members))
    if degenerate[0]:
        return None
    dist = _orthogonal_distances(q, centroid, normal, trace)
    cs = robust_inliers(dist)[0]
    return Slice(members, normal[0], float(lam[0]), centroid[0], members[cs])


def create_slices(table: LinkageTable, points, min_slice_size: int = 200) -> list[Slice]:
    """Group points by the center their CNP chain reaches.

    Clusters smaller than ``min_slice_size`` are discarded; slices are returned in
    order of their smallest member index.
    """
    pts = np.asarray(points, dtype=float)
    lab = table.cluster
    keep = lab >= 0
    if not keep.any():
        logger.warning("no clustered points; zero slices")
        return []
    order = np.argsort(lab[keep], kind="stable")
    members_sorted = np.flatnonzero(keep)[order]
    _, starts, counts = np.unique(lab[keep][order], return_index=True, return_counts=True)
    slices = []
    for s, c in zip(starts, counts):
        if c < min_slice_size:
            continue
        sl = slice_from_members(pts, members_sorted[s : s + c])
        if sl is not None:
            slices.append(sl)
    if not slices:
        logger.warning("no cluster reached %d points; zero slices", min_slice_size)
    slices.sort(key=lambda s: int(s.members[0]))
    return slices
