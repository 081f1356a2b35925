"""Slices to bounded planar facets, and the PlanarMap container.

A facet is the convex hull of a slice's points projected on the slice's
total-least-squares plane. Boundaries are stored counterclockwise as seen from
the tip of the plane normal.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .frames import FrameOrigin, GeodeticPoint
from .segmentation import CloudAttributes, Slice, normal_deviation, slice_from_members

logger = logging.getLogger(__name__)

PLANE_TOL = 1e-6


@dataclass(frozen=True)
class Plane:
    """``normal . x + tau = 0`` with a unit normal and an anchor on the plane."""

    normal: np.ndarray
    anchor: np.ndarray
    tau: float

    @property
    def coefficients(self) -> tuple[float, float, float, float]:
        """(beta, eps1, eps2, tau) of ``beta x + eps1 y + eps2 z + tau = 0``."""
        b, e1, e2 = (float(v) for v in self.normal)
        return b, e1, e2, float(self.tau)

    def signed_distance(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.normal + self.tau


@dataclass(frozen=True)
class PlaneBasis:
    anchor: np.ndarray
    u: np.ndarray
    v: np.ndarray
    normal: np.ndarray

    def to_2d(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.anchor
        return np.stack([d @ self.u, d @ self.v], axis=-1)

    def lift(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return self.anchor + uv[..., :1] * self.u + uv[..., 1:2] * self.v


@dataclass
class Facet:
    id: int
    plane: Plane
    boundary: np.ndarray  # (V, 3), counterclockwise seen from +normal
    height_range: tuple[float, float]
    source_slice: int = -1

    def validate(self, tol: float = PLANE_TOL) -> None:
        b = np.asarray(self.boundary, dtype=float)
        if b.ndim != 2 or b.shape[1] != 3 or len(b) < 3:
            raise ValueError(f"facet {self.id}: boundary must be (V>=3, 3)")
        n = self.plane.normal
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"facet {self.id}: normal is not unit length")
        off = np.abs(b @ n + self.plane.tau)
        if off.max() > tol:
            raise ValueError(f"facet {self.id}: boundary vertex {off.max():.3g} m off its plane")
        e = np.roll(b, -1, axis=0) - b
        turn = np.cross(e, np.roll(e, -1, axis=0)) @ n
        scale = max(float(np.max(np.abs(e))), 1.0)
        if np.any(turn < -1e-9 * scale * scale):
            raise ValueError(f"facet {self.id}: boundary is not convex counterclockwise")
        lo, hi = self.height_range
        if not lo <= hi:
            raise ValueError(f"facet {self.id}: height range {lo} > {hi}")


@dataclass
class PlanarMap:
    facets: list[Facet]
    origin: FrameOrigin | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [f.id for f in self.facets]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate facet ids")

    def __len__(self):
        return len(self.facets)

    def __iter__(self):
        return iter(self.facets)

    def to_dict(self) -> dict:
        return {
            "origin": self.origin.as_dict() if self.origin is not None else None,
            "facets": [
                {
                    "id": f.id,
                    "normal": [float(v) for v in f.plane.normal],
                    "anchor": [float(v) for v in f.plane.anchor],
                    "tau": float(f.plane.tau),
                    "boundary": [[float(v) for v in p] for p in f.boundary],
                    "height_range": [float(f.height_range[0]), float(f.height_range[1])],
                    "source_slice": int(f.source_slice),
                }
                for f in self.facets
            ],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PlanarMap":
        o = doc.get("origin")
        origin = None
        if o is not None:
            origin = FrameOrigin.from_geodetic(GeodeticPoint(o["lat"], o["lon"], o.get("h", 0.0)))
        facets = []
        for rec in doc.get("facets", []):
            plane = Plane(
                np.array(rec["normal"], dtype=float),
                np.array(rec["anchor"], dtype=float),
                float(rec["tau"]),
            )
            hr = rec["height_range"]
            f = Facet(
                int(rec["id"]),
                plane,
                np.array(rec["boundary"], dtype=float),
                (float(hr[0]), float(hr[1])),
                int(rec.get("source_slice", -1)),
            )
            f.validate()
            facets.append(f)
        return cls(facets, origin, dict(doc.get("metadata") or {}))

    def save(self, path) -> None:
        # json writes floats with repr(), i.e. 17 significant digits
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "PlanarMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _mutual_consistent_pairs(attrs: CloudAttributes) -> tuple[np.ndarray, np.ndarray]:
    n, k = attrs.knn.shape
    rows = np.repeat(np.arange(n), k)[attrs.consistent.ravel()]
    cols = attrs.knn[attrs.consistent]
    a = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n)).tocsr()
    mutual = a.multiply(a.T).tocoo()
    keep = mutual.row < mutual.col
    return mutual.row[keep], mutual.col[keep]


def merge_slices(
    slices: list[Slice],
    attrs: CloudAttributes,
    points,
    theta: float = math.radians(10.0),
    max_rounds: int = 50,
) -> list[Slice]:
    """Merge slices linked by a mutually consistent point pair with close normals.

    Slices p and q merge when some X_i in CS(S_p) and X_j in CS(S_q) are in each
    other's consistent sets and the angle between the slice normals is below
    ``theta``. Merging is transitive (connected components) and repeated on the
    re-estimated slices until nothing changes.
    """
    pts = np.asarray(points, dtype=float)
    n = len(attrs)
    ii, jj = _mutual_consistent_pairs(attrs)
    current = list(slices)
    for _ in range(max_rounds):
        m = len(current)
        if m < 2:
            break
        owner = np.full(n, -1, dtype=np.int64)
        for s, sl in enumerate(current):
            owner[sl.consistent_set] = s
        a, b = owner[ii], owner[jj]
        link = (a >= 0) & (b >= 0) & (a != b)
        a, b = a[link], b[link]
        normals = np.array([sl.normal for sl in current])
        close = normal_deviation(normals[a], normals[b]) < theta
        a, b = a[close], b[close]
        if len(a) == 0:
            break
        graph = coo_matrix((np.ones(len(a)), (a, b)), shape=(m, m))
        ncomp, comp = connected_components(graph, directed=False)
        if ncomp == m:
            break
        merged = []
        for c in range(ncomp):
            group = np.flatnonzero(comp == c)
            if len(group) == 1:
                merged.append(current[group[0]])
                continue
            sl = slice_from_members(pts, np.concatenate([current[g].members for g in group]))
            if sl is not None:
                merged.append(sl)
        merged.sort(key=lambda s: int(s.members[0]))
        current = merged
    return current


def drop_small_slices(slices: list[Slice], min_size: int) -> list[Slice]:
    kept = [s for s in slices if len(s) >= min_size]
    if slices and not kept:
        logger.warning("all %d slices below %d points", len(slices), min_size)
    return kept


def _canonical_normal(n: np.ndarray) -> np.ndarray:
    n = n / np.linalg.norm(n)
    return -n if n[int(np.argmax(np.abs(n)))] < 0 else n


def fit_plane(slice_or_points, points=None) -> Plane:
    """Total-least-squares plane through a slice (or an (M, 3) array)."""
    if isinstance(slice_or_points, Slice):
        q = np.asarray(points, dtype=float)[slice_or_points.members]
    else:
        q = np.asarray(slice_or_points, dtype=float)
    if len(q) < 3:
        raise ValueError("need at least 3 points to fit a plane")
    a = q.mean(axis=0)
    w, v = np.linalg.eigh((q - a).T @ (q - a) / len(q))
    if w[1] <= 1e-12 * max(w.sum(), 1e-300):
        raise ValueError("points are collinear or coincident")
    n = _canonical_normal(v[:, 0])
    return Plane(n, a, float(-n @ a))


def plane_basis(plane: Plane) -> PlaneBasis:
    """In-plane (u, v) with u along the projected +z axis (else +x), v = n x u."""
    n = plane.normal
    for axis in (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])):
        p = axis - (axis @ n) * n
        norm = np.linalg.norm(p)
        if norm > 1e-9:
            u = p / norm
            break
    else:  # normal along +x and +z at once cannot happen for a unit vector
        raise AssertionError("no in-plane axis")
    v = np.cross(n, u)
    return PlaneBasis(plane.anchor, u, v, n)


def project_to_plane_2d(points, plane: Plane) -> tuple[np.ndarray, PlaneBasis]:
    """Orthogonal projection onto ``plane`` expressed in its (u, v) basis."""
    basis = plane_basis(plane)
    return basis.to_2d(points), basis


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def graham_scan(points2d) -> np.ndarray:
    """Counterclockwise convex hull, collinear boundary points dropped.

    Pivot is the lowest-y point (lowest x on ties); the rest are visited in
    polar-angle order about it, nearer points first on equal angles. Of
    collinear candidates on an edge the farther one is kept.
    """
    p = np.asarray(points2d, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
        raise ValueError("need at least 3 two-dimensional points")
    p = np.unique(p, axis=0)
    pivot_i = np.lexsort((p[:, 0], p[:, 1]))[0]
    pivot = p[pivot_i]
    rest = np.delete(p, pivot_i, axis=0)
    rel = rest - pivot
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    dist2 = rel[:, 0] ** 2 + rel[:, 1] ** 2
    rest = rest[np.lexsort((dist2, ang))]
    extent = float(np.max(np.abs(p - pivot))) if len(p) else 1.0
    tol = 1e-12 * extent * extent

    def d2(a, b):
        return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2

    stack = [pivot, rest[0]]
    for g in rest[1:]:
        while len(stack) >= 2:
            e, f = stack[-2], stack[-1]
            c = _cross(e, f, g)
            if c > tol:
                break
            if c < -tol:
                stack.pop()
                continue
            # collinear with the top edge: keep whichever lies farther along it
            if d2(g, e) > d2(f, e):
                stack.pop()
                continue
            g = None
            break
        if g is not None:
            stack.append(g)
    if len(stack) < 3:
        raise ValueError("points are collinear; no 2D hull")
    return np.array(stack)


def build_facets(
    slices: list[Slice],
    points,
    origin: FrameOrigin | None = None,
    metadata: dict | None = None,
) -> PlanarMap:
    pts = np.asarray(points, dtype=float)
    facets = []
    for si, sl in enumerate(slices):
        try:
            plane = fit_plane(sl, pts)
            uv, basis = project_to_plane_2d(pts[sl.members], plane)
            hull = graham_scan(uv)
        except ValueError as exc:
            logger.warning("slice %d skipped: %s", si, exc)
            continue
        boundary = basis.lift(hull)
        z = boundary[:, 2]
        facets.append(Facet(len(facets), plane, boundary, (float(z.min()), float(z.max())), si))
    return PlanarMap(facets, origin, dict(metadata or {}))


def filter_by_height(pmap: PlanarMap, band: tuple[float, float]) -> PlanarMap:
    """Keep whole facets whose height range overlaps ``band``."""
    lo, hi = band
    if not lo <= hi:
        raise ValueError(f"height band {band} is not ordered")
    kept = [f for f in pmap.facets if f.height_range[1] >= lo and f.height_range[0] <= hi]
    meta = dict(pmap.metadata)
    meta["height_band"] = [float(lo), float(hi)]
    return PlanarMap(kept, pmap.origin, meta)


@dataclass(frozen=True)
class SpacingStats:
    mean_all: float
    median_all: float
    mean_of_cluster_means: float
    median_of_cluster_means: float

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("distance_mean_all_points", self.mean_all),
            ("distance_median_all_points", self.median_all),
            ("mean_of_cluster_means", self.mean_of_cluster_means),
            ("median_of_cluster_means", self.median_of_cluster_means),
        ]


def nearest_neighbor_distances(points) -> np.ndarray:
    q = np.asarray(points, dtype=float)
    d, _ = cKDTree(q).query(q, 2)
    return d[:, 1]


def spacing_stats(clusters, points=None) -> SpacingStats:
    """Nearest-neighbour spacing inside each cluster, pooled and per cluster.

    ``clusters`` is a list of slices (with ``points``) or of (M, 3) arrays.
    Single-point clusters are skipped.
    """
    per_cluster = []
    for c in clusters:
        q = np.asarray(points, dtype=float)[c.members] if isinstance(c, Slice) else np.asarray(c, float)
        if len(q) < 2:
            continue
        per_cluster.append(nearest_neighbor_distances(q))
    if not per_cluster:
        raise ValueError("no cluster with at least two points")
    pooled = np.concatenate(per_cluster)
    means = np.array([d.mean() for d in per_cluster])
    return SpacingStats(
        float(pooled.mean()), float(np.median(pooled)), float(means.mean()), float(np.median(means))
    )
