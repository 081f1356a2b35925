"""Brute-force reference implementations used to check the production code.

Nothing here imports the package's geometry modules. Facets are plain polygons
(V, 3) with an integer id; ray tests go through a dense triangle mesh, reflections
mirror the satellite rather than the receiver, and delays are evaluated in
extended precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import mpmath
import numpy as np

GRAZING_SHELL = 1e-6
_MP_DIGITS = 40


def _newell_normal(poly: np.ndarray) -> np.ndarray:
    n = np.zeros(3)
    for i in range(len(poly)):
        p, q = poly[i], poly[(i + 1) % len(poly)]
        n[0] += (p[1] - q[1]) * (p[2] + q[2])
        n[1] += (p[2] - q[2]) * (p[0] + q[0])
        n[2] += (p[0] - q[0]) * (p[1] + q[1])
    return n / np.sqrt(n @ n)


def triangulate(poly, levels: int = 2) -> np.ndarray:
    """Fan triangulation refined by midpoint subdivision: (T, 3, 3)."""
    poly = np.asarray(poly, dtype=float)
    tris = [np.array([poly[0], poly[i], poly[i + 1]]) for i in range(1, len(poly) - 1)]
    for _ in range(levels):
        finer = []
        for a, b, c in tris:
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            finer += [np.array(t) for t in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))]
        tris = finer
    return np.array(tris)


def segment_hits_mesh(p0, p1, tris: np.ndarray, eps: float = 1e-12) -> bool:
    """Moller-Trumbore test of the open segment p0-p1 against a triangle mesh."""
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - p0
    v0, e1, e2 = tris[:, 0], tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]
    pv = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pv)
    ok = np.abs(det) > eps * np.linalg.norm(d) * np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = p0 - v0
    u = np.einsum("ij,ij->i", tv, pv) * inv
    qv = np.cross(tv, e1)
    v = (qv @ d) * inv
    t = np.einsum("ij,ij->i", e2, qv) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0) & (t < 1)
    return bool(hit.any())


def _dist_to_boundary(q: np.ndarray, poly: np.ndarray) -> float:
    best = np.inf
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        e = b - a
        t = min(max(((q - a) @ e) / (e @ e), 0.0), 1.0)
        best = min(best, float(np.linalg.norm(q - (a + t * e))))
    return best


@dataclass
class OracleFacet:
    id: int
    polygon: np.ndarray
    normal: np.ndarray = field(init=False)
    mesh: np.ndarray = field(init=False)

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=float)
        self.normal = _newell_normal(self.polygon)
        self.mesh = triangulate(self.polygon)

    def side(self, x) -> float:
        return float((np.asarray(x, dtype=float) - self.polygon[0]) @ self.normal)


def as_oracle_facets(polygons) -> list[OracleFacet]:
    """Accept OracleFacets, (id, polygon) pairs or bare polygons."""
    out = []
    for k, p in enumerate(polygons):
        if isinstance(p, OracleFacet):
            out.append(p)
        elif isinstance(p, tuple):
            out.append(OracleFacet(int(p[0]), p[1]))
        else:
            out.append(OracleFacet(k, p))
    return out


def _near_edge_crossing(p0, p1, f: OracleFacet) -> bool:
    """Segment meets the facet plane within the grazing shell of its boundary."""
    h0, h1 = f.side(p0), f.side(p1)
    if h0 * h1 > 0:
        return False
    if h0 == h1:
        return True
    q = p0 + (h0 / (h0 - h1)) * (np.asarray(p1) - p0)
    return _dist_to_boundary(q, f.polygon) < GRAZING_SHELL


def exact_delay(s, r, f: OracleFacet) -> float:
    """|S - R'| - |S - R| with the mirror built in extended precision."""
    with mpmath.workdps(_MP_DIGITS):
        sm = [mpmath.mpf(float(x)) for x in s]
        rm = [mpmath.mpf(float(x)) for x in r]
        nm = [mpmath.mpf(float(x)) for x in f.normal]
        am = [mpmath.mpf(float(x)) for x in f.polygon[0]]
        h = sum((rm[i] - am[i]) * nm[i] for i in range(3))
        mirror = [rm[i] - 2 * h * nm[i] for i in range(3)]
        d1 = mpmath.sqrt(sum((sm[i] - mirror[i]) ** 2 for i in range(3)))
        d0 = mpmath.sqrt(sum((sm[i] - rm[i]) ** 2 for i in range(3)))
        return float(d1 - d0)


@dataclass
class OracleResult:
    classification: str
    blocking: tuple[int, ...]
    reflections: dict  # facet id -> (delay, occluded)
    applied_delay: float
    grazing: bool


def oracle_classify(s, r, polygons) -> OracleResult:
    """Reference LOS / NLOS verdict for one satellite-receiver pair."""
    s = np.asarray(s, dtype=float)
    r = np.asarray(r, dtype=float)
    facets = as_oracle_facets(polygons)
    grazing = False
    blocking = []
    for f in facets:
        grazing |= _near_edge_crossing(s, r, f)
        if segment_hits_mesh(s, r, f.mesh):
            blocking.append(f.id)
    reflections = {}
    for f in facets:
        hs, hr = f.side(s), f.side(r)
        if hs == 0 or hs * hr < 0:
            continue
        if abs(hr) < GRAZING_SHELL:
            grazing = True
        # Householder mirror of the satellite; the reflected ray is R -> S'
        s_img = s - 2.0 * hs * f.normal
        q = r + (hr / (hr + hs)) * (s_img - r)
        grazing |= _dist_to_boundary(q, f.polygon) < GRAZING_SHELL
        inside = segment_hits_mesh(r, s_img, f.mesh) if hr != 0 else _in_poly(q, f)
        if not inside:
            continue
        occluded = False
        for g in facets:
            if g.id == f.id:
                continue
            for a, b in ((s, q), (q, r)):
                grazing |= _near_edge_crossing(a, b, g)
                occluded |= segment_hits_mesh(a, b, g.mesh)
        reflections[f.id] = (exact_delay(s, r, f), occluded)
    usable = [d for d, occ in reflections.values() if not occ]
    if blocking:
        cls = "NLOS" if usable else "Blocked"
    else:
        cls = "LOS_plus_NLOS" if usable else "LOS"
    applied = min(usable) if cls == "NLOS" else 0.0
    return OracleResult(cls, tuple(sorted(blocking)), reflections, applied, grazing)


def _in_poly(q, f: OracleFacet) -> bool:
    n = f.normal
    poke = q + n
    return segment_hits_mesh(poke, q - n, f.mesh)


def oracle_hull(points2d) -> np.ndarray:
    """Convex hull by testing every ordered pair as a candidate edge, O(n^3).

    Returns the extreme points counterclockwise, starting from the lowest-y
    (then lowest-x) vertex. Points interior to hull edges are not vertices.
    """
    p = np.unique(np.asarray(points2d, dtype=float), axis=0)
    n = len(p)
    extent = float(np.max(np.abs(p - p.min(axis=0)))) or 1.0
    tol = 1e-12 * extent * extent
    succ = {}
    for i in range(n):
        # candidate edge i->j for every j at once; point k must be left of it,
        # or on it between i and j (k = i and k = j pass trivially)
        e = p - p[i]
        c = e[:, None, 0] * e[None, :, 1] - e[:, None, 1] * e[None, :, 0]
        ee = np.einsum("ij,ij->i", e, e)
        with np.errstate(invalid="ignore", divide="ignore"):
            t = (e @ e.T) / ee[:, None]
        np.fill_diagonal(t, 1.0)  # k = j exactly at the end of the edge
        on = np.abs(c) <= tol
        ok = np.all((c >= -tol) & (~on | ((t >= 0) & (t <= 1))), axis=1)
        ok[i] = False
        for j in np.flatnonzero(ok):
            succ[i] = int(j)
    if len(succ) < 3:
        raise ValueError("degenerate point set")
    start = min(succ, key=lambda i: (p[i, 1], p[i, 0]))
    order = [start]
    while True:
        nxt = succ[order[-1]]
        if nxt == start:
            break
        order.append(nxt)
        if len(order) > n:
            raise RuntimeError("hull walk did not close")
    return p[order]


def oracle_knn(points, k: int) -> np.ndarray:
    """Exhaustive K nearest other points, ties broken by index."""
    p = np.asarray(points, dtype=float)
    n = len(p)
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        d = p - p[i]
        dist = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
        dist[i] = np.inf
        out[i] = np.lexsort((idx, dist))[:k]
    return out
