"""LOS / NLOS classification and single-bounce reflection delays against a PlanarMap.

For each ray (satellite S, receiver R) every facet is tested for

* blockage of the direct segment S-R (plane crossing inside the facet), and
* a specular reflection: R is mirrored through the facet plane to R', and the
  segment S-R' must cross the plane inside the facet at Q'. The excess path is
  ``|Q'-S| + |R-Q'| - |R-S|``, which equals ``|S-R'| - |S-R|``.

Reflected legs S-Q' and Q'-R are themselves checked against the other facets;
occluded reflections are reported but never drive the correction.

The kernels work on flat (ray, facet) pair arrays and only use elementwise
arithmetic, so a facet's contribution to a ray is bit-identical whatever other
facets share the map.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .planar_map import Facet, PlanarMap

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
ANGLE_TOL = 1e-6
EDGE_TOL = 1e-9
BBOX_PAD = 1e-6
PARALLEL_TOL = 1e-12


class Reception(str, Enum):
    LOS = "LOS"
    BLOCKED = "Blocked"
    NLOS = "NLOS"
    LOS_PLUS_NLOS = "LOS_plus_NLOS"


class DelayPolicy(str, Enum):
    MIN = "min"
    MAX = "max"
    ALL = "all"  # mean over all usable reflections


@dataclass(frozen=True)
class SatEpoch:
    prn: str
    epoch: float
    position: np.ndarray


@dataclass(frozen=True)
class ReceiverEpoch:
    epoch: float
    position: np.ndarray


@dataclass(frozen=True)
class Reflection:
    facet_id: int
    mirror: np.ndarray
    point: np.ndarray
    delay: float
    occluded: bool = False


@dataclass
class RayPath:
    prn: str
    epoch: float
    classification: Reception
    blocking: tuple[int, ...] = ()
    reflections: list[Reflection] = field(default_factory=list)
    applied_delay: float = 0.0
    applied_facet: int = -1

    @property
    def usable(self) -> list[Reflection]:
        return [r for r in self.reflections if not r.occluded]


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _cross(a, b):
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _norm(a):
    return np.sqrt(_dot(a, a))


def norm_difference(p, q, s):
    """``|p - s| - |q - s|`` without cancellation when s is far away."""
    a = _norm(p - s)
    b = _norm(q - s)
    num = _dot(p - q, p + q - 2.0 * s)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(a + b > 0, num / (a + b), 0.0)


@dataclass
class FacetArrays:
    """Facets of a map packed for vectorised tracing.

    Boundaries are padded to a common vertex count by repeating the last vertex,
    which adds exact zeros to the angle sum.
    """

    ids: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray  # n . anchor
    verts: np.ndarray
    nverts: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_facets(cls, facets) -> "FacetArrays":
        facets = list(facets)
        f = len(facets)
        vmax = max((len(x.boundary) for x in facets), default=3)
        verts = np.zeros((f, vmax, 3))
        nverts = np.zeros(f, dtype=np.int64)
        for i, x in enumerate(facets):
            b = np.asarray(x.boundary, dtype=float)
            verts[i, : len(b)] = b
            verts[i, len(b) :] = b[-1]
            nverts[i] = len(b)
        normals = np.array([x.plane.normal for x in facets], dtype=float).reshape(f, 3)
        anchors = np.array([x.plane.anchor for x in facets], dtype=float).reshape(f, 3)
        return cls(
            np.array([x.id for x in facets], dtype=np.int64),
            normals,
            _dot(normals, anchors),
            verts,
            nverts,
            verts.min(axis=1) - BBOX_PAD if f else np.zeros((0, 3)),
            verts.max(axis=1) + BBOX_PAD if f else np.zeros((0, 3)),
        )

    @classmethod
    def from_map(cls, pmap: PlanarMap) -> "FacetArrays":
        return cls.from_facets(pmap.facets)

    def height(self, x: np.ndarray, fi: np.ndarray) -> np.ndarray:
        """Signed distance of points x (P, 3) to the planes of facets fi (P,)."""
        return _dot(x, self.normals[fi]) - self.offsets[fi]


def _inside(q: np.ndarray, fi: np.ndarray, fa: FacetArrays) -> np.ndarray:
    """Angle-sum containment of points q (P, 3) in facets fi (P,); boundary counts as inside."""
    if len(q) == 0:
        return np.zeros(0, dtype=bool)
    in_box = np.all((q >= fa.lo[fi]) & (q <= fa.hi[fi]), axis=1)
    result = np.zeros(len(q), dtype=bool)
    idx = np.flatnonzero(in_box)
    if len(idx) == 0:
        return result
    q = q[idx]
    fi = fi[idx]
    verts = fa.verts[fi]
    n = fa.normals[fi]
    d = verts - q[:, None, :]
    d_next = np.roll(d, -1, axis=1)
    edge = np.roll(verts, -1, axis=1) - verts
    total = np.zeros(len(q))
    near = np.zeros(len(q), dtype=bool)
    for i in range(verts.shape[1]):
        a, b = d[:, i], d_next[:, i]
        total = total + np.arctan2(_dot(_cross(a, b), n), _dot(a, b))
        e = edge[:, i]
        ee = _dot(e, e)
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.clip(np.where(ee > 0, -_dot(a, e) / ee, 0.0), 0.0, 1.0)
        gap = a + t[:, None] * e
        near |= _dot(gap, gap) <= EDGE_TOL * EDGE_TOL
    # either winding: a boundary listed clockwise sums to -2 pi
    result[idx] = near | (np.abs(np.abs(total) - TWO_PI) < ANGLE_TOL)
    return result


def _segment_hits(a: np.ndarray, b: np.ndarray, fa: FacetArrays, mask: np.ndarray | None = None):
    """Facets crossed by open segments a-b.

    Returns (ray index, facet index, crossing point) for every crossing that lies
    inside its facet. ``mask`` (P, F) restricts the pairs tested.
    """
    p_n, f_n = len(a), len(fa)
    if p_n == 0 or f_n == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3))
    ha = _dot(a[:, None, :], fa.normals[None]) - fa.offsets[None]
    hb = _dot(b[:, None, :], fa.normals[None]) - fa.offsets[None]
    seg = _norm(a - b)
    cand = (ha * hb < 0) & (np.abs(hb - ha) > PARALLEL_TOL * seg[:, None])
    if mask is not None:
        cand &= mask
    pi, fi = np.nonzero(cand)
    s = hb[pi, fi] / (hb[pi, fi] - ha[pi, fi])
    q = b[pi] + s[:, None] * (a[pi] - b[pi])
    ok = _inside(q, fi, fa)
    return pi[ok], fi[ok], q[ok]


def _reflections(s: np.ndarray, r: np.ndarray, fa: FacetArrays):
    """Single-bounce candidates: (ray, facet, mirror R', point Q', delay)."""
    if len(s) == 0 or len(fa) == 0:
        z = np.zeros(0, np.int64)
        return z, z, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    hs = _dot(s[:, None, :], fa.normals[None]) - fa.offsets[None]
    hr = _dot(r[:, None, :], fa.normals[None]) - fa.offsets[None]
    cand = (hs != 0) & (hs * hr >= 0)
    pi, fi = np.nonzero(cand)
    hs, hr = hs[pi, fi], hr[pi, fi]
    n = fa.normals[fi]
    sp, rp = s[pi], r[pi]
    mirror = rp - (2.0 * hr)[:, None] * n
    # parameter measured from R' so Q' keeps full precision near the receiver
    t = hr / (hs + hr)
    q = mirror + t[:, None] * (sp - mirror)
    ok = _inside(q, fi, fa)
    pi, fi, mirror, q, rp, sp = pi[ok], fi[ok], mirror[ok], q[ok], rp[ok], sp[ok]
    delay = norm_difference(q, rp, sp) + _norm(rp - q)
    return pi, fi, mirror, q, delay


@dataclass
class TraceArrays:
    """Raw per-ray outcome of :func:`trace_arrays` in flat form."""

    n_rays: int
    block_ray: np.ndarray
    block_facet: np.ndarray
    block_point: np.ndarray
    refl_ray: np.ndarray
    refl_facet: np.ndarray
    refl_mirror: np.ndarray
    refl_point: np.ndarray
    refl_delay: np.ndarray
    refl_occluded: np.ndarray


def trace_arrays(s, r, fa: FacetArrays, occlusion: bool = True) -> TraceArrays:
    s = np.asarray(s, dtype=float).reshape(-1, 3)
    r = np.asarray(r, dtype=float).reshape(-1, 3)
    bp, bf, bq = _segment_hits(s, r, fa)
    rp, rf, rm, rq, rd = _reflections(s, r, fa)
    occluded = np.zeros(len(rp), dtype=bool)
    if occlusion and len(rp) and len(fa) > 1:
        others = np.ones((len(rp), len(fa)), dtype=bool)
        others[np.arange(len(rp)), rf] = False
        for a, b in ((s[rp], rq), (rq, r[rp])):
            hit, _, _ = _segment_hits(a, b, fa, others)
            occluded[hit] = True
    return TraceArrays(len(s), bp, fa.ids[bf], bq, rp, fa.ids[rf], rm, rq, rd, occluded)


def _select(refl: list[Reflection], policy: DelayPolicy) -> tuple[float, int]:
    usable = [x for x in refl if not x.occluded]
    if not usable:
        return 0.0, -1
    if policy is DelayPolicy.ALL:
        return float(math.fsum(x.delay for x in usable) / len(usable)), -1
    if policy is DelayPolicy.MIN:
        best = min(usable, key=lambda x: (x.delay, x.facet_id))
    else:
        best = min(usable, key=lambda x: (-x.delay, x.facet_id))
    return float(best.delay), best.facet_id


def assemble(ta: TraceArrays, prns, epochs, policy=DelayPolicy.MIN) -> list[RayPath]:
    policy = DelayPolicy(policy)
    blocking = [[] for _ in range(ta.n_rays)]
    for p, f in zip(ta.block_ray.tolist(), ta.block_facet.tolist()):
        blocking[p].append(f)
    refl = [[] for _ in range(ta.n_rays)]
    for k, p in enumerate(ta.refl_ray.tolist()):
        refl[p].append(
            Reflection(
                int(ta.refl_facet[k]),
                ta.refl_mirror[k],
                ta.refl_point[k],
                float(ta.refl_delay[k]),
                bool(ta.refl_occluded[k]),
            )
        )
    out = []
    for p in range(ta.n_rays):
        rs = sorted(refl[p], key=lambda x: x.facet_id)
        blocked = bool(blocking[p])
        has_refl = any(not x.occluded for x in rs)
        if blocked:
            cls = Reception.NLOS if has_refl else Reception.BLOCKED
        else:
            cls = Reception.LOS_PLUS_NLOS if has_refl else Reception.LOS
        delay, facet = _select(rs, policy) if cls is Reception.NLOS else (0.0, -1)
        out.append(RayPath(prns[p], epochs[p], cls, tuple(sorted(blocking[p])), rs, delay, facet))
    return out


def classify(s, r, pmap, policy=DelayPolicy.MIN, prn: str = "", epoch: float = 0.0) -> RayPath:
    fa = pmap if isinstance(pmap, FacetArrays) else FacetArrays.from_map(pmap)
    return assemble(trace_arrays(s, r, fa), [prn], [epoch], policy)[0]


def _single(facet: Facet) -> FacetArrays:
    return FacetArrays.from_facets([facet])


def point_in_facet(q, facet: Facet) -> bool:
    """Angle-sum test; points within 1e-9 m of the boundary count as inside."""
    q = np.asarray(q, dtype=float).reshape(1, 3)
    return bool(_inside(q, np.zeros(1, np.int64), _single(facet))[0])


def angle_sum(q, facet: Facet) -> float:
    """Sum of directed angles subtended by consecutive boundary vertices at q."""
    q = np.asarray(q, dtype=float)
    b = np.asarray(facet.boundary, dtype=float)
    d = b - q
    d2 = np.roll(d, -1, axis=0)
    return float(np.sum(np.arctan2(_dot(_cross(d, d2), facet.plane.normal), _dot(d, d2))))


def direct_blocked(s, r, facet: Facet):
    """Crossing point of the open segment S-R with the facet, or None."""
    s = np.asarray(s, dtype=float).reshape(1, 3)
    r = np.asarray(r, dtype=float).reshape(1, 3)
    if np.array_equal(s, r):
        raise ValueError("satellite and receiver coincide")
    _, _, q = _segment_hits(s, r, _single(facet))
    return q[0] if len(q) else None


def mirror_point(r, facet: Facet) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    n = facet.plane.normal
    return r + 2.0 * float((facet.plane.anchor - r) @ n) * n


def reflection_path(s, r, facet: Facet):
    """(R', Q', delay) of the specular bounce on ``facet``, or None."""
    s = np.asarray(s, dtype=float).reshape(1, 3)
    r = np.asarray(r, dtype=float).reshape(1, 3)
    if np.array_equal(s, r):
        raise ValueError("satellite and receiver coincide")
    _, _, m, q, d = _reflections(s, r, _single(facet))
    if not len(d):
        return None
    return m[0], q[0], float(d[0])


def _pair_rows(sats, route):
    """Join satellites and receiver positions on epoch, epoch-major and prn-minor."""
    from .io import RouteTable, SatTable

    sats = sats if isinstance(sats, SatTable) else SatTable.from_records(sats)
    route = route if isinstance(route, RouteTable) else RouteTable.from_records(route)
    pos_by_epoch = {}
    for e, p in zip(route.epoch.tolist(), route.pos):
        pos_by_epoch.setdefault(e, p)
    order = np.lexsort((sats.prn, sats.epoch))
    keep, rpos = [], []
    missing = 0
    for i in order.tolist():
        p = pos_by_epoch.get(float(sats.epoch[i]))
        if p is None:
            missing += 1
            continue
        keep.append(i)
        rpos.append(p)
    if missing:
        logger.warning("%d satellite rows without a receiver epoch skipped", missing)
    keep = np.array(keep, dtype=np.int64)
    rpos = np.array(rpos, dtype=float).reshape(-1, 3)
    return sats.prn[keep], sats.epoch[keep], sats.pos[keep], rpos, missing


def _trace_chunk(args):
    s, r, fa, occlusion = args
    return trace_arrays(s, r, fa, occlusion)


def trace_run(
    sats,
    route,
    pmap,
    policy=DelayPolicy.MIN,
    workers: int = 1,
    occlusion: bool = True,
    pairs_per_chunk: int = 200_000,
) -> list[RayPath]:
    """Classify every (prn, epoch) present in both inputs.

    Satellite and receiver positions must be in the map's ENU frame. Output is
    ordered by epoch, then prn, and does not depend on ``workers``.
    """
    fa = pmap if isinstance(pmap, FacetArrays) else FacetArrays.from_map(pmap)
    prns, epochs, s, r, _ = _pair_rows(sats, route)
    step = max(1, pairs_per_chunk // max(len(fa), 1))
    jobs = [(s[i : i + step], r[i : i + step], fa, occlusion) for i in range(0, len(s), step)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_trace_chunk, jobs))
    else:
        parts = [_trace_chunk(j) for j in jobs]
    out: list[RayPath] = []
    for k, part in enumerate(parts):
        lo = k * step
        out.extend(assemble(part, prns[lo : lo + step].tolist(), epochs[lo : lo + step].tolist(), policy))
    return out
