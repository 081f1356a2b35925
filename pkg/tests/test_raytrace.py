import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from planartrace.io import RouteTable, SatTable
from planartrace.oracle import OracleFacet, oracle_classify, segment_hits_mesh
from planartrace.planar_map import Facet, PlanarMap, Plane, filter_by_height
from planartrace.raytrace import (
    DelayPolicy,
    FacetArrays,
    Reception,
    angle_sum,
    classify,
    direct_blocked,
    mirror_point,
    point_in_facet,
    reflection_path,
    trace_run,
)
from planartrace.synth import rect_plane


def facet_from_corners(fid, corners, normal):
    corners = np.asarray(corners, dtype=float)
    n = np.asarray(normal, dtype=float)
    return Facet(fid, Plane(n, corners[0], -float(n @ corners[0])), corners, (corners[:, 2].min(), corners[:, 2].max()))


def square_x0():
    # plane x = 0, y,z in [-1, 1], counterclockwise seen from +x
    return facet_from_corners(0, [[0, -1, -1], [0, 1, -1], [0, 1, 1], [0, -1, 1]], [1, 0, 0])


def big_wall_x20(fid=0, half=1000.0):
    return facet_from_corners(
        fid, [[20, -half, -half], [20, -half, half], [20, half, half], [20, half, -half]], [-1, 0, 0]
    )


def unit_square():
    return facet_from_corners(0, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [0, 0, 1])


def test_crossing_blocks():
    q = direct_blocked([-10, 0, 0], [10, 0, 0], square_x0())
    np.testing.assert_allclose(q, [0, 0, 0], atol=1e-12)


def test_same_side_not_blocked():
    assert direct_blocked([-10, 0, 0], [-5, 0, 0], square_x0()) is None


def test_parallel_not_blocked():
    assert direct_blocked([0, -5, 0], [0, 5, 0], square_x0()) is None


def test_coincident_endpoints_rejected():
    with pytest.raises(ValueError):
        direct_blocked([1, 2, 3], [1, 2, 3], square_x0())
    with pytest.raises(ValueError):
        reflection_path([1, 2, 3], [1, 2, 3], square_x0())


def test_blockage_vs_mesh_oracle(rng):
    f = square_x0()
    mesh = OracleFacet(0, f.boundary).mesh
    agree = checked = 0
    for _ in range(10_000):
        s = rng.uniform(-3, 3, 3)
        r = rng.uniform(-3, 3, 3)
        hs, hr = s[0], r[0]
        if hs * hr < 0:
            q = s + hs / (hs - hr) * (r - s)
            dist = min(1 - abs(q[1]), 1 - abs(q[2]), key=abs)
            if abs(dist) < 1e-6:
                continue
        checked += 1
        agree += (direct_blocked(s, r, f) is not None) == segment_hits_mesh(s, r, mesh)
    assert agree == checked


def test_point_in_facet_basic():
    f = unit_square()
    assert point_in_facet([0.5, 0.5, 0], f)
    assert abs(angle_sum([0.5, 0.5, 0], f) - 2 * math.pi) < 1e-12
    assert not point_in_facet([2, 0.5, 0], f)
    assert abs(angle_sum([2, 0.5, 0], f)) < 1e-12
    assert point_in_facet([1, 0.5, 0], f)  # on an edge
    assert point_in_facet([1 + 5e-10, 1, 0], f)  # inside the inclusive shell


def test_point_in_facet_either_winding():
    f = unit_square()
    rev = facet_from_corners(0, f.boundary[::-1], [0, 0, 1])
    assert point_in_facet([0.5, 0.5, 0], rev)
    assert not point_in_facet([1.5, 0.5, 0], rev)


def test_point_in_facet_vs_halfplanes(rng):
    poly = np.array([[0, 0], [4, -1], [6, 2], [3, 5], [-1, 3]], dtype=float)
    f = facet_from_corners(0, np.c_[poly, np.zeros(5)], [0, 0, 1])
    pts = rng.uniform(-2, 7, (100_000, 2))
    e = np.roll(poly, -1, axis=0) - poly
    rel = pts[:, None, :] - poly[None]
    cross = e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]
    inside = np.all(cross > 0, axis=1)
    dist = np.min(np.abs(cross) / np.linalg.norm(e, axis=1), axis=1)
    keep = dist > 1e-9
    fa = FacetArrays.from_facets([f])
    from planartrace.raytrace import _inside

    got = _inside(np.c_[pts, np.zeros(len(pts))], np.zeros(len(pts), np.int64), fa)
    np.testing.assert_array_equal(got[keep], inside[keep])


def test_mirror_point_wall():
    f = big_wall_x20()
    np.testing.assert_allclose(mirror_point([3, 7, 1.5], f), [37, 7, 1.5], atol=1e-12)
    np.testing.assert_allclose(mirror_point([20, 4, 2], f), [20, 4, 2], atol=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_mirror_involution_and_constraints(r):
    f = facet_from_corners(0, [[1, 2, 0], [4, 3, 0], [4, 3, 5], [1, 2, 5]], np.array([1, -3, 0]) / math.sqrt(10))
    r = np.array(r)
    m = mirror_point(r, f)
    np.testing.assert_allclose(mirror_point(m, f), r, atol=1e-12)
    n = f.plane.normal
    assert np.linalg.norm(np.cross(m - r, n)) < 1e-9
    for v in [f.plane.anchor, *f.boundary]:
        assert abs(np.linalg.norm(m - v) - np.linalg.norm(r - v)) < 1e-9


def test_reflection_example():
    m, q, d = reflection_path([0, 40, 0], [0, 0, 0], big_wall_x20())
    np.testing.assert_allclose(m, [40, 0, 0], atol=1e-12)
    np.testing.assert_allclose(q, [20, 20, 0], atol=1e-12)
    assert abs(d - (2 * math.sqrt(800) - 40)) < 1e-12
    assert abs(d - 16.568542494923804) < 1e-12


def test_reflection_receiver_on_plane():
    m, q, d = reflection_path([0, 40, 5], [20, 0, 0], big_wall_x20())
    np.testing.assert_allclose(q, [20, 0, 0], atol=1e-12)
    assert d == 0.0


def test_opposite_sides_no_reflection():
    assert reflection_path([40, 0, 0], [0, 0, 0], big_wall_x20()) is None


def _mp(v):
    return [mpmath.mpf(float(x)) for x in v]


def _mp_dist(a, b):
    return mpmath.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def test_path_identity_and_specular_law(rng):
    mpmath.mp.dps = 40
    checked = 0
    while checked < 10_000:
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        a = rng.uniform(-50, 50, 3)
        u = np.cross(n, [0.3, 0.5, 0.8])
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        corners = a + 500 * np.array([-u - v, u - v, u + v, -u + v])
        f = facet_from_corners(0, corners, n)
        r = a + rng.uniform(-30, 30, 3)
        if (r - a) @ n < 0:
            r = r - 2 * ((r - a) @ n) * n
        dirn = rng.normal(size=3)
        dirn /= np.linalg.norm(dirn)
        if dirn @ n < 0:
            dirn = -dirn
        s = r + 2.2e7 * dirn
        res = reflection_path(s, r, f)
        if res is None:
            continue
        m, q, d = res
        sm, rm, qm, mm = _mp(s), _mp(r), _mp(q), _mp(m)
        legs = _mp_dist(qm, sm) + _mp_dist(rm, qm)
        assert abs(legs - _mp_dist(sm, mm)) < 1e-9
        assert abs(mpmath.mpf(d) - (legs - _mp_dist(rm, sm))) < 1e-9
        nm = _mp(n)

        def ang(p):
            w = [p[i] - qm[i] for i in range(3)]
            c = sum(w[i] * nm[i] for i in range(3)) / mpmath.sqrt(sum(x * x for x in w))
            return mpmath.acos(c)

        assert abs(ang(sm) - ang(rm)) < 1e-9
        checked += 1


def test_classify_empty_map():
    p = classify([0, 0, 2e7], [0, 0, 0], PlanarMap([]))
    assert p.classification is Reception.LOS and p.applied_delay == 0


def test_classify_single_blocking_wall():
    wall = facet_from_corners(0, [[20, 50, 0], [20, -50, 0], [20, -50, 60], [20, 50, 60]], [-1, 0, 0])
    s = 2e7 * np.array([math.cos(math.radians(20)), 0, math.sin(math.radians(20))])
    p = classify(s, [0, 0, 1.5], PlanarMap([wall]))
    assert p.classification is Reception.BLOCKED and p.blocking == (0,)


def canyon_map():
    e = rect_plane(0, (20, 0), (0, 1), 400, 0, 60, (-1, 0)).to_facet()
    w = rect_plane(1, (-20, 0), (0, 1), 400, 0, 60, (1, 0)).to_facet()
    return PlanarMap([e, w])


def sat(el, az, r=2.2e7):
    el, az = math.radians(el), math.radians(az)
    return r * np.array([math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el)])


def test_classify_nlos_and_los_plus_nlos():
    pm = canyon_map()
    r = np.array([0.0, 0, 1.5])
    p = classify(sat(50, 90), r, pm)
    assert p.classification is Reception.NLOS
    assert p.applied_facet == 1 and p.blocking == (0,)
    # closed-form mirror delay for the west wall
    m = np.array([-40.0, 0, 1.5])
    s = sat(50, 90)
    assert abs(p.applied_delay - (np.linalg.norm(s - m) - np.linalg.norm(s - r))) < 1e-6
    # closer to the west wall the direct ray clears the east roof while the
    # bounce still lands below the west roof
    q = classify(sat(70, 90), [-5, 0, 1.5], pm)
    assert q.classification is Reception.LOS_PLUS_NLOS and q.applied_delay == 0


def test_policy_and_order_invariance(rng):
    walls = [rect_plane(k, (20 + 3 * k, 0), (0, 1), 400, 0, 200, (-1, 0)).to_facet() for k in range(3)]
    west = rect_plane(7, (-20, 0), (0, 1), 400, 0, 200, (1, 0)).to_facet()
    facets = walls + [west]
    r = np.array([0.0, 0.0, 1.5])
    s = sat(60, 270)
    base = classify(s, r, PlanarMap(facets))
    for _ in range(5):
        perm = [facets[i] for i in rng.permutation(len(facets))]
        p = classify(s, r, PlanarMap(perm))
        assert p.classification == base.classification and p.applied_delay == base.applied_delay
    usable = [x.delay for x in base.usable]
    if base.classification is Reception.NLOS and len(usable) > 1:
        assert classify(s, r, PlanarMap(facets), DelayPolicy.MAX).applied_delay == max(usable)
        assert classify(s, r, PlanarMap(facets), DelayPolicy.ALL).applied_delay == pytest.approx(np.mean(usable))


def test_occluded_reflection_not_applied():
    pm = canyon_map()
    # a screen in front of the west wall hides the bounce from the receiver
    screen = facet_from_corners(2, [[-10, -50, 0], [-10, 50, 0], [-10, 50, 100], [-10, -50, 100]], [1, 0, 0])
    p = classify(sat(50, 90), [0, 0, 1.5], PlanarMap(pm.facets + [screen]))
    refl = {x.facet_id: x for x in p.reflections}
    assert refl[1].occluded
    assert p.classification is Reception.BLOCKED or p.applied_facet != 1


def test_trace_run_single_los():
    sats = SatTable(np.array([0.0]), np.array(["G01"], dtype=object), np.array([[0, 0, 2e7]]))
    route = RouteTable(np.array([0.0]), np.zeros((1, 3)))
    (p,) = trace_run(sats, route, PlanarMap([]))
    assert p.classification is Reception.LOS


def test_trace_run_order_and_missing(caplog):
    pm = canyon_map()
    sats = SatTable(
        np.array([1.0, 0.0, 1.0, 0.0, 5.0]),
        np.array(["G02", "G02", "G01", "G01", "G01"], dtype=object),
        np.array([sat(50, 90), sat(50, 90), sat(85, 0), sat(85, 0), sat(85, 0)]),
    )
    route = RouteTable(np.array([0.0, 1.0]), np.array([[0, 0, 1.5], [0, 1, 1.5]]))
    out = trace_run(sats, route, pm)
    assert [(p.epoch, p.prn) for p in out] == [(0.0, "G01"), (0.0, "G02"), (1.0, "G01"), (1.0, "G02")]
    assert "without a receiver epoch" in caplog.text


def test_trace_run_scripted_delays():
    pm = canyon_map()
    ys = np.linspace(-100, 100, 21)
    xs = np.linspace(-5, 5, 21)
    route = RouteTable(np.arange(21.0), np.c_[xs, ys, np.full(21, 1.5)])
    s = sat(55, 90)
    sats = SatTable(np.arange(21.0), np.array(["G01"] * 21, dtype=object), np.tile(s, (21, 1)))
    out = trace_run(sats, route, pm)
    for p, r in zip(out, route.pos):
        m = r.copy()
        m[0] = -40 - r[0]
        assert p.classification is Reception.NLOS
        assert abs(p.applied_delay - (np.linalg.norm(s - m) - np.linalg.norm(s - r))) < 1e-6


def test_workers_do_not_change_output(rng):
    pm = canyon_map()
    n = 300
    route = RouteTable(np.arange(n, dtype=float), np.c_[rng.uniform(-15, 15, n), rng.uniform(-150, 150, n), np.full(n, 1.5)])
    dirs = [sat(el, az) for el, az in [(30, 90), (50, 270), (70, 10), (40, 180)]]
    ep = np.repeat(np.arange(n, dtype=float), 4)
    sats = SatTable(ep, np.array(["A", "B", "C", "D"] * n, dtype=object), np.tile(np.array(dirs), (n, 1)))
    a = trace_run(sats, route, pm, workers=1, pairs_per_chunk=50)
    b = trace_run(sats, route, pm, workers=3, pairs_per_chunk=50)
    assert [(p.epoch, p.prn, p.classification, p.applied_delay) for p in a] == [
        (p.epoch, p.prn, p.classification, p.applied_delay) for p in b
    ]


def test_oracle_matches_trivial_cases():
    pm = canyon_map()
    polys = [(f.id, f.boundary) for f in pm.facets]
    for s in (sat(50, 90), sat(80, 90), sat(85, 0), sat(20, 270)):
        o = oracle_classify(s, [0, 0, 1.5], polys)
        p = classify(s, [0, 0, 1.5], pm)
        assert o.classification == p.classification.value
        assert abs(o.applied_delay - p.applied_delay) < 1e-9


def test_filter_keeps_in_band_contributions_identical(rng):
    walls = [rect_plane(0, (20, 0), (0, 1), 400, 0, 60, (-1, 0)), rect_plane(1, (-20, 0), (0, 1), 400, 0, 60, (1, 0))]
    low = rect_plane(2, (-10, 30), (1, 0.2), 10, 0, 5, (0, -1))
    high = rect_plane(3, (10, -30), (0.2, 1), 30, 70, 90, (-1, 0))
    pm = PlanarMap([p.to_facet() for p in (*walls, low, high)])
    fm = filter_by_height(pm, (10, 60))
    assert [f.id for f in fm] == [0, 1]
    fa, ff = FacetArrays.from_map(pm), FacetArrays.from_map(fm)
    for _ in range(200):
        s = sat(rng.uniform(10, 89), rng.uniform(0, 360))
        r = np.array([rng.uniform(-15, 15), rng.uniform(-50, 50), 1.5])
        a, b = classify(s, r, fa), classify(s, r, ff)
        ra = {x.facet_id: (x.point.tobytes(), x.delay) for x in a.reflections if x.facet_id in (0, 1)}
        rb = {x.facet_id: (x.point.tobytes(), x.delay) for x in b.reflections}
        assert ra == rb
        assert tuple(f for f in a.blocking if f in (0, 1)) == b.blocking
