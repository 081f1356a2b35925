import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from planartrace.io import (
    FormatError,
    ObsTable,
    RouteTable,
    RunConfig,
    SatTable,
    fmt,
    load_config,
    read_cloud,
    read_labels,
    read_obs,
    read_paths,
    read_route,
    read_sats,
    write_cloud,
    write_labels,
    write_obs,
    write_paths,
    write_route,
    write_sats,
)
from planartrace.planar_map import PlanarMap
from planartrace.raytrace import trace_run


def test_ascii_ply(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text(
        "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 3\n"
        "property float x\nproperty float y\nproperty float z\nproperty uchar red\n"
        "element face 0\nproperty list uchar int vertex_indices\nend_header\n"
        "0 0 0 255\n1 0 0 0\n0 1 2.5 9\n"
    )
    pts = read_cloud(p)
    np.testing.assert_array_equal(pts, [[0, 0, 0], [1, 0, 0], [0, 1, 2.5]])


@pytest.mark.parametrize(
    "text, line",
    [
        ("ply\nformat binary_little_endian 1.0\nend_header\n", 2),
        ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n1 2\n", 9),
        ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 b 3\n", 8),
        ("ply\nformat ascii 1.0\nbogus\n", 3),
    ],
)
def test_ply_errors_carry_line(tmp_path, text, line):
    p = tmp_path / "bad.ply"
    p.write_text(text)
    with pytest.raises(FormatError, match=f":{line}:"):
        read_cloud(p)


def test_xyz_comments_and_errors(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("# header comment\n1 2 3\n\n# another\n4,5,6\n")
    np.testing.assert_array_equal(read_cloud(p), [[1, 2, 3], [4, 5, 6]])
    p.write_text("1 2 3\n4 5\n")
    with pytest.raises(FormatError, match=":2:"):
        read_cloud(p)
    p.write_text("1 2 3\nnan 1 1\n")
    with pytest.raises(FormatError):
        read_cloud(p)


@pytest.mark.parametrize("suffix", [".ply", ".xyz"])
def test_cloud_round_trip(tmp_path, rng, suffix):
    pts = rng.normal(scale=1e3, size=(500, 3))
    p = tmp_path / f"c{suffix}"
    write_cloud(p, pts, np.arange(500) if suffix == ".ply" else None)
    back = read_cloud(p)
    assert back.tobytes() == pts.tobytes()
    np.testing.assert_allclose(back, pts, rtol=1e-15)


def test_labels_round_trip(tmp_path):
    lab = np.array([0, -1, 5, 5, 2])
    write_labels(tmp_path / "l.txt", lab)
    np.testing.assert_array_equal(read_labels(tmp_path / "l.txt"), lab)
    (tmp_path / "bad.txt").write_text("1\nx\n")
    with pytest.raises(FormatError, match=":2:"):
        read_labels(tmp_path / "bad.txt")


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_is_exact(x):
    assert float(fmt(x)) == x


def test_tables_minimal_and_sorted(tmp_path):
    (tmp_path / "s.csv").write_text("prn,epoch,z,y,x,extra\nG02,1,3,2,1,foo\nG01,1,6,5,4,bar\nG09,0,9,8,7,baz\n")
    s = read_sats(tmp_path / "s.csv")
    assert list(zip(s.epoch, s.prn)) == [(0.0, "G09"), (1.0, "G01"), (1.0, "G02")]
    np.testing.assert_array_equal(s.pos[0], [7, 8, 9])
    (tmp_path / "r.csv").write_text("epoch,x,y,z\n2,1,1,1\n1,0,0,0\n")
    r = read_route(tmp_path / "r.csv")
    assert list(r.epoch) == [1.0, 2.0]
    (tmp_path / "o.csv").write_text("epoch,prn,pseudorange_m\n0,G01,21000000.5\n")
    o = read_obs(tmp_path / "o.csv")
    assert o.pseudorange[0] == 21000000.5


def test_missing_column_is_named(tmp_path):
    (tmp_path / "s.csv").write_text("epoch,prn,x,y\n0,G01,1,2\n")
    with pytest.raises(FormatError, match="z"):
        read_sats(tmp_path / "s.csv")
    (tmp_path / "o.csv").write_text("epoch,prn,pseudorange_m\n0,G01,-5\n")
    with pytest.raises(FormatError):
        read_obs(tmp_path / "o.csv")


def test_table_round_trips(tmp_path, rng):
    n = 50
    sats = SatTable(np.repeat(np.arange(10.0), 5), np.array([f"G{i % 5:02d}" for i in range(n)], dtype=object), rng.normal(size=(n, 3)) * 2e7)
    write_sats(tmp_path / "s.csv", sats)
    back = read_sats(tmp_path / "s.csv")
    assert back.pos.tobytes() == sats.sorted().pos.tobytes()
    route = RouteTable(np.arange(10.0), rng.normal(size=(10, 3)))
    write_route(tmp_path / "r.csv", route)
    assert read_route(tmp_path / "r.csv").pos.tobytes() == route.pos.tobytes()
    obs = ObsTable(sats.epoch, sats.prn, rng.uniform(2e7, 2.5e7, n))
    write_obs(tmp_path / "o.csv", obs)
    assert read_obs(tmp_path / "o.csv").pseudorange.tobytes() == obs.sorted().pseudorange.tobytes()


def test_paths_round_trip(tmp_path):
    sats = SatTable(np.array([0.0]), np.array(["G01"], dtype=object), np.array([[0, 0, 2e7]]))
    paths = trace_run(sats, RouteTable(np.array([0.0]), np.zeros((1, 3))), PlanarMap([]))
    write_paths(tmp_path / "p.csv", paths)
    (row,) = read_paths(tmp_path / "p.csv")
    assert (row.epoch, row.prn, row.classification, row.applied_delay) == (0.0, "G01", "LOS", 0.0)


def test_million_rows_fast(tmp_path):
    n = 1_000_000
    path = tmp_path / "big.csv"
    e = np.arange(n) // 10
    with path.open("w") as fh:
        fh.write("epoch,prn,pseudorange_m\n")
        fh.writelines(f"{a},G{a % 10:02d},{2.1e7 + a}\n" for a in e)
    t0 = time.perf_counter()
    o = read_obs(path)
    assert len(o) == n
    assert time.perf_counter() - t0 < 5.0


def test_config_load(tmp_path):
    (tmp_path / "c.cfg").write_text("# run\nk = 20\nheight_band = 5, 50\nreflection_policy = max  # trailing\n")
    cfg = load_config(tmp_path / "c.cfg")
    assert cfg.k == 20 and cfg.height_band == (5.0, 50.0) and cfg.reflection_policy == "max"
    assert cfg.min_slice_size == 200 and cfg.theta_merge_deg == 10.0 and cfg.spacing_l == 1.0723
    (tmp_path / "c.json").write_text('{"workers": 3, "street_width": 30}')
    assert load_config(tmp_path / "c.json").workers == 3
    (tmp_path / "bad.cfg").write_text("nonsense = 1\n")
    with pytest.raises(ValueError, match="nonsense"):
        load_config(tmp_path / "bad.cfg")
    (tmp_path / "bad2.cfg").write_text("k 20\n")
    with pytest.raises(FormatError, match=":1:"):
        load_config(tmp_path / "bad2.cfg")


@pytest.mark.parametrize(
    "kw",
    [{"k": 2}, {"theta_merge_deg": 0}, {"height_band": (60, 10)}, {"street_width": -1}, {"reflection_policy": "sum"}, {"workers": 0}, {"origin": "95,0"}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RunConfig(**kw)


def test_short_row_reports_file_line(tmp_path):
    (tmp_path / "r.csv").write_text("# comment\nepoch,x,y,z\n\n0,1,2,3\n# more\n1,2\n")
    with pytest.raises(FormatError, match=":6:"):
        read_route(tmp_path / "r.csv")
    (tmp_path / "e.csv").write_text("# only a comment\n")
    with pytest.raises(FormatError, match="empty"):
        read_route(tmp_path / "e.csv")
    (tmp_path / "h.csv").write_text("epoch,x,y,z\n")
    assert len(read_route(tmp_path / "h.csv")) == 0
