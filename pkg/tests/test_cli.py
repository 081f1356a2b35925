import json
import re

import numpy as np
import pytest

from planartrace.cli import main
from planartrace.io import read_paths, read_route, read_sats, write_route, write_sats, RouteTable, SatTable
from planartrace.planar_map import PlanarMap


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def canyon_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("canyon")
    assert main(["synth", "--kind", "canyon", "--out-dir", str(d), "--density", "50", "--noise", "0.05"]) == 0
    return d


def test_segment_synthetic_scene(canyon_dir, capsys, tmp_path):
    code, out, _ = run(
        capsys, "segment", "--cloud", canyon_dir / "cloud.ply", "--out", tmp_path / "map.json",
        "--labels", tmp_path / "labels.txt", "--stats", tmp_path / "spacing.csv",
    )
    assert code == 0 and "facets=6" in out
    pm = PlanarMap.load(tmp_path / "map.json")
    assert len(pm) == 6
    code, out, _ = run(capsys, "stats", "--cloud", canyon_dir / "cloud.ply", "--labels", tmp_path / "labels.txt", "--out", tmp_path / "st.csv")
    assert code == 0 and "clusters=6" in out


def test_trace_empty_map_all_los(capsys, tmp_path):
    PlanarMap([]).save(tmp_path / "empty.json")
    sats = SatTable(np.array([0.0, 0.0, 1.0]), np.array(["G01", "G02", "G01"], dtype=object), np.array([[2.6e7, 0, 0], [0, 2.6e7, 0], [0, 0, 2.6e7]]))
    write_sats(tmp_path / "s.csv", sats)
    write_route(tmp_path / "r.csv", RouteTable(np.array([0.0, 1.0]), np.array([[6.378e6, 0, 0], [6.378e6, 0, 0]])))
    code, out, _ = run(capsys, "trace", "--map", tmp_path / "empty.json", "--sats", tmp_path / "s.csv", "--route", tmp_path / "r.csv", "--out", tmp_path / "p.csv")
    assert code == 0
    rows = read_paths(tmp_path / "p.csv")
    assert len(rows) == 3 and {r.classification for r in rows} == {"LOS"}


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["segment", "--cloud", "x", "--out", "y", "--bogus"])
    assert exc.value.code != 0


def test_failure_removes_partial_outputs(capsys, tmp_path):
    (tmp_path / "cloud.xyz").write_text("".join(f"{i} {i % 7} 0\n" for i in range(50)))
    (tmp_path / "labels.txt").write_text("0\n" * 10)
    out = tmp_path / "st.csv"
    code, _, err = run(capsys, "stats", "--cloud", tmp_path / "cloud.xyz", "--labels", tmp_path / "labels.txt", "--out", out)
    assert code == 1 and "labels" in err and not out.exists()
    code, _, err = run(capsys, "segment", "--cloud", tmp_path / "missing.ply", "--out", tmp_path / "m.json")
    assert code == 1 and not (tmp_path / "m.json").exists()
    code, _, err = run(capsys, "synth", "--out-dir", tmp_path / "bad", "--density", "-1")
    assert code == 1 and not list((tmp_path / "bad").glob("*"))


def test_config_file_and_override(capsys, tmp_path):
    (tmp_path / "run.cfg").write_text("elevation_mask_deg = 90\n")
    code, out, _ = run(capsys, "simulate-heights", "--config", tmp_path / "run.cfg", "--out", tmp_path / "h.csv")
    assert code == 0 and "samples=0" in out
    code, out, _ = run(capsys, "simulate-heights", "--config", tmp_path / "run.cfg", "--elevation-mask-deg", "30", "--out", tmp_path / "h.csv")
    assert code == 0 and float(re.search(r"fraction_in_band=([\d.]+)", out).group(1)) > 0


def test_margins_command(capsys, tmp_path):
    code, out, _ = run(
        capsys, "margins", "--out-translation", tmp_path / "t.csv", "--out-tilt", tmp_path / "r.csv",
        "--out-samples", tmp_path / "s.csv",
    )
    assert code == 0
    tr = float(re.search(r"translation_within=([\d.]+)", out).group(1))
    assert 0 <= tr <= 1
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,prn,wall,height_m")
    n = int(re.search(r"samples=(\d+)", out).group(1))
    assert len(lines) == n + 1


@pytest.fixture(scope="module")
def nlos_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("nlos")
    assert main(["synth", "--kind", "nlos", "--out-dir", str(d), "--epochs", "120", "--density", "4"]) == 0
    return d


def test_end_to_end_pipeline(nlos_dir, capsys, tmp_path):
    d = nlos_dir
    code, out, _ = run(capsys, "segment", "--cloud", d / "cloud.xyz", "--out", tmp_path / "map.json")
    assert code == 0 and "facets=2" in out
    code, out, _ = run(
        capsys, "trace", "--map", tmp_path / "map.json", "--sats", d / "sats.csv", "--route", d / "route.csv",
        "--out", tmp_path / "paths.csv",
    )
    assert code == 0 and "NLOS=" in out
    code, out, _ = run(
        capsys, "correct", "--obs", d / "obs.csv", "--paths", tmp_path / "paths.csv", "--sats", d / "sats.csv",
        "--truth", d / "route.csv", "--out-fixes", tmp_path / "fixes.csv", "--out-errors", tmp_path / "err.csv",
    )
    assert code == 0
    raw = float(re.search(r"uncorrected: 3d_rms=([\d.]+)", out).group(1))
    fixed = float(re.search(r"\ncorrected: 3d_rms=([\d.]+)", "\n" + out).group(1))
    assert fixed <= 0.2 * raw
    truth = json.loads((d / "truth.json").read_text())
    assert truth["injections"] and len(truth["facets"]) == 2


def test_trace_byte_identical_across_workers(nlos_dir, capsys, tmp_path):
    d = nlos_dir
    outs = []
    for w in (1, 2, 4):
        p = tmp_path / f"paths{w}.csv"
        code, _, _ = run(capsys, "trace", "--map", d / "truth.json", "--sats", d / "sats.csv", "--route", d / "route.csv", "--out", p, "--workers", w)
        assert code == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1] == outs[2]
