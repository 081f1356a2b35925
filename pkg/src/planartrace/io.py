"""Text file formats: point clouds, delimited tables and the run configuration."""

from __future__ import annotations

import csv
import gc
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .frames import FrameOrigin, GeodeticPoint

DEFAULT_ORIGIN = "31.24416,121.50347,10"


class FormatError(ValueError):
    """Malformed input file; message carries path and line number."""


def fmt(x) -> str:
    """Shortest exact text for a number (integral floats print without '.0')."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isfinite(x) and x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


# ---------------------------------------------------------------- point clouds


def _read_ply(lines: list[str], path) -> np.ndarray:
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    fmt_seen = False
    header_end = None
    for ln, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise FormatError(f"{path}:{ln}: only ascii PLY is supported")
            fmt_seen = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise FormatError(f"{path}:{ln}: bad element line")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                if n_vertex is not None:
                    raise FormatError(f"{path}:{ln}: duplicate vertex element")
                try:
                    n_vertex = int(tok[2])
                except ValueError:
                    raise FormatError(f"{path}:{ln}: bad vertex count {tok[2]!r}") from None
        elif tok[0] == "property":
            if in_vertex:
                if tok[1] == "list":
                    raise FormatError(f"{path}:{ln}: list properties on vertices unsupported")
                props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = ln
            break
        else:
            raise FormatError(f"{path}:{ln}: unexpected header line {raw.strip()!r}")
    if header_end is None:
        raise FormatError(f"{path}: missing end_header")
    if not fmt_seen or n_vertex is None:
        raise FormatError(f"{path}: header lacks format or vertex element")
    try:
        cols = [props.index(c) for c in "xyz"]
    except ValueError:
        raise FormatError(f"{path}: vertex element needs x, y and z properties") from None
    out = np.empty((n_vertex, 3))
    body = lines[header_end:]
    if len(body) < n_vertex:
        raise FormatError(f"{path}: expected {n_vertex} vertices, found {len(body)}")
    for i in range(n_vertex):
        ln = header_end + i + 1
        tok = body[i].split()
        if len(tok) < len(props):
            raise FormatError(f"{path}:{ln}: expected {len(props)} values")
        try:
            out[i] = [float(tok[c]) for c in cols]
        except ValueError:
            raise FormatError(f"{path}:{ln}: non-numeric vertex value") from None
    return out


def _read_xyz(lines: list[str], path) -> np.ndarray:
    rows = []
    for ln, raw in enumerate(lines, start=1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.replace(",", " ").split()
        if len(tok) < 3:
            raise FormatError(f"{path}:{ln}: expected at least x y z")
        try:
            rows.append([float(t) for t in tok[:3]])
        except ValueError:
            if not rows and tok[0].lower() == "x":
                continue  # header row
            raise FormatError(f"{path}:{ln}: non-numeric coordinate") from None
    return np.array(rows, dtype=float).reshape(-1, 3)


def read_cloud(path) -> np.ndarray:
    """ASCII PLY or delimited xyz text to an (N, 3) array; row i is point id i."""
    path = Path(path)
    lines = path.read_text().splitlines()
    pts = _read_ply(lines, path) if lines and lines[0].strip() == "ply" else _read_xyz(lines, path)
    if not np.all(np.isfinite(pts)):
        raise FormatError(f"{path}: non-finite coordinates")
    return pts


def write_cloud(path, points, labels=None) -> None:
    pts = np.asarray(points, dtype=float)
    path = Path(path)
    if path.suffix.lower() == ".ply":
        head = ["ply", "format ascii 1.0", f"element vertex {len(pts)}"]
        head += [f"property double {c}" for c in "xyz"]
        if labels is not None:
            head.append("property int label")
        head.append("end_header")
        body = (
            [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
            if labels is None
            else [f"{x!r} {y!r} {z!r} {int(l)}" for (x, y, z), l in zip(pts.tolist(), labels)]
        )
        path.write_text("\n".join(head + body) + "\n")
    else:
        path.write_text("# x y z\n" + "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()))


def write_labels(path, labels) -> None:
    """One integer label per line, in point order (-1 = unassigned)."""
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def read_labels(path) -> np.ndarray:
    out = []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        try:
            out.append(int(s))
        except ValueError:
            raise FormatError(f"{path}:{ln}: expected an integer label") from None
    return np.array(out, dtype=np.int64)


# ------------------------------------------------------------ delimited tables


@contextmanager
def _gc_paused():
    # millions of short-lived row lists otherwise trigger repeated full collections
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def _read_columns(path, required: list[str], optional: list[str] = ()) -> dict[str, list[str]]:
    with _gc_paused():
        return _columns(Path(path), required, optional)


def _columns(path: Path, required, optional) -> dict[str, list[str]]:
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    keep = [i for i, row in enumerate(lines) if row.strip() and not row.lstrip().startswith("#")]
    if not keep:
        raise FormatError(f"{path}: empty file")
    rows = list(csv.reader(lines[i] for i in keep))
    header = [h.strip() for h in rows[0]]
    missing = [c for c in required if c not in header]
    if missing:
        raise FormatError(f"{path}: missing required column(s): {', '.join(missing)}")
    wanted = [c for c in list(required) + list(optional) if c in header]
    pos = [header.index(c) for c in wanted]
    width = max(pos) + 1
    rows = rows[1:]
    short = [k for k, row in enumerate(rows) if len(row) < width]
    if short:
        raise FormatError(f"{path}:{keep[short[0] + 1] + 1}: expected at least {width} fields")
    if not rows:
        return {c: [] for c in wanted}
    columns = list(zip(*(row[:width] for row in rows)))
    return {c: [v.strip() for v in columns[p]] for c, p in zip(wanted, pos)}


def _floats(path, name, values) -> np.ndarray:
    try:
        return np.array(values, dtype=float)
    except ValueError:
        raise FormatError(f"{path}: column {name!r} is not numeric") from None


@dataclass
class SatTable:
    """Satellite positions per epoch; ``pos`` frame is set by context."""

    epoch: np.ndarray
    prn: np.ndarray
    pos: np.ndarray

    def __len__(self):
        return len(self.epoch)

    @classmethod
    def from_records(cls, recs) -> "SatTable":
        recs = list(recs)
        return cls(
            np.array([float(r.epoch) for r in recs]),
            np.array([str(r.prn) for r in recs], dtype=object),
            np.array([r.position for r in recs], dtype=float).reshape(-1, 3),
        )

    def sorted(self) -> "SatTable":
        o = np.lexsort((self.prn.astype(str), self.epoch))
        return SatTable(self.epoch[o], self.prn[o], self.pos[o])

    def transformed(self, fn) -> "SatTable":
        return SatTable(self.epoch.copy(), self.prn.copy(), fn(self.pos))

    def lookup(self) -> dict:
        return {(float(e), str(p)): x for e, p, x in zip(self.epoch, self.prn, self.pos)}


@dataclass
class RouteTable:
    epoch: np.ndarray
    pos: np.ndarray

    def __len__(self):
        return len(self.epoch)

    @classmethod
    def from_records(cls, recs) -> "RouteTable":
        recs = list(recs)
        return cls(
            np.array([float(r.epoch) for r in recs]),
            np.array([r.position for r in recs], dtype=float).reshape(-1, 3),
        )

    def sorted(self) -> "RouteTable":
        o = np.argsort(self.epoch, kind="stable")
        return RouteTable(self.epoch[o], self.pos[o])

    def transformed(self, fn) -> "RouteTable":
        return RouteTable(self.epoch.copy(), fn(self.pos))


@dataclass
class ObsTable:
    epoch: np.ndarray
    prn: np.ndarray
    pseudorange: np.ndarray

    def __len__(self):
        return len(self.epoch)

    def sorted(self) -> "ObsTable":
        o = np.lexsort((self.prn.astype(str), self.epoch))
        return ObsTable(self.epoch[o], self.prn[o], self.pseudorange[o])

    def subset(self, mask) -> "ObsTable":
        return ObsTable(self.epoch[mask], self.prn[mask], self.pseudorange[mask])


def read_sats(path) -> SatTable:
    c = _read_columns(path, ["epoch", "prn", "x", "y", "z"])
    pos = np.stack([_floats(path, k, c[k]) for k in "xyz"], axis=1)
    return SatTable(_floats(path, "epoch", c["epoch"]), np.array(c["prn"], dtype=object), pos).sorted()


def read_route(path) -> RouteTable:
    c = _read_columns(path, ["epoch", "x", "y", "z"])
    pos = np.stack([_floats(path, k, c[k]) for k in "xyz"], axis=1)
    return RouteTable(_floats(path, "epoch", c["epoch"]), pos).sorted()


def read_obs(path) -> ObsTable:
    c = _read_columns(path, ["epoch", "prn", "pseudorange_m"])
    pr = _floats(path, "pseudorange_m", c["pseudorange_m"])
    if np.any(~np.isfinite(pr)) or np.any(pr <= 0):
        raise FormatError(f"{path}: pseudoranges must be positive and finite")
    return ObsTable(_floats(path, "epoch", c["epoch"]), np.array(c["prn"], dtype=object), pr).sorted()


def write_table(path, header: list[str], rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, int, np.floating, np.integer)) else v for v in row])


def write_sats(path, table: SatTable) -> None:
    write_table(
        path,
        ["epoch", "prn", "x", "y", "z"],
        ([e, p, *x] for e, p, x in zip(table.epoch, table.prn, table.pos.tolist())),
    )


def write_route(path, table: RouteTable) -> None:
    write_table(path, ["epoch", "x", "y", "z"], ([e, *x] for e, x in zip(table.epoch, table.pos.tolist())))


def write_obs(path, table: ObsTable) -> None:
    write_table(
        path,
        ["epoch", "prn", "pseudorange_m"],
        zip(table.epoch.tolist(), table.prn.tolist(), table.pseudorange.tolist()),
    )


PATH_HEADER = [
    "epoch",
    "prn",
    "classification",
    "applied_delay_m",
    "n_reflections",
    "blocking_facets",
    "applied_facet",
    "n_occluded",
    "reflection_heights_m",
]


def write_paths(path, paths) -> None:
    rows = []
    for p in paths:
        usable = p.usable
        rows.append(
            [
                p.epoch,
                p.prn,
                p.classification.value,
                p.applied_delay,
                len(usable),
                ";".join(str(f) for f in p.blocking),
                p.applied_facet,
                len(p.reflections) - len(usable),
                ";".join(fmt(r.point[2]) for r in usable),
            ]
        )
    write_table(path, PATH_HEADER, rows)


@dataclass
class PathRow:
    epoch: float
    prn: str
    classification: str
    applied_delay: float
    n_reflections: int
    blocking: tuple[int, ...]


def read_paths(path) -> list[PathRow]:
    c = _read_columns(
        path, ["epoch", "prn", "classification", "applied_delay_m"], ["n_reflections", "blocking_facets"]
    )
    ep = _floats(path, "epoch", c["epoch"])
    dl = _floats(path, "applied_delay_m", c["applied_delay_m"])
    nref = c.get("n_reflections", ["0"] * len(ep))
    blk = c.get("blocking_facets", [""] * len(ep))
    return [
        PathRow(float(e), p, k, float(d), int(n or 0), tuple(int(b) for b in s.split(";") if b))
        for e, p, k, d, n, s in zip(ep, c["prn"], c["classification"], dl, nref, blk)
    ]


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    origin: str = DEFAULT_ORIGIN
    k: int = 30
    min_slice_size: int = 200
    premerge_min_size: int = 5
    theta_merge_deg: float = 10.0
    flatness_alpha: float = 1.0
    height_band: tuple[float, float] = (10.0, 60.0)
    street_width: float = 40.0
    receiver_height: float = 1.5
    elevation_mask_deg: float = 30.0
    spacing_l: float = 1.0723
    reflection_policy: str = "min"
    seed: int = 0
    workers: int = 1
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        FrameOrigin.from_geodetic(GeodeticPoint.parse(self.origin))
        if self.k < 4:
            raise ValueError("k must be >= 4")
        if self.min_slice_size < 1 or self.premerge_min_size < 3:
            raise ValueError("slice sizes must be positive (premerge >= 3)")
        if not 0 < self.theta_merge_deg < 90:
            raise ValueError("theta_merge_deg must be in (0, 90)")
        lo, hi = self.height_band
        if not lo <= hi:
            raise ValueError("height_band must be ordered")
        if self.street_width <= 0:
            raise ValueError("street_width must be positive")
        if not 0 <= self.elevation_mask_deg <= 90:
            raise ValueError("elevation_mask_deg must be in [0, 90]")
        if self.spacing_l < 0:
            raise ValueError("spacing_l must be >= 0")
        if self.reflection_policy not in ("min", "max", "all"):
            raise ValueError("reflection_policy must be min, max or all")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def frame_origin(self) -> FrameOrigin:
        return FrameOrigin.parse(self.origin)

    @property
    def theta_merge(self) -> float:
        return math.radians(self.theta_merge_deg)

    def updated(self, **kw) -> "RunConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        d["height_band"] = list(d["height_band"])
        return d


def _coerce(name: str, value):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types or name == "extra":
        raise ValueError(f"unknown config key {name!r}")
    t = types[name]
    if name == "height_band":
        if isinstance(value, str):
            value = [v for v in value.replace(";", ",").split(",") if v.strip()]
        lo, hi = (float(v) for v in value)
        return (lo, hi)
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    return str(value)


def load_config(path) -> RunConfig:
    """Flat ``key = value`` lines or a JSON object."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for ln, line in enumerate(text.splitlines(), start=1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise FormatError(f"{path}:{ln}: expected key = value")
            k, v = s.split("=", 1)
            raw[k.strip()] = v.strip()
    return RunConfig(**{k: _coerce(k, v) for k, v in raw.items()})
