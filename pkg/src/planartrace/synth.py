"""Synthetic street canyons with known planes, plus injected-NLOS scenarios."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frames import FrameOrigin, enu_to_ecef
from .io import DEFAULT_ORIGIN, ObsTable, RouteTable, SatTable
from .oracle import OracleFacet, oracle_classify
from .planar_map import Facet, PlanarMap, Plane

logger = logging.getLogger(__name__)


@dataclass
class TruthPlane:
    """Rectangular generating facet; ``corners`` are counterclockwise seen from +normal."""

    id: int
    normal: np.ndarray
    anchor: np.ndarray
    corners: np.ndarray

    def to_facet(self) -> Facet:
        n = np.asarray(self.normal, dtype=float)
        plane = Plane(n, np.asarray(self.anchor, dtype=float), -float(n @ self.anchor))
        z = self.corners[:, 2]
        return Facet(self.id, plane, np.asarray(self.corners, dtype=float), (float(z.min()), float(z.max())), self.id)

    def oracle(self) -> OracleFacet:
        return OracleFacet(self.id, self.corners)


@dataclass
class Injection:
    epoch: float
    prn: str
    facet: int
    delay: float


@dataclass
class SceneTruth:
    planes: list[TruthPlane]
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    injections: list[Injection] = field(default_factory=list)
    origin: FrameOrigin | None = None

    def to_planar_map(self) -> PlanarMap:
        return PlanarMap([p.to_facet() for p in self.planes], self.origin, {"source": "synthetic truth"})

    def oracle_facets(self) -> list[OracleFacet]:
        return [p.oracle() for p in self.planes]

    def to_dict(self) -> dict:
        doc = self.to_planar_map().to_dict()
        doc["labels"] = [int(v) for v in self.labels]
        doc["injections"] = [
            {"epoch": float(i.epoch), "prn": i.prn, "facet": int(i.facet), "delay": float(i.delay)}
            for i in self.injections
        ]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneTruth":
        pmap = PlanarMap.from_dict(doc)
        planes = [TruthPlane(f.id, f.plane.normal, f.plane.anchor, np.asarray(f.boundary)) for f in pmap.facets]
        inj = [Injection(float(d["epoch"]), str(d["prn"]), int(d["facet"]), float(d["delay"])) for d in doc.get("injections", [])]
        return cls(planes, np.array(doc.get("labels", []), dtype=np.int64), inj, pmap.origin)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "SceneTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


def rect_plane(pid: int, base_center, along, length: float, z0: float, z1: float, facing) -> TruthPlane:
    """Vertical rectangle centred on ``base_center`` (x, y), spanning ``along`` and z0..z1.

    ``facing`` is the horizontal direction the outward normal should point to.
    """
    t = np.array([along[0], along[1], 0.0], dtype=float)
    t /= np.linalg.norm(t)
    n = np.array([t[1], -t[0], 0.0])
    if n @ np.array([facing[0], facing[1], 0.0]) < 0:
        n = -n
    c = np.array([base_center[0], base_center[1], 0.0])
    half = 0.5 * length * t
    up = np.array([0.0, 0.0, 1.0])
    corners = np.array([c - half + z0 * up, c + half + z0 * up, c + half + z1 * up, c - half + z1 * up])
    e0, e1 = corners[1] - corners[0], corners[2] - corners[1]
    if np.cross(e0, e1) @ n < 0:
        corners = corners[::-1].copy()
    return TruthPlane(pid, n, corners[0].copy(), corners)


def sample_rectangle(plane: TruthPlane, density: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Stratified samples: exactly round(density * area) points, row-major.

    Rows run along the first edge of the rectangle; each point is jittered
    inside its cell and pushed off the plane by N(0, sigma).
    """
    c = plane.corners
    eu, ev = c[1] - c[0], c[3] - c[0]
    lu, lv = float(np.linalg.norm(eu)), float(np.linalg.norm(ev))
    n_pts = int(round(density * lu * lv))
    if n_pts == 0:
        return np.zeros((0, 3))
    rows = max(1, int(round(math.sqrt(n_pts * lv / lu))))
    bounds = (np.arange(rows + 1) * n_pts) // rows
    u_parts, v_parts = [], []
    for i in range(rows):
        m = int(bounds[i + 1] - bounds[i])
        u_parts.append((np.arange(m) + rng.random(m)) / m)
        v_parts.append((i + rng.random(m)) / rows)
    u = np.concatenate(u_parts)
    v = np.concatenate(v_parts)
    pts = c[0] + u[:, None] * eu + v[:, None] * ev
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, n_pts)[:, None] * plane.normal
    return pts


def canyon_planes(
    n_buildings: int = 6,
    street_width: float = 40.0,
    wall_length: float = 30.0,
    wall_height: float = 10.0,
    gap: float = 10.0,
    yaw_max_deg: float = 10.0,
    rng: np.random.Generator | None = None,
) -> list[TruthPlane]:
    """Facades alternating between the two sides of a north-south street.

    Building k sits on the east side when k is even. Each facade is yawed by a
    uniform angle in [-yaw_max, yaw_max] about its vertical centre line and
    faces the street.
    """
    rng = rng or np.random.default_rng(0)
    planes = []
    per_side = (n_buildings + 1) // 2
    span = per_side * wall_length + (per_side - 1) * gap
    for k in range(n_buildings):
        side = 1.0 if k % 2 == 0 else -1.0
        j = k // 2
        yc = -span / 2 + wall_length / 2 + j * (wall_length + gap)
        yaw = math.radians(rng.uniform(-yaw_max_deg, yaw_max_deg)) if yaw_max_deg > 0 else 0.0
        along = (math.sin(yaw), math.cos(yaw))
        planes.append(rect_plane(k, (side * street_width / 2, yc), along, wall_length, 0.0, wall_height, (-side, 0.0)))
    return planes


def generate_canyon(
    n_buildings: int = 6,
    street_width: float = 40.0,
    noise_sigma: float = 0.05,
    density: float = 50.0,
    seed: int = 0,
    wall_length: float = 30.0,
    wall_height: float = 10.0,
    gap: float = 10.0,
    yaw_max_deg: float = 10.0,
    origin: FrameOrigin | None = None,
) -> tuple[np.ndarray, SceneTruth]:
    """Point cloud of a synthetic canyon and its generating planes."""
    if noise_sigma < 0 or density <= 0:
        raise ValueError("noise_sigma must be >= 0 and density > 0")
    rng = np.random.default_rng(seed)
    planes = canyon_planes(n_buildings, street_width, wall_length, wall_height, gap, yaw_max_deg, rng)
    clouds, labels = [], []
    for p in planes:
        pts = sample_rectangle(p, density, noise_sigma, rng)
        clouds.append(pts)
        labels.append(np.full(len(pts), p.id, dtype=np.int64))
    pts = np.concatenate(clouds) if clouds else np.zeros((0, 3))
    return pts, SceneTruth(planes, np.concatenate(labels) if labels else np.zeros(0, np.int64), [], origin)


def random_scene(rng: np.random.Generator, street_width: float = 40.0) -> SceneTruth:
    """Small canyon with random facade heights, lengths and yaws, for oracle checks."""
    n = int(rng.integers(2, 9))
    planes = []
    for k in range(n):
        side = 1.0 if k % 2 == 0 else -1.0
        yaw = math.radians(rng.uniform(-15, 15))
        yc = rng.uniform(-60, 60)
        x = side * (street_width / 2 + rng.uniform(-3, 3))
        planes.append(
            rect_plane(
                k,
                (x, yc),
                (math.sin(yaw), math.cos(yaw)),
                float(rng.uniform(10, 60)),
                0.0,
                float(rng.uniform(5, 80)),
                (-side, 0.0),
            )
        )
    # occasionally a cross wall closing the street
    if rng.random() < 0.3:
        planes.append(rect_plane(n, (0.0, float(rng.uniform(40, 90))), (1.0, 0.0), street_width, 0.0, float(rng.uniform(5, 40)), (0.0, -1.0)))
    return SceneTruth(planes)


def random_direction_sats(rng: np.random.Generator, n: int, min_el_deg: float = 5.0, radius: float = 2.2e7) -> np.ndarray:
    el = np.radians(rng.uniform(min_el_deg, 89.0, n))
    az = rng.uniform(0, 2 * np.pi, n)
    return radius * np.stack([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)], axis=1)


def sat_from_angles(el_deg: float, az_deg: float, radius: float = 2.2e7) -> np.ndarray:
    el, az = math.radians(el_deg), math.radians(az_deg)
    return radius * np.array([math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el)])


# ----------------------------------------------------------- NLOS scenario


@dataclass
class NlosScenario:
    truth: SceneTruth
    origin: FrameOrigin
    sats_ecef: SatTable
    route_ecef: RouteTable
    obs: ObsTable
    clean_obs: ObsTable
    clock_bias: np.ndarray
    sats_enu: dict  # prn -> ENU position
    route_enu: np.ndarray


# (elevation, azimuth) in degrees; the first four sit across the street at
# elevations low enough to be hidden by a 60 m facade
NLOS_GEOMETRY = [(50.0, 90.0), (60.0, 70.0), (65.0, 100.0), (55.0, 260.0)]
LOS_GEOMETRY = [(80.0, 30.0), (70.0, 200.0), (35.0, 0.0), (40.0, 180.0), (75.0, 315.0), (85.0, 135.0)]


def nlos_scenario(
    n_epochs: int = 600,
    street_width: float = 40.0,
    wall_height: float = 60.0,
    speed: float = 0.5,
    receiver_height: float = 1.5,
    noise_sigma: float = 0.0,
    clock_bias0: float = 30.0,
    seed: int = 0,
    origin: str | FrameOrigin = DEFAULT_ORIGIN,
) -> NlosScenario:
    """Receiver driving north along a two-wall canyon under ten static satellites.

    Four satellites are only received through the facade opposite them; their
    pseudoranges carry the exact excess path of that bounce. Truth tables are in
    ECEF, the map and the injections in the local ENU frame.
    """
    origin = origin if isinstance(origin, FrameOrigin) else FrameOrigin.parse(origin)
    rng = np.random.default_rng(seed)
    route_len = speed * (n_epochs - 1)
    wall_len = route_len + 200.0
    planes = [
        rect_plane(0, (street_width / 2, 0.0), (0.0, 1.0), wall_len, 0.0, wall_height, (-1.0, 0.0)),
        rect_plane(1, (-street_width / 2, 0.0), (0.0, 1.0), wall_len, 0.0, wall_height, (1.0, 0.0)),
    ]
    oracle = [p.oracle() for p in planes]
    epochs = np.arange(n_epochs, dtype=float)
    y = -route_len / 2 + speed * epochs
    x = 2.0 * np.sin(2 * np.pi * epochs / 200.0)  # weave a little so delays vary
    route = np.stack([x, y, np.full(n_epochs, receiver_height)], axis=1)
    geoms = NLOS_GEOMETRY + LOS_GEOMETRY
    prns = [f"G{i + 1:02d}" for i in range(len(geoms))]
    sats_enu = {p: sat_from_angles(el, az) for p, (el, az) in zip(prns, geoms)}
    sats_ecef_pos = {p: enu_to_ecef(v, origin) for p, v in sats_enu.items()}
    route_ecef = enu_to_ecef(route, origin)
    bias = clock_bias0 + 0.01 * epochs
    injections = []
    sat_rec, obs_rec, clean_rec = [], [], []
    for k, e in enumerate(epochs):
        for p in prns:
            res = oracle_classify(sats_enu[p], route[k], oracle)
            delay = 0.0
            if res.classification == "NLOS":
                facet = min((d, f) for f, (d, occ) in res.reflections.items() if not occ)[1]
                delay = res.applied_delay
                injections.append(Injection(float(e), p, facet, delay))
            elif res.classification == "Blocked":
                continue
            s = sats_ecef_pos[p]
            rho = float(np.linalg.norm(s - route_ecef[k])) + bias[k]
            sat_rec.append((float(e), p, s))
            clean_rec.append((float(e), p, rho + delay))
            obs_rec.append((float(e), p, rho + delay + (rng.normal(0.0, noise_sigma) if noise_sigma > 0 else 0.0)))
    n_nlos = len({i.prn for i in injections})
    logger.info("scenario: %d injections on %d satellites", len(injections), n_nlos)

    def obs_table(rec):
        return ObsTable(
            np.array([r[0] for r in rec]), np.array([r[1] for r in rec], dtype=object), np.array([r[2] for r in rec])
        )

    truth = SceneTruth(planes, np.zeros(0, np.int64), injections, origin)
    return NlosScenario(
        truth,
        origin,
        SatTable(
            np.array([r[0] for r in sat_rec]),
            np.array([r[1] for r in sat_rec], dtype=object),
            np.array([r[2] for r in sat_rec], dtype=float).reshape(-1, 3),
        ),
        RouteTable(epochs.copy(), route_ecef),
        obs_table(obs_rec),
        obs_table(clean_rec),
        bias,
        sats_enu,
        route,
    )


def scenario_cloud(scn: NlosScenario, density: float = 4.0, noise_sigma: float = 0.05, seed: int = 0) -> np.ndarray:
    """Point cloud sampled from the scenario's facades."""
    rng = np.random.default_rng(seed)
    return np.concatenate([sample_rectangle(p, density, noise_sigma, rng) for p in scn.truth.planes])


# ----------------------------------------------------------- throughput map


def synthetic_map(
    n_facets: int = 500,
    in_band_fraction: float = 0.2,
    band: tuple[float, float] = (10.0, 60.0),
    extent: float = 400.0,
    seed: int = 0,
) -> PlanarMap:
    """Random vertical panels; a set share of them overlaps the height band.

    Out-of-band panels are either low (top below the band) or high (bottom
    above it).
    """
    rng = np.random.default_rng(seed)
    lo, hi = band
    n_in = int(round(n_facets * in_band_fraction))
    kinds = np.array(["in"] * n_in + ["out"] * (n_facets - n_in))
    rng.shuffle(kinds)
    planes = []
    for k, kind in enumerate(kinds):
        cx, cy = rng.uniform(-extent / 2, extent / 2, 2)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(5, 40)
        if kind == "in":
            z0, z1 = 0.0, rng.uniform(lo + 1, hi + 40)
        elif rng.random() < 0.5:
            z0, z1 = 0.0, rng.uniform(1.0, lo - 1.0)
        else:
            z0 = rng.uniform(hi + 1.0, hi + 40.0)
            z1 = z0 + rng.uniform(5.0, 40.0)
        facing = (math.cos(ang + np.pi / 2), math.sin(ang + np.pi / 2))
        planes.append(rect_plane(k, (cx, cy), (math.cos(ang), math.sin(ang)), length, z0, z1, facing))
    return SceneTruth(planes).to_planar_map()
