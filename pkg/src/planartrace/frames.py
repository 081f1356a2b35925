"""Geodetic, ECEF and local ENU frames on the WGS-84 ellipsoid.

Every geometric stage downstream (segmentation, tracing, margins) works in the
ENU frame of a single run-level origin; this module owns the conversions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


@dataclass(frozen=True)
class GeodeticPoint:
    latitude: float  # degrees
    longitude: float  # degrees
    height: float = 0.0  # meters above the ellipsoid

    def __post_init__(self):
        if not (math.isfinite(self.latitude) and -90.0 <= self.latitude <= 90.0):
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not (math.isfinite(self.longitude) and -180.0 <= self.longitude <= 180.0):
            raise ValueError(f"longitude out of range: {self.longitude}")
        if not math.isfinite(self.height):
            raise ValueError(f"height must be finite: {self.height}")

    @classmethod
    def parse(cls, text: str) -> "GeodeticPoint":
        """Parse ``"lat,lon,height"`` (height optional)."""
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(parts) not in (2, 3):
            raise ValueError(f"expected 'lat,lon[,height]', got {text!r}")
        vals = [float(p) for p in parts]
        return cls(*vals)


def _rotation_ecef_to_enu(lat_deg: float, lon_deg: float) -> np.ndarray:
    lat = math.radians(lat_deg)
    lon = math.radians(lon_deg)
    sl, cl = math.sin(lat), math.cos(lat)
    so, co = math.sin(lon), math.cos(lon)
    return np.array(
        [
            [-so, co, 0.0],
            [-sl * co, -sl * so, cl],
            [cl * co, cl * so, sl],
        ]
    )


def geodetic_to_ecef(p: GeodeticPoint) -> np.ndarray:
    lat = math.radians(p.latitude)
    lon = math.radians(p.longitude)
    s = math.sin(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * s * s)
    return np.array(
        [
            (n + p.height) * math.cos(lat) * math.cos(lon),
            (n + p.height) * math.cos(lat) * math.sin(lon),
            (n * (1.0 - WGS84_E2) + p.height) * s,
        ]
    )


def ecef_to_geodetic(x) -> GeodeticPoint:
    """Inverse of :func:`geodetic_to_ecef` (Bowring start + fixed-point refinement)."""
    x, y, z = (float(v) for v in np.asarray(x, dtype=float))
    lon = math.atan2(y, x)
    p = math.hypot(x, y)
    if p < 1e-9:
        lat = math.copysign(math.pi / 2, z)
        return GeodeticPoint(math.degrees(lat), math.degrees(lon), abs(z) - WGS84_B)
    ep2 = WGS84_E2 / (1.0 - WGS84_E2)
    theta = math.atan2(z * WGS84_A, p * WGS84_B)
    lat = math.atan2(
        z + ep2 * WGS84_B * math.sin(theta) ** 3,
        p - WGS84_E2 * WGS84_A * math.cos(theta) ** 3,
    )
    for _ in range(5):
        s = math.sin(lat)
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * s * s)
        h = p / math.cos(lat) - n
        lat = math.atan2(z, p * (1.0 - WGS84_E2 * n / (n + h)))
    s = math.sin(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * s * s)
    h = p / math.cos(lat) - n
    return GeodeticPoint(math.degrees(lat), math.degrees(lon), h)


@dataclass(frozen=True)
class FrameOrigin:
    """Anchor of the local ENU frame.

    ``rotation`` maps ECEF difference vectors into ENU; ``translation`` is the
    anchor's ECEF position.
    """

    anchor: GeodeticPoint
    rotation: np.ndarray = field(repr=False)
    translation: np.ndarray = field(repr=False)

    @classmethod
    def from_geodetic(cls, anchor: GeodeticPoint) -> "FrameOrigin":
        return cls(
            anchor,
            _rotation_ecef_to_enu(anchor.latitude, anchor.longitude),
            geodetic_to_ecef(anchor),
        )

    @classmethod
    def parse(cls, text: str) -> "FrameOrigin":
        return cls.from_geodetic(GeodeticPoint.parse(text))

    def as_dict(self) -> dict:
        a = self.anchor
        return {"lat": a.latitude, "lon": a.longitude, "h": a.height}


def _finite(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) coordinates, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite coordinates")
    return p


def ecef_to_enu(p, origin: FrameOrigin) -> np.ndarray:
    """ECEF point(s) of shape (..., 3) to ENU relative to ``origin``."""
    p = _finite(p)
    return (p - origin.translation) @ origin.rotation.T


def enu_to_ecef(p, origin: FrameOrigin) -> np.ndarray:
    p = _finite(p)
    return p @ origin.rotation + origin.translation


def elevation_azimuth(enu) -> tuple[np.ndarray, np.ndarray]:
    """Elevation and azimuth (radians, azimuth clockwise from north) of ENU vectors."""
    enu = np.asarray(enu, dtype=float)
    e, n, u = enu[..., 0], enu[..., 1], enu[..., 2]
    el = np.arctan2(u, np.hypot(e, n))
    az = np.mod(np.arctan2(e, n), 2.0 * np.pi)
    return el, az
