"""Street-canyon reflection heights and tolerable wall translation / tilt.

The canyon is the ENU frame with the street running north-south, walls at
``x = +width/2`` ("+" wall) and ``x = -width/2`` ("-" wall), and the receiver at
``(a, b, c)``. Formulas for the "-" wall are obtained by mirroring the scene in
x, so every closed form below is written for the "+" wall only.

The closed-form margins are reproduced as printed and always reported next to a
bisection oracle that perturbs the wall and re-solves the mirror geometry.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .frames import FrameOrigin, elevation_azimuth, ecef_to_enu

logger = logging.getLogger(__name__)

GM_EARTH = 3.986004418e14
OMEGA_EARTH = 7.2921151467e-5


@dataclass(frozen=True)
class CanyonConfig:
    street_width: float = 40.0
    receiver: tuple[float, float, float] = (0.0, 0.0, 1.5)
    wall: int = +1

    def __post_init__(self):
        if self.street_width <= 0:
            raise ValueError("street width must be positive")
        if abs(self.receiver[0]) >= self.street_width / 2:
            raise ValueError("receiver must be between the walls")
        if self.wall not in (1, -1):
            raise ValueError("wall must be +1 or -1")

    def for_wall(self, wall: int) -> "CanyonConfig":
        return CanyonConfig(self.street_width, self.receiver, wall)


def _mirrored(sat, cfg: CanyonConfig):
    """Satellite coordinates and receiver x in the '+' wall frame."""
    s = np.asarray(sat, dtype=float)
    xs = cfg.wall * s[..., 0]
    a = cfg.wall * cfg.receiver[0]
    return xs, s[..., 1], s[..., 2], a


def reflection_height(sat, cfg: CanyonConfig) -> np.ndarray:
    """Height of the reflection point on the selected wall (closed form).

    Undefined samples (zero denominator) come back as NaN.
    """
    w = cfg.street_width
    c = cfg.receiver[2]
    xs, _, zs, a = _mirrored(sat, cfg)
    den = w - a - xs
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(den != 0, (w / 2 - xs) / den * (c - zs) + zs, np.nan)
    return h


def height_from_line(sat, cfg: CanyonConfig) -> np.ndarray:
    """z where the line from the satellite to the mirrored receiver meets the wall."""
    w = cfg.street_width
    b, c = cfg.receiver[1], cfg.receiver[2]
    xs, ys, zs, a = _mirrored(sat, cfg)
    mx = w - a  # mirror of the receiver through x = w/2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w / 2 - xs) / (mx - xs)
    return zs + t * (c - zs)


# ------------------------------------------------------------ constellation


@dataclass
class Constellation:
    """Satellite samples seen from one receiver."""

    epoch: np.ndarray
    prn: np.ndarray
    ecef: np.ndarray
    enu: np.ndarray
    elevation: np.ndarray
    azimuth: np.ndarray

    def __len__(self):
        return len(self.epoch)

    def masked(self, mask_deg: float) -> "Constellation":
        keep = self.elevation > math.radians(mask_deg)
        return Constellation(*(getattr(self, k)[keep] for k in ("epoch", "prn", "ecef", "enu", "elevation", "azimuth")))


def walker_ecef(
    t,
    n_sats: int = 24,
    n_planes: int = 6,
    phasing: int = 1,
    inclination_deg: float = 55.0,
    semi_major_axis: float = 26_560e3,
    raan0_deg: float = 0.0,
) -> np.ndarray:
    """ECEF positions (len(t), n_sats, 3) of a circular Walker delta pattern."""
    if n_sats % n_planes:
        raise ValueError("n_sats must be a multiple of n_planes")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    per_plane = n_sats // n_planes
    mean_motion = math.sqrt(GM_EARTH / semi_major_axis**3)
    inc = math.radians(inclination_deg)
    k = np.repeat(np.arange(n_planes), per_plane)
    j = np.tile(np.arange(per_plane), n_planes)
    raan = np.radians(raan0_deg) + 2 * np.pi * k / n_planes
    u0 = 2 * np.pi * j / per_plane + 2 * np.pi * phasing * k / n_sats
    u = u0[None, :] + mean_motion * t[:, None]
    xo = semi_major_axis * np.cos(u)
    yo = semi_major_axis * np.sin(u)
    x = xo * np.cos(raan) - yo * math.cos(inc) * np.sin(raan)
    y = xo * np.sin(raan) + yo * math.cos(inc) * np.cos(raan)
    z = yo * math.sin(inc)
    th = OMEGA_EARTH * t[:, None]
    xe = x * np.cos(th) + y * np.sin(th)
    ye = -x * np.sin(th) + y * np.cos(th)
    return np.stack([xe, ye, z], axis=-1)


def orbital_period(semi_major_axis: float = 26_560e3) -> float:
    return 2 * math.pi * math.sqrt(semi_major_axis**3 / GM_EARTH)


def synth_constellation(
    origin: FrameOrigin,
    mask_deg: float = 30.0,
    step_s: float = 60.0,
    duration_s: float | None = None,
    receiver_enu=(0.0, 0.0, 0.0),
    **walker,
) -> Constellation:
    """Walker constellation sampled over one orbital period, above the mask.

    ENU coordinates are relative to ``origin``; elevation is measured at
    ``receiver_enu``.
    """
    sma = walker.get("semi_major_axis", 26_560e3)
    duration = orbital_period(sma) if duration_s is None else duration_s
    t = np.arange(0.0, duration, step_s)
    pos = walker_ecef(t, **walker)
    n = pos.shape[1]
    epoch = np.repeat(t, n)
    prn = np.array([f"W{i + 1:02d}" for i in range(n)] * len(t), dtype=object)
    ecef = pos.reshape(-1, 3)
    enu = ecef_to_enu(ecef, origin)
    el, az = elevation_azimuth(enu - np.asarray(receiver_enu, dtype=float))
    return Constellation(epoch, prn, ecef, enu, el, az).masked(mask_deg)


# ------------------------------------------------------------ height histogram


@dataclass
class Histogram:
    edges: np.ndarray  # len(counts) + 1; the last edge may be inf
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    def rows(self):
        for lo, hi, c, f in zip(self.edges[:-1], self.edges[1:], self.counts, self.fractions):
            yield float(lo), float(hi), int(c), float(f)


def histogram(values, edges) -> Histogram:
    v = np.asarray(values, dtype=float)
    edges = np.asarray(edges, dtype=float)
    idx = np.searchsorted(edges, v, side="right") - 1
    idx = np.clip(idx, 0, len(edges) - 2)
    return Histogram(edges, np.bincount(idx, minlength=len(edges) - 1))


@dataclass
class HeightStudy:
    heights: np.ndarray
    wall: np.ndarray
    sample: np.ndarray  # index into the constellation
    histogram: Histogram
    band: tuple[float, float]

    @property
    def fraction_in_band(self) -> float:
        lo, hi = self.band
        if len(self.heights) == 0:
            return 0.0
        return float(np.mean((self.heights >= lo) & (self.heights <= hi)))


def height_samples(sats_enu, cfg: CanyonConfig):
    """Positive reflection heights on both walls: (heights, wall sign, sample index)."""
    sats = np.asarray(sats_enu, dtype=float).reshape(-1, 3)
    hs, walls, idx = [], [], []
    for wall in (1, -1):
        h = reflection_height(sats, cfg.for_wall(wall))
        ok = np.isfinite(h) & (h > 0)
        hs.append(h[ok])
        walls.append(np.full(int(ok.sum()), wall))
        idx.append(np.flatnonzero(ok))
    return np.concatenate(hs), np.concatenate(walls), np.concatenate(idx)


def height_histogram(
    constellation: Constellation,
    cfg: CanyonConfig,
    mask_deg: float = 30.0,
    band=(10.0, 60.0),
    bin_m: float = 5.0,
    max_height: float = 200.0,
) -> HeightStudy:
    """Reflection heights for every visible sample on both walls, 5 m bins.

    Heights above ``max_height`` land in a final open-ended bin.
    """
    vis = constellation.masked(mask_deg) if mask_deg is not None else constellation
    h, wall, idx = height_samples(vis.enu, cfg)
    edges = np.r_[np.arange(0.0, max_height + bin_m / 2, bin_m), np.inf]
    return HeightStudy(h, wall, idx, histogram(h, edges), (float(band[0]), float(band[1])))


# ------------------------------------------------------------------- margins


def translation_margin_formula(sat, cfg: CanyonConfig, h, l) -> np.ndarray:
    """Closed-form total translation margin e1 + e2 as printed."""
    xs, _, zs, a = _mirrored(sat, cfg)
    c = cfg.receiver[2]
    h = np.asarray(h, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = 2 * h + 2 * l - c - zs
        d2 = 2 * h - 2 * l - c - zs
        e1 = ((h + l) * (xs + a) - c * xs - zs * a) / d1
        e2 = ((h - l) * (xs + a) - c * xs - zs * a) / d2
        return np.where((d1 != 0) & (d2 != 0), e1 + e2, np.nan)


def translation_wall_positions(sat, cfg: CanyonConfig, h, l) -> tuple[np.ndarray, np.ndarray]:
    """Wall x positions at which the reflection height reaches H + l and H - l.

    Exact solution of the mirror-line condition for a translated wall. Each
    quotient of the printed closed form equals one of these positions, so the
    printed sum carries an extra ``width`` relative to a translation margin.
    """
    xs, _, zs, a = _mirrored(sat, cfg)
    c = cfg.receiver[2]
    h = np.asarray(h, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        up = ((h + l) * (xs + a) - c * xs - zs * a) / (2 * h + 2 * l - c - zs)
        down = ((h - l) * (xs + a) - c * xs - zs * a) / (2 * h - 2 * l - c - zs)
    return up, down


def tilt_margin_formula(sat, cfg: CanyonConfig, h, l) -> np.ndarray:
    """Closed-form (small-angle) total tilt margin theta1 + theta2 as printed, radians."""
    xs, _, zs, a = _mirrored(sat, cfg)
    c = cfg.receiver[2]
    half, w = cfg.street_width / 2, cfg.street_width
    h = np.asarray(h, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (c - zs) * (h + l)
        d2 = (c - zs) * (l - h)
        t1 = ((h + l) * (w - xs - a) + (xs - half) * c - zs * (half - a)) / d1
        t2 = ((h - l) * (w - xs - a) + (xs - half) * c - zs * (half - a)) / d2
        return np.where((d1 != 0) & (d2 != 0), t1 + t2, np.nan)


def _reflection_z(s, r, n, anchor):
    """z of the specular point for rays s (P,3) off planes (n, anchor) (P,3); NaN if none."""
    hs = np.sum((s - anchor) * n, axis=-1)
    hr = np.sum((r - anchor) * n, axis=-1)
    ok = (hs != 0) & (hs * hr >= 0)
    mirror = r - 2 * hr[:, None] * n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = hr / (hs + hr)
    z = mirror[:, 2] + t * (s[:, 2] - mirror[:, 2])
    return np.where(ok, z, np.nan)


def _plus_frame(sat, cfg: CanyonConfig):
    xs, ys, zs, a = _mirrored(sat, cfg)
    s = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    r = np.broadcast_to(np.array([a, cfg.receiver[1], cfg.receiver[2]]), s.shape)
    return s, r


def translated_height(sat, cfg: CanyonConfig, e) -> np.ndarray:
    """Reflection height after moving the wall by e along +x (away from the street)."""
    s, r = _plus_frame(sat, cfg)
    e = np.broadcast_to(np.asarray(e, dtype=float), (len(s),))
    n = np.broadcast_to(np.array([1.0, 0.0, 0.0]), s.shape)
    anchor = np.stack([cfg.street_width / 2 + e, np.zeros(len(s)), np.zeros(len(s))], axis=-1)
    return _reflection_z(s, r, n, anchor)


def tilted_height(sat, cfg: CanyonConfig, theta) -> np.ndarray:
    """Reflection height after tilting the wall by theta about its base line.

    Positive theta leans the top of the wall away from the street.
    """
    s, r = _plus_frame(sat, cfg)
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (len(s),))
    n = np.stack([np.cos(theta), np.zeros(len(s)), -np.sin(theta)], axis=-1)
    anchor = np.broadcast_to(np.array([cfg.street_width / 2, 0.0, 0.0]), s.shape)
    return _reflection_z(s, r, n, anchor)


def _bisect(ok, cap: np.ndarray, tol: float) -> np.ndarray:
    """Largest x in [0, cap] with ok(x), assuming ok holds on a prefix; vectorised."""
    lo = np.zeros_like(cap)
    hi = cap.copy()
    full = ok(hi)
    lo[full] = hi[full]
    active = ~full
    while np.any(active & (hi - lo > tol)):
        mid = 0.5 * (lo + hi)
        good = ok(mid)
        lo = np.where(active & good, mid, lo)
        hi = np.where(active & ~good, mid, hi)
    return lo


@dataclass
class MarginResult:
    """Signed oracle margins per sample plus the closed-form value.

    ``minus <= 0 <= plus``; ``total = plus - minus`` compares with the closed form.
    """

    minus: np.ndarray
    plus: np.ndarray
    formula: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.plus - self.minus


def translation_margin(sat, cfg: CanyonConfig, h, l: float, cap: float = 1000.0, tol: float = 1e-6) -> MarginResult:
    s = np.asarray(sat, dtype=float).reshape(-1, 3)
    h = np.broadcast_to(np.asarray(h, dtype=float), (len(s),))

    def within(sign):
        return lambda e: np.abs(translated_height(s, cfg, sign * e) - h) <= l

    a = cfg.wall * cfg.receiver[0]
    plus = _bisect(within(1.0), np.full(len(s), cap), tol)
    # the wall may not pass the receiver
    inward = np.full(len(s), max(cfg.street_width / 2 - a - 1e-9, 0.0))
    minus = -_bisect(within(-1.0), inward, tol)
    return MarginResult(minus, plus, translation_margin_formula(s, cfg, h, l))


def tilt_margin(sat, cfg: CanyonConfig, h, l: float, cap: float = math.pi / 4, tol: float = 1e-8) -> MarginResult:
    s = np.asarray(sat, dtype=float).reshape(-1, 3)
    h = np.broadcast_to(np.asarray(h, dtype=float), (len(s),))

    def within(sign):
        return lambda t: np.abs(tilted_height(s, cfg, sign * t) - h) <= l

    plus = _bisect(within(1.0), np.full(len(s), cap), tol)
    minus = -_bisect(within(-1.0), np.full(len(s), cap), tol)
    return MarginResult(minus, plus, tilt_margin_formula(s, cfg, h, l))


@dataclass
class MarginStudy:
    heights: np.ndarray
    wall: np.ndarray
    sample: np.ndarray
    translation: MarginResult
    tilt: MarginResult
    translation_hist: Histogram
    tilt_hist: Histogram  # degrees
    translation_band: float
    tilt_band_deg: float
    sample_sats: np.ndarray  # ENU satellite position per sample
    canyon: CanyonConfig  # wall side comes from ``wall`` per sample
    l: float

    @property
    def translation_fraction(self) -> float:
        t = self.translation
        return float(np.mean((np.abs(t.minus) <= self.translation_band) & (t.plus <= self.translation_band)))

    @property
    def tilt_fraction(self) -> float:
        t = self.tilt
        b = math.radians(self.tilt_band_deg)
        return float(np.mean((np.abs(t.minus) <= b) & (t.plus <= b)))

    def agreement(self) -> dict:
        """Closed form vs oracle totals (informational)."""
        out = {}
        for name, res in (("translation", self.translation), ("tilt", self.tilt)):
            f, o = res.formula, res.total
            ok = np.isfinite(f) & (o > 0)
            rel = np.abs(f[ok] - o[ok]) / o[ok]
            out[name] = {
                "n": int(ok.sum()),
                "median_rel_diff": float(np.median(rel)) if len(rel) else math.nan,
                "within_10pct": float(np.mean(rel <= 0.1)) if len(rel) else math.nan,
            }
        half = self.canyon.street_width / 2
        ends = np.full((len(self.heights), 2), np.nan)
        for w in (1, -1):
            sel = self.wall == w
            up, down = translation_wall_positions(self.sample_sats[sel], self.canyon.for_wall(w), self.heights[sel], self.l)
            ends[sel] = np.sort(np.stack([up - half, down - half], axis=1), axis=1)
        got = np.stack([self.translation.minus, self.translation.plus], axis=1)
        ok = np.all(np.isfinite(ends), axis=1)
        out["translation_endpoint_max_abs_diff"] = float(np.max(np.abs(ends[ok] - got[ok]))) if ok.any() else math.nan
        small = np.abs(self.tilt.total) < math.radians(5)
        f, o = self.tilt.formula[small], self.tilt.total[small]
        ok = np.isfinite(f) & (o > 0)
        out["tilt_small_angle_within_10pct"] = float(np.mean(np.abs(f[ok] - o[ok]) <= 0.1 * o[ok])) if ok.any() else math.nan
        return out


def margin_distributions(
    constellation: Constellation,
    cfg: CanyonConfig,
    l: float = 1.0723,
    translation_band: float = 1.5,
    tilt_band_deg: float = 5.0,
    mask_deg: float | None = None,
) -> MarginStudy:
    """Oracle translation / tilt margins for every visible sample on both walls.

    Histograms collect both signed endpoints of each sample (two entries per sample).
    """
    if l <= 0:
        raise ValueError("l must be positive")
    vis = constellation.masked(mask_deg) if mask_deg is not None else constellation
    h, wall, idx = height_samples(vis.enu, cfg)
    sats = vis.enu[idx]
    trans_parts, tilt_parts = [], []
    order = []
    for w in (1, -1):
        sel = np.flatnonzero(wall == w)
        order.append(sel)
        c = cfg.for_wall(w)
        trans_parts.append(translation_margin(sats[sel], c, h[sel], l))
        tilt_parts.append(tilt_margin(sats[sel], c, h[sel], l))
    sel = np.concatenate(order)
    inv = np.empty_like(sel)
    inv[sel] = np.arange(len(sel))

    def join(parts):
        return MarginResult(*(np.concatenate([getattr(p, k) for p in parts])[inv] for k in ("minus", "plus", "formula")))

    trans, tilt = join(trans_parts), join(tilt_parts)
    t_edges = np.r_[-np.inf, np.arange(-5.0, 5.0 + 0.125, 0.25), np.inf]
    r_edges = np.r_[-np.inf, np.arange(-15.0, 15.0 + 0.25, 0.5), np.inf]
    th = histogram(np.r_[trans.minus, trans.plus], t_edges)
    rh = histogram(np.degrees(np.r_[tilt.minus, tilt.plus]), r_edges)
    return MarginStudy(h, wall, idx, trans, tilt, th, rh, translation_band, tilt_band_deg, sats, cfg, float(l))
