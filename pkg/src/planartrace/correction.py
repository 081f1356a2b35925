"""Pseudorange correction with traced delays and single-epoch least-squares fixes."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .io import ObsTable, RouteTable, SatTable

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Observation:
    epoch: float
    prn: str
    pseudorange: float


@dataclass
class PositionFix:
    epoch: float
    position: np.ndarray
    clock_bias: float
    n_sats: int
    converged: bool
    frame: str = "ecef"
    residual_rms: float = float("nan")
    iterations: int = 0


def _classification(row) -> str:
    c = getattr(row, "classification")
    return getattr(c, "value", c)


def correct_observations(obs: ObsTable, paths, los_nlos: str = "keep") -> tuple[ObsTable, Counter]:
    """Subtract applied delays from NLOS pseudoranges; drop Blocked ones.

    ``los_nlos`` is "keep" (pass LOS+NLOS rows unchanged) or "drop". Returns the
    corrected table and counters: corrected, dropped, unmatched.
    """
    if los_nlos not in ("keep", "drop"):
        raise ValueError("los_nlos must be 'keep' or 'drop'")
    by_key = {(float(p.epoch), str(p.prn)): p for p in paths}
    counts: Counter = Counter(corrected=0, dropped=0, unmatched=0)
    keep = np.ones(len(obs), dtype=bool)
    pr = obs.pseudorange.astype(float).copy()
    for i, (e, prn) in enumerate(zip(obs.epoch.tolist(), obs.prn.tolist())):
        p = by_key.get((float(e), str(prn)))
        if p is None:
            counts["unmatched"] += 1
            continue
        cls = _classification(p)
        if cls == "Blocked" or (cls == "LOS_plus_NLOS" and los_nlos == "drop"):
            keep[i] = False
            counts["dropped"] += 1
        elif cls == "NLOS":
            d = float(p.applied_delay)
            if d < 0:
                raise ValueError(f"negative delay for {prn} at epoch {e}")
            pr[i] -= d
            counts["corrected"] += 1
    if counts["unmatched"]:
        logger.info("%d observations had no traced path; passed through", counts["unmatched"])
    out = ObsTable(obs.epoch.copy(), obs.prn.copy(), pr)
    return out.subset(keep), counts


def spp_solve(
    sat_pos,
    pseudoranges,
    epoch: float = 0.0,
    x0=None,
    max_iter: int = 20,
    tol: float = 1e-4,
    weights=None,
    frame: str = "ecef",
) -> PositionFix | None:
    """Gauss-Newton position and clock bias from one epoch of pseudoranges.

    ``weights`` defaults to identity. Returns None with fewer than four
    satellites; a rank-deficient or non-converging geometry gives a fix with
    ``converged=False``.
    """
    s = np.asarray(sat_pos, dtype=float).reshape(-1, 3)
    rho = np.asarray(pseudoranges, dtype=float).ravel()
    n = len(rho)
    if n < 4:
        return None
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    x = np.zeros(4) if x0 is None else np.r_[np.asarray(x0, dtype=float).ravel()[:3], 0.0]
    if x0 is not None and len(np.ravel(x0)) > 3:
        x[3] = float(np.ravel(x0)[3])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        los = s - x[:3]
        rng = np.sqrt(np.sum(los * los, axis=1))
        if np.any(rng == 0):
            break
        h = np.c_[-los / rng[:, None], np.ones(n)]
        dy = rho - (rng + x[3])
        dx, _, rank, _ = np.linalg.lstsq(h * sw[:, None], dy * sw, rcond=None)
        if rank < 4:
            break
        x = x + dx
        if not np.all(np.isfinite(x)):
            break
        if np.linalg.norm(dx[:3]) < tol:
            converged = True
            break
    los = s - x[:3]
    res = rho - (np.sqrt(np.sum(los * los, axis=1)) + x[3])
    rms = float(np.sqrt(np.mean(res * res))) if np.all(np.isfinite(res)) else float("nan")
    return PositionFix(float(epoch), x[:3], float(x[3]), n, converged, frame, rms, it)


def solve_epochs(obs: ObsTable, sats: SatTable, frame: str = "ecef", **kw) -> list[PositionFix]:
    """One fix per epoch; satellites are matched to observations on (epoch, prn)."""
    pos = sats.lookup()
    fixes = []
    obs = obs.sorted()
    epochs, starts = np.unique(obs.epoch, return_index=True)
    bounds = list(starts) + [len(obs)]
    prev = None
    for e, a, b in zip(epochs, bounds[:-1], bounds[1:]):
        rows = [(pos.get((float(e), str(p))), r) for p, r in zip(obs.prn[a:b], obs.pseudorange[a:b])]
        rows = [(x, r) for x, r in rows if x is not None]
        if len(rows) < 4:
            logger.warning("epoch %s: %d satellites, no fix", e, len(rows))
            continue
        fix = spp_solve([x for x, _ in rows], [r for _, r in rows], e, x0=prev, frame=frame, **kw)
        if fix.converged:
            prev = np.r_[fix.position, fix.clock_bias]
        fixes.append(fix)
    return fixes


@dataclass
class ErrorSeries:
    epoch: np.ndarray
    components: np.ndarray  # (T, 3) in ``frame``
    horizontal: np.ndarray
    error_3d: np.ndarray
    frame: str
    skipped: int = 0

    def summary(self) -> dict:
        def stats(v):
            if len(v) == 0:
                return (math.nan, math.nan, math.nan)
            return float(np.mean(v)), float(np.sqrt(np.mean(v * v))), float(np.max(v))

        h, d = stats(self.horizontal), stats(self.error_3d)
        return {
            "n": len(self.epoch),
            "skipped": self.skipped,
            "horizontal_mean": h[0],
            "horizontal_rms": h[1],
            "horizontal_max": h[2],
            "3d_mean": d[0],
            "3d_rms": d[1],
            "3d_max": d[2],
        }


def error_series(fixes: list[PositionFix], truth: RouteTable, enu_rotation=None) -> ErrorSeries:
    """Per-epoch fix minus truth.

    Components stay in the fixes' frame. Horizontal error is taken in ENU: the
    fix frame itself when it is "enu", else ``enu_rotation`` (ECEF to ENU) is
    applied; without it the horizontal column falls back to the first two axes.
    """
    lookup = {float(e): p for e, p in zip(truth.epoch, truth.pos)}
    ep, comp = [], []
    skipped = 0
    frame = fixes[0].frame if fixes else "ecef"
    for f in fixes:
        t = lookup.get(float(f.epoch))
        if t is None:
            skipped += 1
            continue
        ep.append(f.epoch)
        comp.append(np.asarray(f.position) - t)
    comp = np.array(comp, dtype=float).reshape(-1, 3)
    local = comp @ np.asarray(enu_rotation).T if (enu_rotation is not None and frame != "enu") else comp
    horizontal = np.hypot(local[:, 0], local[:, 1])
    if skipped:
        logger.warning("%d fixes without truth epoch skipped", skipped)
    return ErrorSeries(np.array(ep), comp, horizontal, np.linalg.norm(comp, axis=1), frame, skipped)
