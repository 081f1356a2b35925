"""Figures written next to the delimited outputs (Agg backend, no display)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def _finite_edges(edges: np.ndarray) -> np.ndarray:
    e = np.asarray(edges, dtype=float).copy()
    step = np.diff(e[np.isfinite(e)]).min() if np.isfinite(e).sum() > 1 else 1.0
    if not math.isfinite(e[0]):
        e[0] = e[1] - step
    if not math.isfinite(e[-1]):
        e[-1] = e[-2] + step
    return e


def plot_histogram(hist, path, xlabel: str, title: str = "", band=None) -> None:
    e = _finite_edges(hist.edges)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(e[:-1], hist.fractions, width=np.diff(e), align="edge", edgecolor="k", linewidth=0.4)
    if band is not None:
        ax.axvspan(band[0], band[1], color="tab:orange", alpha=0.15)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fraction of samples")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_delays(paths, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    by_prn = {}
    for p in paths:
        if p.applied_delay > 0:
            by_prn.setdefault(str(p.prn), ([], []))
            by_prn[str(p.prn)][0].append(float(p.epoch))
            by_prn[str(p.prn)][1].append(float(p.applied_delay))
    for prn in sorted(by_prn):
        ax.plot(*by_prn[prn], ".", ms=2, label=prn)
    ax.set_xlabel("epoch")
    ax.set_ylabel("applied delay (m)")
    if by_prn:
        ax.legend(fontsize=7, markerscale=4)
    _save(fig, path)


def plot_errors(series_by_name: dict, path) -> None:
    """Three-axis error traces, one line per named series."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 6), sharex=True)
    for name, s in series_by_name.items():
        for i, ax in enumerate(axes):
            ax.plot(s.epoch, s.components[:, i], lw=0.8, label=name)
    for ax, lab in zip(axes, ("x", "y", "z")):
        ax.set_ylabel(f"{lab} error (m)")
    axes[0].legend(fontsize=8)
    axes[-1].set_xlabel("epoch")
    _save(fig, path)


def plot_map(pmap, path, points=None) -> None:
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(projection="3d")
    if points is not None and len(points):
        sub = np.asarray(points)[:: max(1, len(points) // 20000)]
        ax.scatter(sub[:, 0], sub[:, 1], sub[:, 2], s=0.2, c="0.6")
    for f in pmap.facets:
        b = np.vstack([f.boundary, f.boundary[:1]])
        ax.plot(b[:, 0], b[:, 1], b[:, 2], lw=1)
    ax.set_xlabel("E (m)")
    ax.set_ylabel("N (m)")
    ax.set_zlabel("U (m)")
    _save(fig, path)
