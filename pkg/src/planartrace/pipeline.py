"""Cloud to planar map: attributes, linkage, slices, merging, facets."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .io import RunConfig
from .planar_map import PlanarMap, SpacingStats, build_facets, drop_small_slices, merge_slices, spacing_stats
from .segmentation import CloudAttributes, LinkageTable, Slice, build_linkage, create_slices, estimate_all, knn_index

logger = logging.getLogger(__name__)


@dataclass
class SegmentResult:
    map: PlanarMap
    slices: list[Slice]
    attributes: CloudAttributes
    linkage: LinkageTable
    spacing: SpacingStats | None

    def labels(self, n_points: int) -> np.ndarray:
        """Slice index per point, -1 for unassigned."""
        lab = np.full(n_points, -1, dtype=np.int64)
        for f in self.map.facets:
            lab[self.slices[f.source_slice].members] = f.id
        return lab


def segment_cloud(points, config: RunConfig | None = None) -> SegmentResult:
    """Run the full segmentation.

    Clusters are first kept down to ``premerge_min_size`` points so that small
    linkage clusters on one wall can merge; ``min_slice_size`` is applied to the
    merged slices.
    """
    cfg = config or RunConfig()
    pts = np.asarray(points, dtype=float)
    t0 = time.perf_counter()
    knn = knn_index(pts, cfg.k)
    attrs = estimate_all(pts, knn)
    table = build_linkage(attrs, cfg.flatness_alpha)
    slices = create_slices(table, pts, cfg.premerge_min_size)
    n_raw = len(slices)
    slices = merge_slices(slices, attrs, pts, cfg.theta_merge)
    n_merged = len(slices)
    slices = drop_small_slices(slices, cfg.min_slice_size)
    meta = {"k": cfg.k, "min_slice_size": cfg.min_slice_size, "theta_merge_deg": cfg.theta_merge_deg}
    pmap = build_facets(slices, pts, cfg.frame_origin, meta)
    stats = spacing_stats(slices, pts) if slices else None
    logger.info(
        "segmented %d points: %d clusters, %d after merging, %d facets (%.1f s)",
        len(pts), n_raw, n_merged, len(pmap), time.perf_counter() - t0,
    )
    return SegmentResult(pmap, slices, attrs, table, stats)
