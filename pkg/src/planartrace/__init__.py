"""Planar-map construction from point clouds and GNSS NLOS ray tracing."""

from .frames import FrameOrigin, GeodeticPoint, ecef_to_enu, enu_to_ecef
from .io import RunConfig
from .planar_map import Facet, PlanarMap, Plane, filter_by_height
from .raytrace import DelayPolicy, RayPath, Reception, classify, trace_run

__version__ = "0.1.0"

__all__ = [
    "DelayPolicy",
    "Facet",
    "FrameOrigin",
    "GeodeticPoint",
    "PlanarMap",
    "Plane",
    "RayPath",
    "Reception",
    "RunConfig",
    "classify",
    "ecef_to_enu",
    "enu_to_ecef",
    "filter_by_height",
    "trace_run",
]
