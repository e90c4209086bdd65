"""Spatial retrieval of geographic imagery for driving logs.

The package turns local map-frame ego poses into WGS-84 coordinates,
retrieves and caches street-view panoramas, reprojects them into virtual
cameras aligned with the onboard sensors, crops pose-aware satellite patches
and scores how trustworthy each retrieval is.
"""

from georetrieval.geodesy import GeoPoint, LocalPose, MapAnchor

__all__ = ["GeoPoint", "LocalPose", "MapAnchor"]
__version__ = "0.1.0"
