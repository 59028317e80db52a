"""Numerics on bounded intersections of quadric hypersurfaces."""

from .core import (
    Constraint,
    Hyperplane,
    Polyline,
    Quadric,
    QuadgeoError,
    SceneFormatError,
    SceneSystem,
    parse_scene,
    scene_digest,
    serialize_scene,
)

__version__ = "0.1.0"

__all__ = [
    "Constraint", "Hyperplane", "Polyline", "Quadric", "QuadgeoError",
    "SceneFormatError", "SceneSystem", "parse_scene", "scene_digest",
    "serialize_scene", "__version__",
]
