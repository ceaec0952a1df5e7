"""Relationship-graph guided synthesis of labeled indoor point cloud scenes."""
from .geometry import OrientedBoundingBox, PointCloud, Pose
from .optimize import SynthesisConfig, synthesize_scene
from .org import ObjectRelationshipGraph, build_target_graph
from .relations import RelationStats, RelationType, ThresholdConfig, collect_stats

__version__ = "0.1.0"

__all__ = [
    "ObjectRelationshipGraph", "OrientedBoundingBox", "PointCloud", "Pose", "RelationStats",
    "RelationType", "SynthesisConfig", "ThresholdConfig", "build_target_graph", "collect_stats",
    "synthesize_scene",
]
