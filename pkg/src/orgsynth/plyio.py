"""Labeled scene PLY reading and writing.

Vertex schema: x, y, z (float32); optional red, green, blue (uint8);
optional nx, ny, nz (float32); label and instance (int32).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .geometry import PointCloud


class PlyFormatError(ValueError):
    pass


@dataclass(eq=False)
class LabeledScene:
    cloud: PointCloud
    labels: np.ndarray
    instances: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.instances = np.asarray(self.instances, dtype=np.int64).reshape(-1)
        if not (len(self.labels) == len(self.instances) == len(self.cloud)):
            raise ValueError("labels/instances must match the point count")

    def __len__(self) -> int:
        return len(self.cloud)


def write_ply(path, scene: LabeledScene, binary: bool = True, coord_dtype: str = "f4") -> None:
    """Write a labeled scene; ``coord_dtype="f8"`` keeps coordinates lossless."""
    cloud = scene.cloud
    fields = [("x", coord_dtype), ("y", coord_dtype), ("z", coord_dtype)]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if cloud.normals is not None:
        fields += [("nx", coord_dtype), ("ny", coord_dtype), ("nz", coord_dtype)]
    fields += [("label", "i4"), ("instance", "i4")]
    data = np.empty(len(cloud), dtype=fields)
    for k, name in enumerate("xyz"):
        data[name] = cloud.points[:, k]
    if cloud.colors is not None:
        for k, name in enumerate(("red", "green", "blue")):
            data[name] = cloud.colors[:, k]
    if cloud.normals is not None:
        for k, name in enumerate(("nx", "ny", "nz")):
            data[name] = cloud.normals[:, k]
    data["label"] = scene.labels
    data["instance"] = scene.instances
    el = PlyElement.describe(data, "vertex")
    PlyData([el], text=not binary, byte_order="<").write(str(path))


def read_ply(path) -> LabeledScene:
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"].data
    except Exception as exc:  # plyfile raises a mix of ValueError/KeyError/struct errors
        raise PlyFormatError(f"{path}: {exc}") from exc
    names = set(v.dtype.names)
    missing = {"x", "y", "z", "label", "instance"} - names
    if missing:
        raise PlyFormatError(f"{path}: missing vertex properties {sorted(missing)}")
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    colors = normals = None
    if {"red", "green", "blue"} <= names:
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.uint8)
    if {"nx", "ny", "nz"} <= names:
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        raise PlyFormatError(f"{path}: non-finite coordinates")
    return LabeledScene(PointCloud(pts, colors, normals), v["label"], v["instance"], path.stem)
