"""Procedural labeled rooms for demos, tests and benchmarks.

Rooms are rectangular: a floor sheet, four thin walls and a handful of
furniture boxes placed with simple rules (chairs around a table and facing
it, sofa and cabinet against walls, a picture hung on a wall, sometimes a
lamp on the table).  Every instance is sampled on its box surface.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .decompose import CategoryTaxonomy, Role, sample_box_surface
from .geometry import OrientedBoundingBox, PointCloud, boxes_intersect
from .plyio import LabeledScene, write_ply
from .serialization import atomic_write_json

FLOOR, WALL, CHAIR, TABLE, SOFA, CABINET, BED, PICTURE, LAMP = range(9)

INDOOR_TAXONOMY = CategoryTaxonomy(
    "synthetic-indoor",
    {FLOOR: Role.FLOOR, WALL: Role.BACKGROUND, CHAIR: Role.FOREGROUND, TABLE: Role.FOREGROUND,
     SOFA: Role.FOREGROUND, CABINET: Role.FOREGROUND, BED: Role.FOREGROUND,
     PICTURE: Role.FOREGROUND, LAMP: Role.FOREGROUND},
    {FLOOR: "floor", WALL: "wall", CHAIR: "chair", TABLE: "table", SOFA: "sofa",
     CABINET: "cabinet", BED: "bed", PICTURE: "picture", LAMP: "lamp"},
)

SIZES = {
    CHAIR: (0.5, 0.45, 0.9),
    TABLE: (1.2, 0.8, 0.75),
    SOFA: (2.0, 0.9, 0.8),
    CABINET: (0.8, 0.45, 1.8),
    BED: (2.0, 1.5, 0.5),
    PICTURE: (0.7, 0.04, 0.5),
    LAMP: (0.25, 0.2, 0.45),
}

WALL_HEIGHT = 2.6
WALL_THICKNESS = 0.1


def _n_points(obb: OrientedBoundingBox, density: float) -> int:
    h = obb.half_extents
    area = 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])
    return max(60, int(density * area))


def floor_sheet(width: float, depth: float, spacing: float, rng) -> PointCloud:
    xs = np.arange(spacing / 2, width, spacing)
    ys = np.arange(spacing / 2, depth, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    pts[:, :2] += rng.uniform(-0.3, 0.3, size=(len(pts), 2)) * spacing
    normals = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    return PointCloud(pts, None, normals)


def wall_boxes(width: float, depth: float) -> list[OrientedBoundingBox]:
    t, hgt = WALL_THICKNESS, WALL_HEIGHT
    return [
        OrientedBoundingBox.from_extents([width / 2, -t / 2, hgt / 2], [width + 2 * t, t, hgt], 0.0,
                                         front=[0, 1, 0]),
        OrientedBoundingBox.from_extents([width / 2, depth + t / 2, hgt / 2], [width + 2 * t, t, hgt], 0.0,
                                         front=[0, -1, 0]),
        OrientedBoundingBox.from_extents([-t / 2, depth / 2, hgt / 2], [depth, t, hgt], math.pi / 2,
                                         front=[1, 0, 0]),
        OrientedBoundingBox.from_extents([width + t / 2, depth / 2, hgt / 2], [depth, t, hgt], math.pi / 2,
                                         front=[-1, 0, 0]),
    ]


def _inflate(obb: OrientedBoundingBox, margin: float) -> OrientedBoundingBox:
    return OrientedBoundingBox(obb.center, obb.half_extents + margin, obb.axes, obb.front, obb.up_normal)


class _Placer:
    def __init__(self, width, depth, rng, margin=0.05):
        self.width, self.depth, self.rng, self.margin = width, depth, rng, margin
        self.boxes: list[tuple[int, OrientedBoundingBox]] = []

    def free(self, obb: OrientedBoundingBox, ignore=()) -> bool:
        lo = obb.corners().min(axis=0)
        hi = obb.corners().max(axis=0)
        if lo[0] < 0 or lo[1] < 0 or hi[0] > self.width or hi[1] > self.depth:
            return False
        probe = _inflate(obb, self.margin)
        return not any(boxes_intersect(probe, b) for k, (_, b) in enumerate(self.boxes) if k not in ignore)

    def add(self, cat, obb):
        self.boxes.append((cat, obb))
        return len(self.boxes) - 1


def _box(cat, center_xy, yaw, base_z=0.0):
    l, w, h = SIZES[cat]
    c, s = math.cos(yaw), math.sin(yaw)
    return OrientedBoundingBox.from_extents([center_xy[0], center_xy[1], base_z + h / 2], [l, w, h], yaw,
                                            front=[c, s, 0.0])


def _against_wall(placer: _Placer, cat: int, rng, tries: int = 40):
    """Box with its back on a random wall, front pointing into the room."""
    l, w, _ = SIZES[cat]
    for _ in range(tries):
        side = int(rng.integers(4))
        if side == 0:
            xy, yaw = (rng.uniform(l / 2, placer.width - l / 2), w / 2 + 0.01), math.pi / 2
        elif side == 1:
            xy, yaw = (rng.uniform(l / 2, placer.width - l / 2), placer.depth - w / 2 - 0.01), -math.pi / 2
        elif side == 2:
            xy, yaw = (w / 2 + 0.01, rng.uniform(l / 2, placer.depth - l / 2)), 0.0
        else:
            xy, yaw = (placer.width - w / 2 - 0.01, rng.uniform(l / 2, placer.depth - l / 2)), math.pi
        # from_extents puts the long side along the yawed x axis; the front is the short axis
        box = _box(cat, xy, yaw + math.pi / 2)
        c, s = math.cos(yaw), math.sin(yaw)
        box = OrientedBoundingBox(box.center, box.half_extents, box.axes, [c, s, 0.0], box.up_normal)
        if placer.free(box):
            return box, side
    return None, None


def room_boxes(seed: int, width: float | None = None, depth: float | None = None):
    """Furniture boxes of one procedural room as [(category, obb)], plus the room size."""
    rng = np.random.default_rng(seed)
    width = float(rng.uniform(4.0, 7.0)) if width is None else width
    depth = float(rng.uniform(4.0, 6.0)) if depth is None else depth
    placer = _Placer(width, depth, rng)

    # table and chairs
    for _ in range(40):
        yaw = float(rng.uniform(-math.pi, math.pi))
        xy = (rng.uniform(1.3, width - 1.3), rng.uniform(1.3, depth - 1.3))
        table = _box(TABLE, xy, yaw)
        if placer.free(table):
            t_idx = placer.add(TABLE, table)
            n_chairs = int(rng.integers(2, 5))
            offsets = [(0.95, 0.0), (-0.95, 0.0), (0.0, 0.75), (0.0, -0.75)]
            for k in rng.permutation(4)[:n_chairs]:
                u, v = offsets[k]
                c, s = math.cos(yaw), math.sin(yaw)
                cxy = (xy[0] + c * u - s * v, xy[1] + s * u + c * v)
                face = math.atan2(xy[1] - cxy[1], xy[0] - cxy[0])
                chair = _box(CHAIR, cxy, face)
                if placer.free(chair):
                    placer.add(CHAIR, chair)
            if rng.random() < 0.5:
                lamp = _box(LAMP, (xy[0] + 0.2 * math.cos(yaw), xy[1] + 0.2 * math.sin(yaw)), yaw,
                            base_z=SIZES[TABLE][2])
                if placer.free(lamp, ignore=(t_idx,)):
                    placer.add(LAMP, lamp)
            break

    for cat, p in ((SOFA, 0.8), (CABINET, 0.9), (BED, 0.3), (CABINET, 0.4)):
        if rng.random() < p:
            box, _ = _against_wall(placer, cat, rng)
            if box is not None:
                placer.add(cat, box)

    # a picture hung flush on a wall, 1.2-1.6 m up
    if rng.random() < 0.7:
        l, w, h = SIZES[PICTURE]
        side = int(rng.integers(4))
        z = float(rng.uniform(1.2, 1.6))
        if side < 2:
            x = rng.uniform(l, width - l)
            y = w / 2 if side == 0 else depth - w / 2
            yaw = 0.0
            front = [0.0, 1.0 if side == 0 else -1.0, 0.0]
        else:
            y = rng.uniform(l, depth - l)
            x = w / 2 if side == 2 else width - w / 2
            yaw = math.pi / 2
            front = [1.0 if side == 2 else -1.0, 0.0, 0.0]
        pic = OrientedBoundingBox.from_extents([x, y, z], [l, w, h], yaw, front=front)
        placer.boxes.append((PICTURE, pic))
    return placer.boxes, width, depth


def make_room(seed: int, density: float = 150.0, floor_spacing: float = 0.1,
              name: str | None = None) -> LabeledScene:
    """One labeled room; instance ids are unique within the scene."""
    rng = np.random.default_rng(seed + 7919)
    boxes, width, depth = room_boxes(seed)
    parts, labels, instances = [], [], []
    floor = floor_sheet(width, depth, floor_spacing, rng)
    parts.append(floor)
    labels.append(np.full(len(floor), FLOOR))
    instances.append(np.zeros(len(floor), dtype=np.int64))
    inst_id = 1
    for k, wall in enumerate(wall_boxes(width, depth)):
        cloud = sample_box_surface(wall, _n_points(wall, density / 3), seed * 100 + k)
        parts.append(cloud)
        labels.append(np.full(len(cloud), WALL))
        instances.append(np.full(len(cloud), inst_id))
        inst_id += 1
    for k, (cat, obb) in enumerate(boxes):
        cloud = sample_box_surface(obb, _n_points(obb, density), seed * 100 + 50 + k)
        parts.append(cloud)
        labels.append(np.full(len(cloud), cat))
        instances.append(np.full(len(cloud), inst_id))
        inst_id += 1
    return LabeledScene(PointCloud.concat(parts), np.concatenate(labels), np.concatenate(instances),
                        name or f"room_{seed:04d}")


def make_corpus(n_scenes: int, seed: int = 0, **kw) -> list[LabeledScene]:
    return [make_room(seed + k, **kw) for k in range(n_scenes)]


def write_corpus(directory, scenes: list[LabeledScene],
                 taxonomy: CategoryTaxonomy = INDOOR_TAXONOMY) -> Path:
    """PLY per scene plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        write_ply(directory / f"{scene.name}.ply", scene)
    manifest = directory / "manifest.json"
    atomic_write_json(manifest, taxonomy.to_manifest())
    return manifest
