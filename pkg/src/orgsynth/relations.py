"""Spatial relation predicates between oriented boxes and dataset relation statistics."""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .decompose import SceneRepository
from .geometry import (
    OrientedBoundingBox,
    SpatialIndex,
    delta_z,
    half_space_fraction,
    intersection_volume,
    knn,
    min_distance,
    overlap_xy,
)
from .serialization import FORMAT_VERSION


class RelationType(IntEnum):
    SUPPORTED_BY = 0
    ATTACHED_TO = 1
    LEFT_OF = 2
    RIGHT_OF = 3
    NEARBY = 4
    FACES = 5
    ORIENTED_WITH = 6
    NONE = 7

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "RelationType":
        try:
            return _FROM_LABEL[label]
        except KeyError:
            raise ValueError(f"unknown relation {label!r}") from None


_LABELS = {
    RelationType.SUPPORTED_BY: "SupportedBy",
    RelationType.ATTACHED_TO: "AttachedTo",
    RelationType.LEFT_OF: "LeftOf",
    RelationType.RIGHT_OF: "RightOf",
    RelationType.NEARBY: "Nearby",
    RelationType.FACES: "Faces",
    RelationType.ORIENTED_WITH: "OrientedWith",
    RelationType.NONE: "None",
}
_FROM_LABEL = {v: k for k, v in _LABELS.items()}

N_RELATIONS = len(RelationType)

# single-label edges pick the first satisfied predicate in this order
PRIORITY = (
    RelationType.SUPPORTED_BY,
    RelationType.ATTACHED_TO,
    RelationType.FACES,
    RelationType.ORIENTED_WITH,
    RelationType.LEFT_OF,
    RelationType.RIGHT_OF,
    RelationType.NEARBY,
)


@dataclass
class ThresholdConfig:
    tau: float = 0.5
    epsilon: float = 0.05
    tau_att: float = 0.3
    tau_dir: float = 0.9
    tau_left: float = 0.6
    tau_right: float = 0.6
    t_near: float = 1.0
    tau_face: float = 0.8
    epsilon_pp: float = 0.9
    knn_k: int = 10

    def __post_init__(self):
        for name in ("tau", "tau_att", "tau_left", "tau_right"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        for name in ("tau_dir", "tau_face", "epsilon_pp"):
            v = getattr(self, name)
            if not -1 < v < 1:
                raise ValueError(f"{name} must lie in (-1, 1), got {v}")
        if self.t_near <= 0:
            raise ValueError("t_near must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")


def _cos(u, v) -> float:
    nu, nv = math.sqrt(float(u @ u)), math.sqrt(float(v @ v))
    if nu < 1e-12 or nv < 1e-12:
        return float("nan")
    return float(np.dot(u, v) / (nu * nv))


def axis_alignment(a: OrientedBoundingBox, b: OrientedBoundingBox) -> float:
    """|cos| between principal axes; the continuous alignment used by attached-to."""
    return abs(_cos(a.principal_axis, b.principal_axis))


def facing_cosine(a: OrientedBoundingBox, b: OrientedBoundingBox) -> float:
    """cos(front(a), c(b) - c(a)); NaN when the centres coincide."""
    return _cos(a.front, b.center - a.center)


def volume_ratio(a: OrientedBoundingBox, b: OrientedBoundingBox) -> float:
    return intersection_volume(a, b) / min(a.volume, b.volume)


class _PairCache:
    """Lazily evaluated geometric quantities for one ordered pair."""

    def __init__(self, a: OrientedBoundingBox, b: OrientedBoundingBox):
        self.a, self.b = a, b
        self._c = {}

    def get(self, key):
        if key not in self._c:
            a, b = self.a, self.b
            self._c[key] = {
                "overlap": lambda: overlap_xy(a, b),
                "dz": lambda: delta_z(a, b),
                "vol_ratio": lambda: volume_ratio(a, b),
                "align": lambda: axis_alignment(a, b),
                "left": lambda: half_space_fraction(a, b, "left"),
                "right": lambda: half_space_fraction(a, b, "right"),
                "dist": lambda: min_distance(a, b),
                "face": lambda: facing_cosine(a, b),
                "up_cos": lambda: _cos(a.up_normal, b.up_normal),
            }[key]()
        return self._c[key]


def _holds(rel: RelationType, q: _PairCache, cfg: ThresholdConfig) -> bool:
    if rel is RelationType.SUPPORTED_BY:
        return q.get("overlap") > cfg.tau and q.get("dz") <= cfg.epsilon
    if rel is RelationType.ATTACHED_TO:
        return q.get("align") > cfg.tau_dir or q.get("vol_ratio") > cfg.tau_att
    if rel is RelationType.LEFT_OF:
        return q.get("left") > cfg.tau_left
    if rel is RelationType.RIGHT_OF:
        return q.get("right") > cfg.tau_right
    if rel is RelationType.NEARBY:
        return q.get("dist") <= cfg.t_near
    if rel is RelationType.FACES:
        return q.get("face") > cfg.tau_face  # NaN compares False
    if rel is RelationType.ORIENTED_WITH:
        return q.get("overlap") > cfg.tau and q.get("up_cos") > cfg.epsilon_pp
    raise ValueError(rel)


def evaluate_predicates(a: OrientedBoundingBox, b: OrientedBoundingBox,
                        cfg: ThresholdConfig) -> set[RelationType]:
    """All indicator predicates satisfied by the ordered pair (a, b)."""
    q = _PairCache(a, b)
    return {rel for rel in PRIORITY if _holds(rel, q, cfg)}


def relation_holds(rel: RelationType, a: OrientedBoundingBox, b: OrientedBoundingBox,
                   cfg: ThresholdConfig) -> bool:
    """Whether the single predicate ``rel`` is satisfied; None holds trivially."""
    rel = RelationType(rel)
    if rel is RelationType.NONE:
        return True
    return _holds(rel, _PairCache(a, b), cfg)


def classify_pair(a: OrientedBoundingBox, b: OrientedBoundingBox,
                  cfg: ThresholdConfig) -> RelationType:
    q = _PairCache(a, b)
    for rel in PRIORITY:
        if _holds(rel, q, cfg):
            return rel
    return RelationType.NONE


def pick_by_priority(rels) -> RelationType:
    for rel in PRIORITY:
        if rel in rels:
            return rel
    return RelationType.NONE


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RelationObservation:
    subject_category: int
    object_category: int
    relation: RelationType
    scene_id: str


@dataclass
class RelationStats:
    category_mean: dict[int, float] = field(default_factory=dict)
    relation_counts: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    scene_count: int = 0
    floor_category: int | None = None
    wall_category: int | None = None
    excluded_instances: int = 0

    @property
    def pair_counts(self) -> dict[tuple[int, int], int]:
        return {k: int(v.sum()) for k, v in self.relation_counts.items()}

    @property
    def relation_dist(self) -> dict[tuple[int, int], np.ndarray]:
        return {k: v / v.sum() for k, v in self.relation_counts.items() if v.sum() > 0}

    @property
    def relation_totals(self) -> np.ndarray:
        tot = np.zeros(N_RELATIONS, dtype=np.int64)
        for v in self.relation_counts.values():
            tot += v
        return tot

    def subject_total(self, cat: int) -> int:
        return int(sum(v.sum() for (i, _), v in self.relation_counts.items() if i == cat))

    def is_empty(self) -> bool:
        return not self.relation_counts

    def to_json(self) -> dict:
        pairs = []
        for (i, j) in sorted(self.relation_counts):
            counts = self.relation_counts[(i, j)]
            total = int(counts.sum())
            pairs.append({
                "cat_i": int(i),
                "cat_j": int(j),
                "count": total,
                "dist": {RelationType(r).label: float(counts[r] / total) for r in range(N_RELATIONS)},
                "relation_counts": {RelationType(r).label: int(counts[r]) for r in range(N_RELATIONS)},
            })
        return {
            "version": FORMAT_VERSION,
            "scene_count": int(self.scene_count),
            "category_mean": {str(k): float(v) for k, v in sorted(self.category_mean.items())},
            "floor_category": self.floor_category,
            "wall_category": self.wall_category,
            "excluded_instances": int(self.excluded_instances),
            "relation_totals": {RelationType(r).label: int(c) for r, c in enumerate(self.relation_totals)},
            "pairs": pairs,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RelationStats":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported stats version {d.get('version')!r}")
        counts = {}
        for p in d["pairs"]:
            if "relation_counts" in p:
                vec = [p["relation_counts"].get(RelationType(r).label, 0) for r in range(N_RELATIONS)]
            else:
                vec = [round(p["dist"].get(RelationType(r).label, 0.0) * p["count"]) for r in range(N_RELATIONS)]
            counts[(int(p["cat_i"]), int(p["cat_j"]))] = np.asarray(vec, dtype=np.int64)
        return cls(
            {int(k): float(v) for k, v in d["category_mean"].items()},
            counts,
            int(d["scene_count"]),
            d.get("floor_category"),
            d.get("wall_category"),
            int(d.get("excluded_instances", 0)),
        )


def scene_observations(scene: SceneRepository, cfg: ThresholdConfig,
                       scene_id: str = "") -> tuple[list[RelationObservation], int]:
    """Directed observations for one scene and the number of all-None instances dropped.

    Each foreground instance is related to its ``knn_k`` nearest foreground
    neighbours (by box centre) and to every floor/background instance.
    Observations are recorded only from the subject's point of view.
    """
    fg = scene.foregrounds
    boundary = scene.floors + scene.backgrounds
    out, excluded = [], 0
    index = SpatialIndex([inst.obb.center for inst in fg]) if fg else None
    for k, a in enumerate(fg):
        obs = []
        for nb_id, _ in knn(index, a.obb.center, cfg.knn_k + 1):
            if nb_id == k:
                continue
            b = fg[nb_id]
            obs.append(RelationObservation(a.category_id, b.category_id,
                                           classify_pair(a.obb, b.obb, cfg), scene_id))
        obs = obs[:cfg.knn_k]
        for b in boundary:
            obs.append(RelationObservation(a.category_id, b.category_id,
                                           classify_pair(a.obb, b.obb, cfg), scene_id))
        if obs and all(o.relation is RelationType.NONE for o in obs):
            excluded += 1
            continue
        out.extend(obs)
    return out, excluded


def collect_stats(scenes: list[SceneRepository], cfg: ThresholdConfig) -> RelationStats:
    counts: dict[tuple[int, int], np.ndarray] = defaultdict(lambda: np.zeros(N_RELATIONS, dtype=np.int64))
    per_cat = Counter()
    floors, walls = Counter(), Counter()
    excluded = 0
    for s_idx, scene in enumerate(scenes):
        for inst in scene.foregrounds:
            per_cat[inst.category_id] += 1
        floors.update(inst.category_id for inst in scene.floors)
        walls.update(inst.category_id for inst in scene.backgrounds)
        names = {inst.source_scene for _, inst in scene.all_instances()}
        sid = names.pop() if len(names) == 1 else str(s_idx)
        obs, ex = scene_observations(scene, cfg, sid)
        excluded += ex
        for o in obs:
            counts[(o.subject_category, o.object_category)][o.relation] += 1
    n = len(scenes)
    mean = {c: per_cat[c] / n for c in sorted(per_cat)} if n else {}

    def most_common(c):
        return min(c, key=lambda k: (-c[k], k)) if c else None

    return RelationStats(mean, dict(counts), n, most_common(floors), most_common(walls), excluded)


def conditional_distribution(stats: RelationStats, cat_i: int, cat_j: int) -> np.ndarray:
    counts = stats.relation_counts.get((cat_i, cat_j))
    if counts is None or counts.sum() == 0:
        out = np.zeros(N_RELATIONS)
        out[RelationType.NONE] = 1.0
        return out
    return counts / counts.sum()
