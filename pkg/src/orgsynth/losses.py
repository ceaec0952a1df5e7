"""Geometric, semantic and topological losses over a layout, and their weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embed import EncoderParams, aligned_adjacency, encode_graph, match_nodes
from .geometry import (
    OrientedBoundingBox,
    Pose,
    boxes_intersect,
    delta_z,
    half_space_fraction,
    intersection_volume,
    min_distance,
    overlap_xy,
)
from .layout import LayoutState
from .org import FLOOR_NODE, WALL_NODE, ObjectRelationshipGraph, OrgEdge
from .relations import RelationType, ThresholdConfig, axis_alignment, volume_ratio


class LossError(Exception):
    pass


class UnsupportedRelation(LossError, ValueError):
    pass


class UnboundNode(LossError):
    pass


class MissingSupport(LossError):
    pass


class NonFiniteLoss(LossError, FloatingPointError):
    pass


def _default_alpha() -> dict[RelationType, float]:
    return {r: 1.0 for r in RelationType if r is not RelationType.NONE}


@dataclass
class SemanticWeights:
    alpha: dict[RelationType, float] = field(default_factory=_default_alpha)
    lambda1: float = 1.0
    lambda2: float = 1.0
    mu_attach: float = 1.0
    alpha_left: float = 1.0
    alpha_right: float = 1.0
    nu: float = 1.0
    gamma: float = 1.0
    rho1: float = 1.0
    rho2: float = 1.0

    def __post_init__(self):
        alpha = _default_alpha()
        for k, v in self.alpha.items():
            alpha[RelationType.from_label(k) if isinstance(k, str) else RelationType(k)] = float(v)
        self.alpha = alpha
        if any(v < 0 for v in self.alpha.values()):
            raise ValueError("alpha weights must be non-negative")
        for name in ("lambda1", "lambda2", "mu_attach", "alpha_left", "alpha_right",
                     "nu", "gamma", "rho1", "rho2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class TopologyWeights:
    lambda_ins: float = 1.0
    lambda_del: float = 1.0
    lambda_sub: float = 0.5
    lambda_struct: float = 0.1

    def __post_init__(self):
        if min(self.lambda_ins, self.lambda_del, self.lambda_sub, self.lambda_struct) < 0:
            raise ValueError("topology weights must be non-negative")


@dataclass
class TotalWeights:
    lambda_geo: float = 1.0
    lambda_sem: float = 1.0
    lambda_topo: float = 0.1

    def __post_init__(self):
        w = (self.lambda_geo, self.lambda_sem, self.lambda_topo)
        if min(w) < 0:
            raise ValueError("total weights must be non-negative")
        if max(w) == 0:
            raise ValueError("total weights must not all be zero")


@dataclass
class LossWeights:
    semantic: SemanticWeights = field(default_factory=SemanticWeights)
    topology: TopologyWeights = field(default_factory=TopologyWeights)
    total: TotalWeights = field(default_factory=TotalWeights)
    collide_background: bool = True


@dataclass(frozen=True)
class LossBreakdown:
    collision: float
    alignment: float
    semantic: float
    topology: float
    total: float

    @classmethod
    def combine(cls, collision, alignment, semantic, topology, w: TotalWeights) -> "LossBreakdown":
        total = w.lambda_geo * (collision + alignment) + w.lambda_sem * semantic + w.lambda_topo * topology
        return cls(float(collision), float(alignment), float(semantic), float(topology), float(total))

    def as_dict(self) -> dict:
        return {"collision": self.collision, "alignment": self.alignment, "semantic": self.semantic,
                "topology": self.topology, "total": self.total}


# ---------------------------------------------------------------------------
# geometric
# ---------------------------------------------------------------------------


def _pair_volume(a: OrientedBoundingBox, b: OrientedBoundingBox) -> float:
    if not boxes_intersect(a, b):
        return 0.0
    return intersection_volume(a, b)


def collision_terms(layout: LayoutState, i: int, include_background: bool = True,
                    others: bool = True) -> float:
    """Collision volume of dynamic object i against the other dynamics and the background."""
    a = layout.obb(i)
    total = 0.0
    if others:
        for j in range(len(layout)):
            if j != i:
                total += _pair_volume(a, layout.obb(j))
    if include_background:
        for w in layout.walls():
            total += _pair_volume(a, w)
    return total


def collision_loss(layout: LayoutState, include_background: bool = True) -> float:
    """Sum over unordered dynamic pairs and dynamic-background pairs of intersection volume.

    The floor is not a collision body: objects rest on it.
    """
    obbs = layout.obbs()
    total = 0.0
    for i in range(len(obbs)):
        for j in range(i + 1, len(obbs)):
            total += _pair_volume(obbs[i], obbs[j])
    if include_background:
        for a in obbs:
            for w in layout.walls():
                total += _pair_volume(a, w)
    return total


def support_assignments(layout: LayoutState, target: ObjectRelationshipGraph | None = None) -> dict:
    """dynamics index -> ("floor", None) or ("object", j).

    An object bound by a SupportedBy target edge to another dynamic object is
    supported by that object's top face; everything else by the floor plane.
    """
    out = {i: ("floor", None) for i in range(len(layout))}
    if target is None:
        return out
    for e in target.real_edges:
        if e.relation is RelationType.SUPPORTED_BY and e.src in layout.binding and e.dst in layout.binding:
            out[layout.binding[e.src]] = ("object", layout.binding[e.dst])
    return out


def _support_normal(layout: LayoutState, support) -> np.ndarray:
    kind, j = support
    if kind == "object":
        return layout.obb(j).up_normal
    if layout.floor_plane is not None:
        return layout.floor_plane.normal
    return np.array([0.0, 0.0, 1.0])


def alignment_term(layout: LayoutState, i: int, support) -> float:
    if support is None:
        return 0.0
    n_i = layout.obb(i).up_normal
    n_s = _support_normal(layout, support)
    c = float(n_i @ n_s) / math.sqrt(float(n_i @ n_i) * float(n_s @ n_s))
    return 1.0 - abs(c)


def alignment_loss(layout: LayoutState, support_assignments: dict | None = None,
                   strict: bool = False) -> float:
    """Sum of 1 - |n_i . n_s| over dynamic objects."""
    if support_assignments is None:
        support_assignments = {i: ("floor", None) for i in range(len(layout))}
    total = 0.0
    for i in range(len(layout)):
        s = support_assignments.get(i)
        if s is None:
            if strict:
                raise MissingSupport(f"dynamic object {i} has no support assignment")
            continue
        total += alignment_term(layout, i, s)
    return total


# ---------------------------------------------------------------------------
# semantic
# ---------------------------------------------------------------------------


def _cos(u, v) -> float:
    u0, u1, u2 = float(u[0]), float(u[1]), float(u[2])
    v0, v1, v2 = float(v[0]), float(v[1]), float(v[2])
    nu = math.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
    nv = math.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return (u0 * v0 + u1 * v1 + u2 * v2) / (nu * nv)


def horizontal_centroid_distance(a: OrientedBoundingBox, b: OrientedBoundingBox) -> float:
    d = a.center[:2] - b.center[:2]
    return math.hypot(d[0], d[1])


def relation_loss(r: RelationType, a: OrientedBoundingBox, b: OrientedBoundingBox,
                  w: SemanticWeights, cfg: ThresholdConfig) -> float:
    """Per-relation penalty for the ordered pair (a, b).

    Faces with coincident centres uses cos = 0, i.e. a loss of gamma.
    """
    r = RelationType(r)
    if r is RelationType.SUPPORTED_BY:
        d_ce = horizontal_centroid_distance(a, b)
        scale = math.sqrt(min(a.footprint_area, b.footprint_area))
        return (w.lambda1 * max(0.0, d_ce / scale - cfg.tau)
                + w.lambda2 * abs(delta_z(a, b) - cfg.epsilon))
    if r is RelationType.ATTACHED_TO:
        return w.mu_attach * (1.0 - max(volume_ratio(a, b), axis_alignment(a, b))) ** 2
    if r is RelationType.LEFT_OF:
        return w.alpha_left * (1.0 - half_space_fraction(a, b, "left")) ** 2
    if r is RelationType.RIGHT_OF:
        return w.alpha_right * (1.0 - half_space_fraction(a, b, "right")) ** 2
    if r is RelationType.NEARBY:
        return w.nu * max(0.0, min_distance(a, b) - cfg.t_near)
    if r is RelationType.FACES:
        return w.gamma * (1.0 - _cos(a.front, b.center - a.center)) ** 2
    if r is RelationType.ORIENTED_WITH:
        return (w.rho1 * max(0.0, cfg.tau - overlap_xy(a, b))
                + w.rho2 * max(0.0, cfg.epsilon_pp - _cos(a.up_normal, b.up_normal)))
    raise UnsupportedRelation(f"no loss for relation {r.label}")


def _endpoint(layout: LayoutState, node_id: int):
    """Box list for a node: one box for instances/floor, all walls for the wall anchor."""
    if node_id in layout.binding:
        return [layout.obb(layout.binding[node_id])]
    if node_id == FLOOR_NODE and layout.floor is not None:
        return [layout.floor.obb]
    if node_id == WALL_NODE:
        return layout.walls()
    raise UnboundNode(f"target node {node_id} is not bound to a layout instance")


def edge_loss(layout: LayoutState, e: OrgEdge, w: SemanticWeights, cfg: ThresholdConfig) -> float:
    """alpha_r * L_r for one target edge; the wall anchor uses the best-satisfied wall."""
    src, dst = _endpoint(layout, e.src), _endpoint(layout, e.dst)
    if not src or not dst:
        return 0.0  # no walls in this layout
    best = min(relation_loss(e.relation, a, b, w, cfg) for a in src for b in dst)
    return w.alpha[e.relation] * best


def semantic_loss(layout: LayoutState, target: ObjectRelationshipGraph, w: SemanticWeights,
                  cfg: ThresholdConfig) -> float:
    return float(sum(edge_loss(layout, e, w, cfg) for e in target.real_edges))


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------


def topology_loss(target: ObjectRelationshipGraph, current: ObjectRelationshipGraph,
                  params: EncoderParams, w: TopologyWeights) -> float:
    zt, zc = encode_graph(target, params), encode_graph(current, params)
    m = match_nodes(zt, zc, target, current)
    At, Ac = aligned_adjacency(target, current, m)
    return float(w.lambda_ins * m.n_ins + w.lambda_del * m.n_del
                 + w.lambda_sub * m.total_substitution_cost
                 + w.lambda_struct * np.linalg.norm(At - Ac))


# ---------------------------------------------------------------------------
# totals
# ---------------------------------------------------------------------------


def total_loss(layout: LayoutState, target: ObjectRelationshipGraph, weights: LossWeights,
               cfg: ThresholdConfig, params: EncoderParams,
               current: ObjectRelationshipGraph | None = None,
               topology: float | None = None) -> LossBreakdown:
    """All components plus the weighted total.

    ``topology`` may be supplied by a caller that caches it; otherwise it is
    computed from ``current`` (or the realized graph of ``layout``) unless its
    weight is zero.
    """
    col = collision_loss(layout, weights.collide_background)
    ali = alignment_loss(layout, support_assignments(layout, target))
    sem = semantic_loss(layout, target, weights.semantic, cfg)
    if topology is None:
        if weights.total.lambda_topo == 0:
            topology = 0.0
        else:
            if current is None:
                from .org import graph_of_layout
                current = graph_of_layout(layout, cfg)
            topology = topology_loss(target, current, params, weights.topology)
    out = LossBreakdown.combine(col, ali, sem, topology, weights.total)
    if not math.isfinite(out.total):
        raise NonFiniteLoss(f"non-finite loss {out}")
    return out


def local_terms(layout: LayoutState, i: int, target: ObjectRelationshipGraph, weights: LossWeights,
                cfg: ThresholdConfig, supports: dict | None = None) -> tuple[float, float, float]:
    """Unweighted (collision, alignment, semantic) contributions that involve dynamic object i.

    When only object i moves, each full component changes by exactly the
    change of the matching entry here.
    """
    if supports is None:
        supports = support_assignments(layout, target)
    col = collision_terms(layout, i, weights.collide_background)
    ali = alignment_term(layout, i, supports.get(i))
    for k, s in supports.items():
        if k != i and s == ("object", i):
            ali += alignment_term(layout, k, s)
    nid = layout.node_of().get(i)
    sem = 0.0
    if nid is not None:
        for e in target.real_edges:
            if e.src == nid or e.dst == nid:
                sem += edge_loss(layout, e, weights.semantic, cfg)
    return col, ali, sem


def local_loss(layout: LayoutState, i: int, target: ObjectRelationshipGraph, weights: LossWeights,
               cfg: ThresholdConfig, supports: dict | None = None) -> float:
    """Weighted geometric + semantic terms that depend on dynamic object i."""
    col, ali, sem = local_terms(layout, i, target, weights, cfg, supports)
    tw = weights.total
    return tw.lambda_geo * (col + ali) + tw.lambda_sem * sem


def pose_gradient(loss_fn, layout: LayoutState, object_index: int, step) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(layout)`` in (x, y, z, theta, phi)."""
    step = np.broadcast_to(np.asarray(step, dtype=np.float64), (5,))
    if np.any(step <= 0):
        raise ValueError("finite-difference steps must be positive")
    base = layout.pose(object_index).as_array()
    g = np.zeros(5)
    for k in range(5):
        vals = []
        for sgn in (1.0, -1.0):
            v = base.copy()
            v[k] += sgn * step[k]
            val = loss_fn(layout.with_pose(object_index, Pose.from_array(v)))
            if not math.isfinite(val):
                raise NonFiniteLoss(f"loss is {val} at pose {v} of object {object_index}")
            vals.append(val)
        g[k] = (vals[0] - vals[1]) / (2.0 * step[k])
    return g
