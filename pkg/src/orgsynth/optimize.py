"""Layout initialization, 5-DOF pose refinement and scene synthesis."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .decompose import LabeledInstance, SceneRepository
from .embed import EncoderParams
from .geometry import (
    GeometryError,
    OrientedBoundingBox,
    PlaneModel,
    PointCloud,
    Pose,
    apply_pose,
    apply_pose_obb,
    boxes_intersect,
    ransac_plane,
)
from .layout import LayoutState
from .losses import (
    LossBreakdown,
    LossWeights,
    NonFiniteLoss,
    local_loss,
    local_terms,
    pose_gradient,
    support_assignments,
    topology_loss,
    total_loss,
)
from .org import (
    GraphSamplingConfig,
    ObjectRelationshipGraph,
    build_target_graph,
    graph_from_relations,
    layout_relations,
)
from .plyio import LabeledScene
from .relations import RelationStats, ThresholdConfig, classify_pair

log = logging.getLogger(__name__)

__all__ = [
    "EmptyRepository", "MissingCategory", "LayoutState", "OptimizerConfig", "OptResult",
    "SynthesisConfig", "SynthesisResult", "initialize_layout", "refine", "synthesize_scene",
    "bake_layout",
]


class OptimizeError(Exception):
    pass


class EmptyRepository(OptimizeError):
    pass


class MissingCategory(OptimizeError):
    pass


@dataclass
class OptimizerConfig:
    max_iters: int = 500
    loss_threshold: float = 1e-3
    step_size: float = 0.1
    step_decay: float = 0.7
    fd_steps: tuple = (1e-2, 1e-2, 1e-2, 5e-3, 5e-3)
    phi_clamp: float = 0.2
    rng_seed: int = 0
    min_step: float = 1e-4
    patience: int = 25          # iterations; 0 disables the plateau stop
    plateau_tol: float = 1e-4   # relative improvement required over ``patience`` iterations
    escape_scales: tuple = (0.25, 1.0, 3.0)  # compass-probe lengths (m, and rad for yaw); () disables

    def __post_init__(self):
        self.fd_steps = tuple(float(s) for s in self.fd_steps)
        self.escape_scales = tuple(float(s) for s in self.escape_scales)
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.step_decay < 1:
            raise ValueError("step_decay must lie in (0, 1)")
        if len(self.fd_steps) != 5 or min(self.fd_steps) <= 0:
            raise ValueError("fd_steps must be five positive deltas")
        if self.phi_clamp < 0 or self.loss_threshold < 0 or self.min_step < 0:
            raise ValueError("phi_clamp, loss_threshold and min_step must be non-negative")
        if self.patience < 0 or self.plateau_tol < 0:
            raise ValueError("patience and plateau_tol must be non-negative")
        if any(v <= 0 for v in self.escape_scales):
            raise ValueError("escape_scales must be positive")


@dataclass
class OptResult:
    final_layout: LayoutState
    loss_trace: list[LossBreakdown]
    converged: bool
    iterations_used: int
    stop_reason: str = ""
    accepted_steps: int = 0

    @property
    def final(self) -> LossBreakdown:
        return self.loss_trace[-1]


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _floor_frame(floor: LabeledInstance):
    """Centre, the two horizontal axes and their half extents of the floor box."""
    obb = floor.obb
    order = np.argsort(np.abs(obb.axes[:, 2]))
    h = order[:2]
    return obb.center, obb.axes[h], obb.half_extents[h]


def _floor_plane(floor: LabeledInstance, seed: int, tol: float = 0.01) -> PlaneModel:
    """Upper supporting surface of the floor instance.

    A floor cloud with thickness (both faces of a slab) holds two parallel
    planes; the fit moves up to the higher one while it carries at least 30%
    as many inliers as the current plane.
    """
    try:
        pts = floor.cloud.points
        plane = ransac_plane(pts, iterations=200, inlier_tol=tol, rng_seed=seed)
        if abs(plane.normal[2]) > 0.5:
            for _ in range(3):
                above = pts[pts @ plane.normal - plane.offset > tol]
                if len(above) < max(3, 0.3 * plane.inlier_count):
                    break
                upper = ransac_plane(above, iterations=200, inlier_tol=tol, rng_seed=seed)
                if abs(upper.normal @ plane.normal) < 0.99 or upper.inlier_count < 0.3 * plane.inlier_count:
                    break
                plane = upper
            return plane
    except GeometryError:
        pass
    top = floor.obb.z_range()[1]
    return PlaneModel(np.array([0.0, 0.0, 1.0]), top, len(floor.cloud))


def footprint_radius(obb: OrientedBoundingBox) -> float:
    c = obb.corners()[:, :2] - obb.center[:2]
    return float(np.sqrt((c ** 2).sum(axis=1).max()))


def snap_height(obb: OrientedBoundingBox, x: float, y: float, theta: float, phi: float,
                plane: PlaneModel) -> float:
    """z placing the posed box's lowest corner on the plane."""
    posed = apply_pose_obb(obb, Pose(x, y, 0.0, theta, phi))
    return plane.height_at(x, y) - posed.z_range()[0]


def place_on_floor(inst: LabeledInstance, floor: LabeledInstance, plane: PlaneModel,
                   rng: np.random.Generator, obstacles=(), tries: int = 1) -> Pose:
    """Uniform yaw and footprint position, base snapped to the floor plane.

    With ``tries`` > 1, draws colliding with ``obstacles`` are rejected; the
    last draw is kept when every try collides.
    """
    c, axes, half = _floor_frame(floor)
    pose = None
    for _ in range(max(1, tries)):
        theta = float(rng.uniform(-math.pi, math.pi))
        posed = apply_pose_obb(inst.obb, Pose(0.0, 0.0, 0.0, theta, 0.0))
        r = footprint_radius(posed)
        room = np.maximum(half - r, 0.0)
        u = rng.uniform(-room[0], room[0]) if room[0] > 0 else 0.0
        v = rng.uniform(-room[1], room[1]) if room[1] > 0 else 0.0
        xy = c[:2] + u * axes[0, :2] + v * axes[1, :2]
        z = snap_height(inst.obb, xy[0], xy[1], theta, 0.0, plane)
        pose = Pose(float(xy[0]), float(xy[1]), z, theta, 0.0)
        box = apply_pose_obb(inst.obb, pose)
        if not any(boxes_intersect(box, o) for o in obstacles):
            break
    return pose


def initialize_layout(target: ObjectRelationshipGraph, repo: SceneRepository, rng_seed: int,
                      strict: bool = False, placement_tries: int = 50) -> LayoutState:
    """Random floor-snapped placement of one repository instance per target node.

    A floor is drawn at random and the background instances of its source
    scene come with it.  A node whose category has no repository instance is
    re-drawn from another foreground category (``strict`` raises instead).
    Positions colliding with already placed boxes or walls are re-drawn up to
    ``placement_tries`` times (1 gives plain uniform placement).
    """
    if not repo.floors:
        raise EmptyRepository("repository has no floor instances")
    fg_nodes = sorted(target.foreground_nodes, key=lambda n: n.node_id)
    if fg_nodes and not repo.foregrounds:
        raise EmptyRepository("repository has no foreground instances")
    rng = np.random.default_rng(rng_seed)
    floor = repo.floors[int(rng.integers(len(repo.floors)))]
    background = [b for b in repo.backgrounds if b.source_scene == floor.source_scene]
    plane = _floor_plane(floor, rng_seed)
    by_cat: dict[int, list[LabeledInstance]] = {}
    for inst in repo.foregrounds:
        by_cat.setdefault(inst.category_id, []).append(inst)
    available = sorted(by_cat)
    dynamics, binding = [], {}
    for node in fg_nodes:
        pool = by_cat.get(node.category_id)
        if pool is None:
            if strict:
                raise MissingCategory(f"no repository instance of category {node.category_id}")
            sub = available[int(rng.integers(len(available)))]
            log.warning("category %s missing from repository; substituting %s", node.category_id, sub)
            pool = by_cat[sub]
        inst = pool[int(rng.integers(len(pool)))]
        binding[node.node_id] = len(dynamics)
        obstacles = [b.obb for b in background] + [apply_pose_obb(i.obb, p) for i, p in dynamics]
        dynamics.append((inst, place_on_floor(inst, floor, plane, rng, obstacles, placement_tries)))
    return LayoutState(floor, background, dynamics, binding, plane)


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------


class _TopologyTracker:
    """Realized relations kept incrementally; topology loss cached by edge set."""

    def __init__(self, layout, target, weights, thresholds, params):
        self.target, self.weights, self.cfg, self.params = target, weights, thresholds, params
        self.active = weights.total.lambda_topo > 0
        self.cache: dict[tuple, float] = {}
        self.rels = [layout_relations(layout, thresholds, i) for i in range(len(layout))] if self.active else None

    def propose(self, layout: LayoutState, i: int):
        if not self.active:
            return None, 0.0
        rels = [dict(r) for r in self.rels]
        rels[i] = layout_relations(layout, self.cfg, i)
        a = layout.obb(i)
        for k in range(len(layout)):
            if k != i:
                rels[k][("dyn", i)] = classify_pair(layout.obb(k), a, self.cfg)
        return rels, self.value(layout, rels)

    def value(self, layout, rels=None) -> float:
        if not self.active:
            return 0.0
        rels = self.rels if rels is None else rels
        g = graph_from_relations(layout, rels, *self._anchor_categories())
        key = g.edge_key()
        if key not in self.cache:
            self.cache[key] = topology_loss(self.target, g, self.params, self.weights.topology)
        return self.cache[key]

    def _anchor_categories(self):
        idx = {n.anchor: n.category_id for n in self.target.nodes if n.anchor}
        return idx.get("floor"), idx.get("wall")


def _clamp(pose_vec: np.ndarray, cfg: OptimizerConfig) -> Pose:
    v = pose_vec.copy()
    v[4] = float(np.clip(v[4], -cfg.phi_clamp, cfg.phi_clamp))
    return Pose.from_array(v)


def _escape_probes(pose: Pose, scales, partners) -> list[np.ndarray]:
    """Compass moves of +-s along x, y, z and yaw, plus horizontal moves toward partner centres."""
    base = pose.as_array()
    out = []
    for s in scales:
        for k in (0, 1, 2, 3):
            for sgn in (1.0, -1.0):
                v = base.copy()
                v[k] += sgn * (min(s, math.pi) if k == 3 else s)
                out.append(v)
    for c in partners:
        for frac in (0.25, 0.5, 0.75, 1.0):
            v = base.copy()
            v[:2] += frac * (np.asarray(c[:2]) - base[:2])
            out.append(v)
    return out


def _partner_centres(layout: LayoutState, target: ObjectRelationshipGraph, i: int) -> list[np.ndarray]:
    nid = layout.node_of().get(i)
    out = []
    for e in target.real_edges:
        other = e.dst if e.src == nid else e.src if e.dst == nid else None
        if other in layout.binding:
            out.append(layout.obb(layout.binding[other]).center)
    return out


def refine(layout: LayoutState, target: ObjectRelationshipGraph, weights: LossWeights,
           cfg: OptimizerConfig, thresholds: ThresholdConfig, encoder_params: EncoderParams) -> OptResult:
    """Round-robin coordinate descent with per-object step acceptance.

    The finite-difference gradient covers the terms that depend on the moving
    object (collision, alignment, semantic); the topology term is piecewise
    constant and enters only through acceptance.  A proposal is accepted iff
    the full total strictly decreases, so the trace is non-increasing.  The
    candidate total is updated from object i's own terms instead of being
    recomputed over every pair.
    """
    supports = support_assignments(layout, target)
    topo = _TopologyTracker(layout, target, weights, thresholds, encoder_params)
    current = total_loss(layout, target, weights, thresholds, encoder_params, topology=topo.value(layout))
    trace = [current]
    if current.total <= cfg.loss_threshold:
        return OptResult(layout, trace, True, 0, "threshold", 0)
    steps = np.full(len(layout), cfg.step_size)
    accepted_total = 0
    reason = "max_iters"
    history = [current.total]
    it = 0
    for it in range(1, cfg.max_iters + 1):
        accepted = 0
        moved_any = False
        for i in range(len(layout)):
            if steps[i] < cfg.min_step:
                continue

            def f(lay, i=i):
                return local_loss(lay, i, target, weights, thresholds, supports)

            def candidate(proposal, i=i):
                rels, topo_val = topo.propose(proposal, i)
                before = local_terms(layout, i, target, weights, thresholds, supports)
                after = local_terms(proposal, i, target, weights, thresholds, supports)
                cand = LossBreakdown.combine(
                    *(max(0.0, c - b + a) for c, b, a in
                      zip((current.collision, current.alignment, current.semantic), before, after)),
                    topo_val, weights.total)
                if not math.isfinite(cand.total):
                    raise NonFiniteLoss(f"object {i}: non-finite total at iteration {it}")
                return rels, cand

            g = pose_gradient(f, layout, i, cfg.fd_steps)
            if not np.any(g):
                # Flat plateau of the local terms (e.g. a hinge or half-space
                # fraction saturated at its worst value): try probe moves.
                steps[i] *= cfg.step_decay
                if not cfg.escape_scales or f(layout) <= 0.0:
                    continue
                vecs = _escape_probes(layout.pose(i), cfg.escape_scales, _partner_centres(layout, target, i))
                probes = [layout.with_pose(i, _clamp(v, cfg)) for v in vecs]
                scored = sorted(((f(p), k) for k, p in enumerate(probes)), key=lambda t: t[0])
                for val, k in scored[:3]:
                    if val >= f(layout):
                        break
                    rels, cand = candidate(probes[k])
                    if cand.total < current.total:
                        layout, current = probes[k], cand
                        if rels is not None:
                            topo.rels = rels
                        accepted += 1
                        moved_any = True
                        steps[i] = cfg.step_size
                        break
                continue
            moved_any = True
            proposal = layout.with_pose(i, _clamp(layout.pose(i).as_array() - steps[i] * g, cfg))
            rels, cand = candidate(proposal)
            if cand.total < current.total:
                layout, current = proposal, cand
                if rels is not None:
                    topo.rels = rels
                accepted += 1
                steps[i] = min(cfg.step_size, steps[i] / cfg.step_decay)
            else:
                steps[i] *= cfg.step_decay
        if accepted:
            trace.append(current)
            accepted_total += accepted
        if current.total <= cfg.loss_threshold:
            return OptResult(layout, trace, True, it, "threshold", accepted_total)
        if not moved_any and np.all(steps < cfg.min_step):
            reason = "stalled"
            break
        history.append(current.total)
        if cfg.patience and len(history) > cfg.patience:
            past = history[-cfg.patience - 1]
            if past - current.total <= cfg.plateau_tol * max(past, 1.0):
                reason = "plateau"
                break
    return OptResult(layout, trace, current.total <= cfg.loss_threshold, it, reason, accepted_total)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


@dataclass
class SynthesisConfig:
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    sampling: GraphSamplingConfig = field(default_factory=GraphSamplingConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    encoder: EncoderParams = field(default_factory=EncoderParams)
    strict: bool = False
    placement_tries: int = 50

    def __post_init__(self):
        if self.placement_tries < 1:
            raise ValueError("placement_tries must be >= 1")


@dataclass
class SynthesisResult:
    scene: LabeledScene
    target: ObjectRelationshipGraph
    realized: ObjectRelationshipGraph
    result: OptResult
    seed: int

    @property
    def layout(self) -> LayoutState:
        return self.result.final_layout


def bake_layout(layout: LayoutState, name: str = "") -> LabeledScene:
    """Static clouds copied verbatim, dynamic clouds moved by their poses.

    Instance ids: floor 0, then background in order, then dynamics in order.
    """
    parts, labels, instances = [], [], []
    statics = ([layout.floor] if layout.floor is not None else []) + list(layout.background)
    for inst in statics:
        parts.append(inst.cloud)
    for inst, pose in layout.dynamics:
        parts.append(apply_pose(inst.cloud, inst.obb, pose)[0])
    for k, inst in enumerate(statics + [d[0] for d in layout.dynamics]):
        labels.append(np.full(len(inst.cloud), inst.category_id, dtype=np.int64))
        instances.append(np.full(len(inst.cloud), k, dtype=np.int64))
    cloud = PointCloud.concat(parts)
    lab = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    ins = np.concatenate(instances) if instances else np.zeros(0, dtype=np.int64)
    return LabeledScene(cloud, lab, ins, name)


def synthesize_scene(stats: RelationStats, repo: SceneRepository, config: SynthesisConfig,
                     seed: int, name: str = "") -> SynthesisResult:
    from .org import graph_of_layout

    target = build_target_graph(stats, config.sampling, seed)
    layout = initialize_layout(target, repo, seed, config.strict, config.placement_tries)
    res = refine(layout, target, config.weights, config.optimizer, config.thresholds, config.encoder)
    final = res.final_layout
    anchors = {n.anchor: n.category_id for n in target.nodes if n.anchor}
    realized = graph_of_layout(final, config.thresholds, anchors.get("floor"), anchors.get("wall"))
    return SynthesisResult(bake_layout(final, name), target, realized, res, seed)
