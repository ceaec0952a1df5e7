"""Object Relationship Graphs: co-occurrence weights and target-graph sampling."""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .layout import LayoutState
from .relations import (
    N_RELATIONS,
    RelationStats,
    RelationType,
    ThresholdConfig,
    classify_pair,
    conditional_distribution,
    pick_by_priority,
)
from .serialization import FORMAT_VERSION

log = logging.getLogger(__name__)

FLOOR_NODE = 0
WALL_NODE = 1
ANCHORS = ("floor", "wall")


class OrgError(Exception):
    pass


class EmptyStats(OrgError):
    pass


class DimensionMismatch(OrgError, ValueError):
    pass


@dataclass
class GraphSamplingConfig:
    js_threshold: float = 0.35
    max_resamples: int = 10
    edge_tau: float = 0.2
    gt_boost: dict[int, float] = field(default_factory=dict)
    rng_seed: int = 0
    sigma_floor: float = 0.25
    sigma_scale: float = 1.0
    mean_correction: bool = True
    max_total_factor: float = 4.0

    def __post_init__(self):
        if not 0 <= self.js_threshold <= 1:
            raise ValueError("js_threshold must lie in [0, 1]")
        if not 0 <= self.edge_tau < 1:
            raise ValueError("edge_tau must lie in [0, 1)")
        if self.max_resamples < 0:
            raise ValueError("max_resamples must be >= 0")
        self.gt_boost = {int(k): float(v) for k, v in self.gt_boost.items()}
        for cat, f in self.gt_boost.items():
            if f < 1:
                raise ValueError(f"gt_boost factor for {cat} must be >= 1, got {f}")
        if self.sigma_floor < 0 or self.sigma_scale < 0:
            raise ValueError("sigma parameters must be non-negative")
        if self.max_total_factor <= 0:
            raise ValueError("max_total_factor must be positive")


@dataclass(frozen=True)
class OrgNode:
    node_id: int
    category_id: int | None
    instance_id: int | None = None
    anchor: str | None = None


@dataclass(frozen=True)
class OrgEdge:
    src: int
    dst: int
    relation: RelationType
    weight: float = 1.0


@dataclass(eq=False)
class ObjectRelationshipGraph:
    nodes: list[OrgNode] = field(default_factory=list)
    edges: list[OrgEdge] = field(default_factory=list)

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        known = set(ids)
        for e in self.edges:
            if e.src not in known or e.dst not in known:
                raise ValueError(f"edge {e} references an unknown node")
            if not 0 <= e.weight <= 1:
                raise ValueError(f"edge weight {e.weight} outside [0, 1]")

    def index(self) -> dict[int, int]:
        return {n.node_id: k for k, n in enumerate(self.nodes)}

    def node(self, node_id: int) -> OrgNode:
        return self.nodes[self.index()[node_id]]

    @property
    def foreground_nodes(self) -> list[OrgNode]:
        return [n for n in self.nodes if n.anchor is None]

    @property
    def real_edges(self) -> list[OrgEdge]:
        return [e for e in self.edges if e.relation is not RelationType.NONE]

    @property
    def adjacency(self) -> np.ndarray:
        idx = self.index()
        A = np.zeros((len(self.nodes), len(self.nodes)))
        for e in self.real_edges:
            A[idx[e.src], idx[e.dst]] = 1.0
        return A

    def weighted_adjacency(self) -> np.ndarray:
        idx = self.index()
        W = np.zeros((len(self.nodes), len(self.nodes)))
        for e in self.real_edges:
            W[idx[e.src], idx[e.dst]] = e.weight
        return W

    def edge_key(self) -> tuple:
        return tuple(sorted((e.src, e.dst, int(e.relation)) for e in self.real_edges))

    def relation_counts(self) -> np.ndarray:
        out = np.zeros(N_RELATIONS, dtype=np.int64)
        for e in self.edges:
            out[e.relation] += 1
        return out

    def category_histogram(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for n in self.foreground_nodes:
            out[n.category_id] = out.get(n.category_id, 0) + 1
        return out

    def to_json(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "nodes": [{"id": n.node_id, "category": n.category_id, "instance": n.instance_id,
                       "anchor": n.anchor} for n in self.nodes],
            "edges": [{"src": e.src, "dst": e.dst, "relation": e.relation.label,
                       "weight": float(e.weight)} for e in self.edges],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ObjectRelationshipGraph":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported graph version {d.get('version')!r}")
        nodes = [OrgNode(int(n["id"]), n["category"], n.get("instance"), n.get("anchor"))
                 for n in d["nodes"]]
        edges = [OrgEdge(int(e["src"]), int(e["dst"]), RelationType.from_label(e["relation"]),
                         float(e["weight"])) for e in d["edges"]]
        return cls(nodes, edges)

    def same_as(self, other: "ObjectRelationshipGraph") -> bool:
        return self.to_json() == other.to_json()


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def category_vocabulary(stats: RelationStats) -> list[int]:
    cats = set(stats.category_mean)
    for i, j in stats.relation_counts:
        cats.update((i, j))
    return sorted(cats)


def cooccurrence_weights(stats: RelationStats) -> tuple[np.ndarray, list[int]]:
    """W[i, j] = count(O_i, O_j) / sum of all pair counts, plus the row/column category order."""
    counts = stats.pair_counts
    total = sum(counts.values())
    if total == 0:
        raise EmptyStats("no pair observations")
    cats = category_vocabulary(stats)
    pos = {c: k for k, c in enumerate(cats)}
    W = np.zeros((len(cats), len(cats)))
    for (i, j), c in counts.items():
        W[pos[i], pos[j]] += c
    return W / total, cats


def normalize_weights(W) -> np.ndarray:
    """D^{-1/2} W D^{-1/2} with D_ii = row sums; zero-degree rows and columns stay zero."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionMismatch("W must be square")
    if np.any(W < 0):
        raise ValueError("W must be non-negative")
    deg = W.sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > np.finfo(float).tiny
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    return inv[:, None] * W * inv[None, :]


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in bits."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionMismatch(f"shapes {p.shape} and {q.shape} differ")
    for v in (p, q):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("inputs must be probability vectors")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return float(min(1.0, max(0.0, 0.5 * kl(p) + 0.5 * kl(q))))


# ---------------------------------------------------------------------------
# node sampling
# ---------------------------------------------------------------------------


def _expected_rounded(m: float, sigma: float) -> float:
    """E[round(max(0, X))] for X ~ N(m, sigma^2), rounding half up."""
    if sigma == 0:
        return float(math.floor(max(0.0, m) + 0.5))
    kmax = int(math.ceil(max(m, 0.0) + 10 * sigma)) + 2
    k = np.arange(1, kmax + 1)
    return float(ndtr((m - (k - 0.5)) / sigma).sum())


@functools.lru_cache(maxsize=4096)
def gaussian_location(mu: float, sigma: float) -> float:
    """Location m with E[round(max(0, N(m, sigma^2)))] = mu (bisection)."""
    if mu <= 0:
        return -math.inf
    if sigma == 0:
        return mu
    lo, hi = mu - 10 * sigma - 1.0, mu + 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _expected_rounded(mid, sigma) < mu:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class NodeSample:
    counts: dict[int, int]
    js: float
    attempts: int
    branch: str  # "threshold" or "best_of"
    trimmed: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _sampling_plan(stats: RelationStats, cfg: GraphSamplingConfig):
    cats = sorted(stats.category_mean)
    mu = np.array([stats.category_mean[c] * cfg.gt_boost.get(c, 1.0) for c in cats])
    sigma = cfg.sigma_scale * np.maximum(cfg.sigma_floor, np.sqrt(np.maximum(mu, 0.0)))
    if cfg.mean_correction:
        loc = np.array([gaussian_location(float(m), float(s)) for m, s in zip(mu, sigma)])
    else:
        loc = mu.copy()
    return cats, mu, sigma, loc


def _histogram_js(counts: np.ndarray, ref: np.ndarray) -> float:
    if counts.sum() == 0 or ref.sum() == 0:
        return 1.0 if counts.sum() != ref.sum() else 0.0
    return js_divergence(counts / counts.sum(), ref / ref.sum())


def sample_nodes(stats: RelationStats, cfg: GraphSamplingConfig,
                 rng: np.random.Generator | None = None) -> NodeSample:
    """Per-category rounded, clipped Gaussian counts with JS-regularized rejection.

    The reference histogram is the (boosted) category means.  A draw whose
    divergence is at most ``js_threshold`` is accepted at once; otherwise up
    to ``max_resamples`` further draws are made and the lowest-divergence
    one is kept.
    """
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    cats, mu, sigma, loc = _sampling_plan(stats, cfg)
    if not cats:
        return NodeSample({}, 0.0, 0, "threshold")
    best = None
    for attempt in range(cfg.max_resamples + 1):
        x = loc + sigma * rng.standard_normal(len(cats))
        x = np.where(np.isfinite(x), x, 0.0)
        counts = np.floor(np.maximum(0.0, x) + 0.5).astype(np.int64)
        js = _histogram_js(counts.astype(float), mu)
        if best is None or js < best[1]:
            best = (counts, js)
        if js <= cfg.js_threshold:
            branch = "threshold"
            counts_sel, js_sel = counts, js
            break
    else:
        branch = "best_of"
        counts_sel, js_sel = best

    counts_sel = counts_sel.copy()
    cap = int(math.floor(cfg.max_total_factor * mu.sum()))
    trimmed = 0
    excess = int(counts_sel.sum()) - cap
    if excess > 0:
        # drop randomly chosen nodes until the cap holds
        pool = np.repeat(np.arange(len(cats)), counts_sel)
        drop = rng.choice(len(pool), size=excess, replace=False)
        np.subtract.at(counts_sel, pool[drop], 1)
        trimmed = excess
    out = {c: int(n) for c, n in zip(cats, counts_sel) if n > 0}
    return NodeSample(out, float(js_sel), attempt + 1, branch, trimmed)


# ---------------------------------------------------------------------------
# edges and graphs
# ---------------------------------------------------------------------------


def edge_probability(stats: RelationStats, cat_i: int, cat_j: int) -> float:
    """P(v_j | v_i): pair observations divided by all observations with subject i."""
    total = stats.subject_total(cat_i)
    if total == 0:
        return 0.0
    counts = stats.relation_counts.get((cat_i, cat_j))
    return 0.0 if counts is None else float(counts.sum()) / total


def activate_edges(nodes: list[OrgNode], stats: RelationStats, cfg: GraphSamplingConfig,
                   rng: np.random.Generator | None = None) -> list[OrgEdge]:
    """Sample one relation per ordered (foreground subject, any object) pair above the gate."""
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    edges = []
    cache: dict[tuple[int, int], tuple[float, np.ndarray]] = {}
    for a in nodes:
        if a.anchor is not None:
            continue  # anchors are never subjects in the statistics
        for b in nodes:
            if b.node_id == a.node_id or b.category_id is None:
                continue
            key = (a.category_id, b.category_id)
            if key not in cache:
                cache[key] = (edge_probability(stats, *key), conditional_distribution(stats, *key))
            p, dist = cache[key]
            if p <= cfg.edge_tau:
                continue
            rel = RelationType(int(rng.choice(N_RELATIONS, p=dist)))
            if rel is not RelationType.NONE:
                edges.append(OrgEdge(a.node_id, b.node_id, rel, min(1.0, p)))
    return edges


def anchor_nodes(stats: RelationStats) -> list[OrgNode]:
    return [OrgNode(FLOOR_NODE, stats.floor_category, None, "floor"),
            OrgNode(WALL_NODE, stats.wall_category, None, "wall")]


def build_target_graph(stats: RelationStats, cfg: GraphSamplingConfig,
                       seed: int | None = None) -> ObjectRelationshipGraph:
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    nodes = anchor_nodes(stats)
    sample = sample_nodes(stats, cfg, rng)
    nid = len(nodes)
    for cat in sorted(sample.counts):
        for _ in range(sample.counts[cat]):
            nodes.append(OrgNode(nid, cat))
            nid += 1
    edges = activate_edges(nodes, stats, cfg, rng) if not stats.is_empty() else []
    return ObjectRelationshipGraph(nodes, edges)


def layout_relations(layout: LayoutState, cfg: ThresholdConfig, i: int) -> dict:
    """Relations with subject i: {("dyn", j) | "floor" | "wall": RelationType}."""
    a = layout.obb(i)
    out = {}
    for j in range(len(layout)):
        if j != i:
            out[("dyn", j)] = classify_pair(a, layout.obb(j), cfg)
    if layout.floor is not None:
        out["floor"] = classify_pair(a, layout.floor.obb, cfg)
    walls = layout.walls()
    if walls:
        out["wall"] = pick_by_priority({classify_pair(a, w, cfg) for w in walls})
    return out


def graph_from_relations(layout: LayoutState, rels: list[dict],
                         floor_category=None, wall_category=None) -> ObjectRelationshipGraph:
    node_of = layout.node_of()
    ids = [node_of.get(i, 2 + i) for i in range(len(layout))]
    if floor_category is None and layout.floor is not None:
        floor_category = layout.floor.category_id
    if wall_category is None and layout.background:
        wall_category = layout.background[0].category_id
    nodes = [OrgNode(FLOOR_NODE, floor_category, None, "floor"),
             OrgNode(WALL_NODE, wall_category, None, "wall")]
    for i, (inst, _) in enumerate(layout.dynamics):
        nodes.append(OrgNode(ids[i], inst.category_id, inst.instance_id))
    edges = []
    for i, r in enumerate(rels):
        for key, rel in r.items():
            if rel is RelationType.NONE:
                continue
            dst = {"floor": FLOOR_NODE, "wall": WALL_NODE}.get(key) if isinstance(key, str) else ids[key[1]]
            edges.append(OrgEdge(ids[i], dst, rel, 1.0))
    edges.sort(key=lambda e: (e.src, e.dst))
    return ObjectRelationshipGraph(nodes, edges)


def graph_of_layout(layout: LayoutState, cfg: ThresholdConfig,
                    floor_category=None, wall_category=None) -> ObjectRelationshipGraph:
    """Realized graph: classify every ordered instance pair and each instance against the anchors.

    The wall anchor takes the highest-priority relation over all background
    instances.  Node ids follow the layout binding so they line up with the
    target graph.
    """
    rels = [layout_relations(layout, cfg, i) for i in range(len(layout))]
    return graph_from_relations(layout, rels, floor_category, wall_category)
