"""Frozen, seeded graph encoder and category-gated node matching."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .org import ObjectRelationshipGraph, OrgNode
from .relations import RelationType


class CategoryOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class EncoderParams:
    embedding_dim: int = 32
    rounds: int = 3
    seed: int = 0
    category_count: int = 256
    relation_count: int = 7

    def __post_init__(self):
        if self.embedding_dim < 8:
            raise ValueError("embedding_dim must be >= 8")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.category_count < 1 or self.relation_count < 1:
            raise ValueError("vocabulary sizes must be positive")


@dataclass(frozen=True)
class _Weights:
    proj: np.ndarray      # (category_count + 2, d); the last two rows are the floor/wall anchors
    w_self: np.ndarray    # (d, d)
    w_in: np.ndarray      # (relations, d, d) message to the edge target
    w_out: np.ndarray     # (relations, d, d) message to the edge source


@lru_cache(maxsize=16)
def _weights(params: EncoderParams) -> _Weights:
    rng = np.random.default_rng(params.seed)
    d, r = params.embedding_dim, params.relation_count
    s = 1.0 / np.sqrt(d)
    w = _Weights(
        rng.standard_normal((params.category_count + 2, d)),
        rng.standard_normal((d, d)) * s,
        rng.standard_normal((r, d, d)) * s,
        rng.standard_normal((r, d, d)) * s,
    )
    for arr in (w.proj, w.w_self, w.w_in, w.w_out):
        arr.setflags(write=False)
    return w


def node_token(node: OrgNode, params: EncoderParams) -> int:
    """Row of the category projection: anchors get two reserved rows."""
    if node.anchor == "floor":
        return params.category_count
    if node.anchor == "wall":
        return params.category_count + 1
    c = node.category_id
    if c is None or not 0 <= c < params.category_count:
        raise CategoryOutOfRange(f"category {c} outside [0, {params.category_count})")
    return int(c)


@dataclass(frozen=True)
class GraphEmbedding:
    node_ids: tuple[int, ...]
    tokens: tuple[int, ...]
    vectors: np.ndarray

    @property
    def pooled(self) -> np.ndarray:
        if len(self.node_ids) == 0:
            return np.zeros(self.vectors.shape[1] if self.vectors.ndim == 2 else 0)
        return self.vectors.mean(axis=0)

    @property
    def node_vectors(self) -> dict[int, np.ndarray]:
        return {n: self.vectors[k] for k, n in enumerate(self.node_ids)}


def encode_graph(g: ObjectRelationshipGraph, params: EncoderParams) -> GraphEmbedding:
    """Seeded message passing.

    h0 = P[token]; for K rounds
        h <- tanh(h W_self + sum_{(s->t, r)} [h_s W_in[r] at t, h_t W_out[r] at s])
    Edge weights are ignored; None edges carry no message.
    """
    w = _weights(params)
    tokens = tuple(node_token(n, params) for n in g.nodes)
    idx = g.index()
    h = w.proj[list(tokens)] if tokens else np.zeros((0, params.embedding_dim))
    edges = []
    for e in g.real_edges:
        if not 0 <= int(e.relation) < params.relation_count:
            raise ValueError(f"relation {e.relation} outside the encoder vocabulary")
        edges.append((idx[e.src], idx[e.dst], int(e.relation)))
    for _ in range(params.rounds):
        msg = h @ w.w_self
        for s, t, r in edges:
            msg[t] += h[s] @ w.w_in[r]
            msg[s] += h[t] @ w.w_out[r]
        h = np.tanh(msg)
    return GraphEmbedding(tuple(n.node_id for n in g.nodes), tokens, h)


@dataclass(frozen=True)
class NodeMatching:
    pairs: tuple[tuple[int, int], ...]  # (target node id, current node id)
    unmatched_target: int               # N_ins: nodes the current graph lacks
    unmatched_current: int              # N_del: surplus nodes in the current graph
    total_substitution_cost: float
    target_unmatched_ids: tuple[int, ...] = ()
    current_unmatched_ids: tuple[int, ...] = ()

    @property
    def n_ins(self) -> int:
        return self.unmatched_target

    @property
    def n_del(self) -> int:
        return self.unmatched_current


def match_nodes(zt: GraphEmbedding, zc: GraphEmbedding, gt: ObjectRelationshipGraph | None = None,
                gc: ObjectRelationshipGraph | None = None) -> NodeMatching:
    """Per-token rectangular Hungarian matching on squared Euclidean distance.

    Nodes of different categories never match, so solving each category
    block separately is exact.  The graphs are accepted for interface
    symmetry; tokens stored in the embeddings already carry the categories.
    """
    groups_t: dict[int, list[int]] = {}
    groups_c: dict[int, list[int]] = {}
    for k, tok in enumerate(zt.tokens):
        groups_t.setdefault(tok, []).append(k)
    for k, tok in enumerate(zc.tokens):
        groups_c.setdefault(tok, []).append(k)
    pairs, cost = [], 0.0
    matched_t, matched_c = set(), set()
    for tok in sorted(set(groups_t) & set(groups_c)):
        it, ic = groups_t[tok], groups_c[tok]
        diff = zt.vectors[it][:, None, :] - zc.vectors[ic][None, :, :]
        C = np.einsum("ijk,ijk->ij", diff, diff)
        rows, cols = linear_sum_assignment(C)
        for r, c in zip(rows, cols):
            pairs.append((zt.node_ids[it[r]], zc.node_ids[ic[c]]))
            matched_t.add(it[r])
            matched_c.add(ic[c])
            cost += float(C[r, c])
    ut = tuple(zt.node_ids[k] for k in range(len(zt.node_ids)) if k not in matched_t)
    uc = tuple(zc.node_ids[k] for k in range(len(zc.node_ids)) if k not in matched_c)
    pairs.sort()
    return NodeMatching(tuple(pairs), len(ut), len(uc), cost, ut, uc)


def aligned_adjacency(gt: ObjectRelationshipGraph, gc: ObjectRelationshipGraph,
                      m: NodeMatching) -> tuple[np.ndarray, np.ndarray]:
    """Adjacencies over a shared ordering: matched pairs, then unmatched target, then unmatched current.

    A node absent from a graph contributes zero rows and columns.
    """
    order_t = [t for t, _ in m.pairs] + list(m.target_unmatched_ids) + [None] * m.unmatched_current
    order_c = [c for _, c in m.pairs] + [None] * m.unmatched_target + list(m.current_unmatched_ids)

    def build(g, order):
        pos = {nid: k for k, nid in enumerate(order) if nid is not None}
        A = np.zeros((len(order), len(order)))
        for e in g.real_edges:
            A[pos[e.src], pos[e.dst]] = 1.0
        return A

    return build(gt, order_t), build(gc, order_c)


def relation_vocabulary() -> int:
    return len(RelationType) - 1
