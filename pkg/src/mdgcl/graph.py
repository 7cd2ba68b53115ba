"""Undirected feature graphs, GCN normalization, readout and subgraph extraction."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError

UNLABELED = -1


def _canonical_edges(edges, num_nodes: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), np.int64)
    if arr.size:
        bad = (arr < 0) | (arr >= num_nodes)
        if bad.any():
            u, v = arr[np.argmax(bad.any(axis=1))]
            raise ValidationError(f"edge ({u}, {v}) has an endpoint outside [0, {num_nodes})")
    arr = np.sort(arr, axis=1)
    arr = arr[arr[:, 0] != arr[:, 1]]
    if arr.size:
        arr = np.unique(arr, axis=0)
    return np.ascontiguousarray(arr, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class FeatureGraph:
    """Immutable undirected graph with a dense node feature matrix.

    Edges are stored once as canonical ``(u, v)`` pairs with ``u < v``, sorted
    lexicographically. Missing labels are stored as ``UNLABELED``.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    domain_id: Optional[int] = None
    name: Optional[str] = None

    def __post_init__(self):
        n = int(self.num_nodes)
        if n < 0:
            raise ValidationError("num_nodes must be nonnegative")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValidationError(f"features must be a {n} x d matrix, got shape {feats.shape}")
        feats = feats.copy()
        feats.setflags(write=False)
        edges = _canonical_edges(self.edges, n)
        edges.setflags(write=False)
        labels = None
        if self.labels is not None:
            labels = np.array([UNLABELED if y is None else y for y in self.labels], dtype=np.int64)
            if labels.shape != (n,):
                raise ValidationError(f"labels must have length {n}, got {labels.shape[0]}")
            if (labels < UNLABELED).any():
                raise ValidationError("class ids must be nonnegative")
            labels.setflags(write=False)
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    def neighbors(self) -> list[np.ndarray]:
        """Sorted neighbor lists, one array per node."""
        both = np.concatenate([self.edges, self.edges[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        splits = np.searchsorted(both[:, 0], np.arange(1, self.num_nodes))
        return np.split(both[:, 1], splits)

    def with_features(self, features) -> "FeatureGraph":
        return FeatureGraph(self.num_nodes, self.edges, features, self.labels, self.domain_id, self.name)

    def with_domain(self, domain_id: Optional[int]) -> "FeatureGraph":
        return FeatureGraph(self.num_nodes, self.edges, self.features, self.labels, domain_id, self.name)

    def same_as(self, other: "FeatureGraph") -> bool:
        """Field-by-field equality (features compared bit-exactly)."""
        if self.num_nodes != other.num_nodes or self.domain_id != other.domain_id or self.name != other.name:
            return False
        if not np.array_equal(self.edges, other.edges):
            return False
        if self.features.shape != other.features.shape or self.features.tobytes() != other.features.tobytes():
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


def normalize_adjacency(g: FeatureGraph) -> sp.csr_matrix:
    """Return D^{-1/2}(A+I)D^{-1/2} as a CSR matrix, degrees counted with the self-loop."""
    n = g.num_nodes
    deg = g.degrees().astype(np.float64)
    loops = np.arange(n, dtype=np.int64)
    rows = np.concatenate([g.edges[:, 0], g.edges[:, 1], loops])
    cols = np.concatenate([g.edges[:, 1], g.edges[:, 0], loops])
    vals = 1.0 / np.sqrt((deg[rows] + 1.0) * (deg[cols] + 1.0))
    a = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    a.sort_indices()
    return a


def readout_sum(h: np.ndarray, nodes: Sequence[int]) -> np.ndarray:
    idx = np.asarray(list(nodes), dtype=np.int64)
    if idx.size == 0:
        raise ValidationError("readout over an empty node set")
    if (idx < 0).any() or (idx >= h.shape[0]).any():
        raise ValidationError("readout node id out of range")
    return h[idx].sum(axis=0)


def induced_subgraph(g: FeatureGraph, nodes: Sequence[int]) -> FeatureGraph:
    """Subgraph on ``nodes``, re-indexed 0..k-1 in the given order."""
    idx = np.asarray(list(nodes), dtype=np.int64)
    if idx.size == 0:
        raise ValidationError("induced subgraph over an empty node set")
    if (idx < 0).any() or (idx >= g.num_nodes).any():
        raise ValidationError("node id out of range")
    if np.unique(idx).size != idx.size:
        raise ValidationError("node set contains duplicates")
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[idx] = np.arange(idx.size)
    e = remap[g.edges]
    e = e[(e >= 0).all(axis=1)]
    labels = None if g.labels is None else g.labels[idx]
    return FeatureGraph(idx.size, e, g.features[idx], labels, g.domain_id, g.name)


def ego_nodes(g: FeatureGraph, center: int, hops: int, neighbors=None) -> list[int]:
    """Nodes within ``hops`` of ``center`` in BFS order, center first."""
    if not 0 <= center < g.num_nodes:
        raise ValidationError(f"center {center} is not a node of a {g.num_nodes}-node graph")
    if hops < 0:
        raise ValidationError("hops must be nonnegative")
    nbrs = g.neighbors() if neighbors is None else neighbors
    seen = {center}
    order = [center]
    frontier = deque([(center, 0)])
    while frontier:
        u, d = frontier.popleft()
        if d == hops:
            continue
        for v in nbrs[u]:
            v = int(v)
            if v not in seen:
                seen.add(v)
                order.append(v)
                frontier.append((v, d + 1))
    return order


def ego_network(g: FeatureGraph, center: int, hops: int) -> FeatureGraph:
    return induced_subgraph(g, ego_nodes(g, center, hops))
