"""Pre-training corpus: random-walk subgraphs, domain tokens and merged pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .graph import FeatureGraph, induced_subgraph


@dataclass(frozen=True, eq=False)
class Subgraph:
    graph: FeatureGraph
    parent_domain: int
    source_node_ids: np.ndarray


@dataclass(frozen=True, eq=False)
class DomainToken:
    domain_id: int
    vector: np.ndarray


@dataclass(frozen=True)
class PairPlan:
    """K subgraphs per domain, N negatives per domain pair, walks of length L.

    ``N=None`` picks the class-balancing default for the domain count at hand.
    """

    K: int = 50
    N: Optional[int] = None
    L: int = 50

    def negatives(self, num_domains: int) -> int:
        n = balanced_negatives(num_domains, self.K) if self.N is None else self.N
        if self.K < 2 or self.L < 1 or n < 1:
            raise ValidationError(f"invalid pair plan K={self.K}, N={n}, L={self.L}")
        if n > self.K * self.K:
            raise ValidationError(f"N={n} exceeds the K*K={self.K * self.K} available cross-domain pairs")
        return n


def balanced_negatives(num_domains: int, k: int) -> int:
    """Smallest N giving at least as many negatives as positives."""
    positives = num_domains * math.comb(k, 2)
    return min(k * k, math.ceil(positives / math.comb(num_domains, 2)))


def expected_pair_count(num_domains: int, k: int, n: int) -> int:
    return num_domains * math.comb(k, 2) + math.comb(num_domains, 2) * n


class MergedSample:
    """Two subgraphs joined through their domain token nodes.

    The merged graph is assembled on demand; node order is a's nodes, b's
    nodes, a's token, b's token.
    """

    def __init__(self, a: Subgraph, b: Subgraph, token_a: DomainToken, token_b: DomainToken):
        self.a, self.b, self.token_a, self.token_b = a, b, token_a, token_b

    @property
    def label(self) -> int:
        return int(self.a.parent_domain == self.b.parent_domain)

    @property
    def domain_pair(self) -> tuple[int, int]:
        return (self.a.parent_domain, self.b.parent_domain)

    @property
    def token_node_ids(self) -> tuple[int, int]:
        n = self.a.graph.num_nodes + self.b.graph.num_nodes
        return (n, n + 1)

    @cached_property
    def graph(self) -> FeatureGraph:
        ga, gb = self.a.graph, self.b.graph
        na, nb = ga.num_nodes, gb.num_nodes
        ta, tb = na + nb, na + nb + 1
        edges = [
            ga.edges,
            gb.edges + na,
            np.stack([np.arange(na), np.full(na, ta)], axis=1),
            np.stack([np.arange(na, na + nb), np.full(nb, tb)], axis=1),
            np.array([[ta, tb]]),
        ]
        feats = np.vstack([ga.features, gb.features, self.token_a.vector, self.token_b.vector])
        return FeatureGraph(na + nb + 2, np.concatenate(edges), feats)


def sample_subgraph(g: FeatureGraph, length: int, rng: np.random.Generator, neighbors=None) -> Subgraph:
    """Uniform random walk of ``length`` steps from a uniform start node.

    A node without neighbours keeps the walk in place. Returns the subgraph
    induced by the visited nodes, in first-visit order.
    """
    if g.num_nodes == 0:
        raise ValidationError("cannot sample from an empty graph")
    nbrs = g.neighbors() if neighbors is None else neighbors
    cur = int(rng.integers(g.num_nodes))
    visited = {cur: None}
    for _ in range(length):
        options = nbrs[cur]
        if options.size:
            cur = int(options[rng.integers(options.size)])
            visited.setdefault(cur, None)
    ids = np.fromiter(visited, dtype=np.int64)
    domain = -1 if g.domain_id is None else g.domain_id
    return Subgraph(induced_subgraph(g, ids), domain, ids)


def build_domain_token(x: np.ndarray, domain_id: int, mean: bool = False) -> DomainToken:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("domain token needs at least one feature row")
    vec = x.sum(axis=0)
    if mean:
        vec = vec / x.shape[0]
    return DomainToken(domain_id, vec)


def merge_pair(a: Subgraph, b: Subgraph, t_a: DomainToken, t_b: DomainToken) -> MergedSample:
    widths = {a.graph.dim, b.graph.dim, t_a.vector.shape[0], t_b.vector.shape[0]}
    if len(widths) != 1:
        raise ValidationError(f"feature widths disagree: {sorted(widths)}")
    if t_a.domain_id != a.parent_domain or t_b.domain_id != b.parent_domain:
        raise ValidationError("token domain does not match its subgraph's domain")
    return MergedSample(a, b, t_a, t_b)


def sample_domain_subgraphs(g: FeatureGraph, plan: PairPlan, rng: np.random.Generator) -> list[Subgraph]:
    nbrs = g.neighbors()
    return [sample_subgraph(g, plan.L, rng, nbrs) for _ in range(plan.K)]


def build_training_set(
    domains: Sequence[FeatureGraph],
    plan: PairPlan,
    rng: np.random.Generator,
    tokens: Optional[Sequence[DomainToken]] = None,
) -> list[MergedSample]:
    """All same-domain pairs plus N sampled cross-domain pairs per domain pair.

    Domain ids are the positions in ``domains``. Per-domain sampling uses
    child generators spawned from ``rng``; negatives and the final shuffle
    draw from ``rng`` itself.
    """
    m = len(domains)
    if m < 2:
        raise ValidationError(f"need at least 2 source domains, got {m}")
    n_neg = plan.negatives(m)
    domains = [g.with_domain(i) for i, g in enumerate(domains)]
    if tokens is None:
        tokens = [build_domain_token(g.features, i) for i, g in enumerate(domains)]
    children = rng.spawn(m)
    subs = [sample_domain_subgraphs(g, plan, r) for g, r in zip(domains, children)]

    samples = []
    for i in range(m):
        for p in range(plan.K):
            for q in range(p + 1, plan.K):
                samples.append(merge_pair(subs[i][p], subs[i][q], tokens[i], tokens[i]))
    for i in range(m):
        for j in range(i + 1, m):
            for cell in rng.choice(plan.K * plan.K, size=n_neg, replace=False):
                p, q = divmod(int(cell), plan.K)
                samples.append(merge_pair(subs[i][p], subs[j][q], tokens[i], tokens[j]))
    order = rng.permutation(len(samples))
    return [samples[k] for k in order]
