"""Built-in gradient verification on small synthetic problems."""

from __future__ import annotations

import numpy as np

from .contrastive import Subgraph, build_domain_token, merge_pair
from .dimred import apply_map, fit_map
from .graph import induced_subgraph, normalize_adjacency
from .losses import FinetuneProblem, reference_pretrain_loss
from .neural import grad_check, init_attention, init_gcn, init_head
from .pipeline import map_domains
from .synth import SynthDomainConfig, generate_synthetic_domain


def synth_domains(count: int, num_nodes: int = 40, feature_dim: int = 12, seed: int = 0, **cfg):
    return [
        generate_synthetic_domain(
            SynthDomainConfig(num_nodes=num_nodes, feature_dim=feature_dim, basis_rotation_seed=seed + i, **cfg),
            seed=seed + i,
        )
        for i in range(count)
    ]


def pair_loss_fixture(dim: int = 10, hidden: int = 16, nodes: int = 8, pairs: int = 6, seed: int = 0):
    """Two domains and merged pairs of ``nodes``-node induced subgraphs, small GCN."""
    mapped, _ = map_domains(synth_domains(2, num_nodes=30, feature_dim=12, seed=seed, p_in=0.3, p_out=0.05), dim)
    tokens = [build_domain_token(g.features, i) for i, g in enumerate(mapped)]
    rng = np.random.default_rng(seed)

    def sub(i):
        ids = np.sort(rng.choice(mapped[i].num_nodes, nodes, replace=False))
        return Subgraph(induced_subgraph(mapped[i], ids), i, ids)

    samples = []
    for k in range(pairs):
        i, j = k % 2, (k // 2) % 2
        samples.append(merge_pair(sub(i), sub(j), tokens[i], tokens[j]))
    rng = np.random.default_rng(seed + 1)
    params = init_gcn(rng, dim, hidden)
    params.update(init_head(rng, "proj_pre", hidden, 2))
    return samples, params


def finetune_fixture(dim: int = 10, hidden: int = 16, heads: int = 2, seed: int = 0):
    """Target graph enhanced with the sum tokens of two source domains; node task on 4 nodes."""
    mapped, _ = map_domains(synth_domains(2, num_nodes=30, feature_dim=12, seed=seed), dim)
    tokens = np.array([build_domain_token(g.features, i).vector for i, g in enumerate(mapped)])
    g = synth_domains(1, num_nodes=20, feature_dim=12, seed=seed + 5)[0]
    x = apply_map(g.features, fit_map(g.features, dim))
    adj = normalize_adjacency(g)
    ids = np.array([0, 3, 5, 8])
    problem = FinetuneProblem(x, adj, adj[ids], g.labels[ids], tokens)
    rng = np.random.default_rng(seed + 2)
    params = init_gcn(rng, dim, hidden)
    params.update(init_attention(rng, dim, heads))
    params.update(init_head(rng, "proj_ft", hidden, 3))
    return problem, params


def gradient_reports(seed: int = 0, tolerance: float = 1e-5) -> dict:
    """grad_check reports for the pre-training and fine-tuning losses."""
    samples, params = pair_loss_fixture(seed=seed)
    pre = grad_check(lambda p: reference_pretrain_loss(p, samples), params, tolerance=tolerance)
    problem, params = finetune_fixture(seed=seed)
    ft = grad_check(problem.loss, params, tolerance=tolerance)
    return {"pretrain": pre, "finetune": ft}
