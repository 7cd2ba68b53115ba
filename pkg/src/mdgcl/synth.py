"""Stochastic-block-model feature graphs standing in for real source domains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .graph import FeatureGraph

_MEANS_SALT = 0x5EED
_BASIS_SALT = 0xB451


@dataclass(frozen=True)
class SynthDomainConfig:
    """Shape of one synthetic domain.

    Domains sharing ``basis_rotation_seed`` (and sizes) draw node features from
    the same community means; different seeds rotate those means by unrelated
    orthogonal bases.
    """

    num_nodes: int = 300
    num_communities: int = 3
    p_in: float = 0.05
    p_out: float = 0.005
    feature_dim: int = 32
    basis_rotation_seed: int = 0
    noise_std: float = 1.0

    def validate(self) -> None:
        if self.num_nodes < 1:
            raise ValidationError("num_nodes must be positive")
        if not 1 <= self.num_communities <= self.num_nodes:
            raise ValidationError("num_communities must lie in [1, num_nodes]")
        for name in ("p_in", "p_out"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {p}")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be positive")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be nonnegative")


def base_means(num_communities: int, feature_dim: int) -> np.ndarray:
    """Unrotated community means; fixed for a given (communities, width)."""
    rng = np.random.default_rng([_MEANS_SALT, num_communities, feature_dim])
    return rng.standard_normal((num_communities, feature_dim))


def rotation_basis(seed: int, dim: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix, deterministic in ``seed``."""
    rng = np.random.default_rng([_BASIS_SALT, seed, dim])
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def community_means(cfg: SynthDomainConfig) -> np.ndarray:
    return base_means(cfg.num_communities, cfg.feature_dim) @ rotation_basis(cfg.basis_rotation_seed, cfg.feature_dim).T


def generate_synthetic_domain(cfg: SynthDomainConfig, seed: int, name: str | None = None) -> FeatureGraph:
    cfg.validate()
    n, k = cfg.num_nodes, cfg.num_communities
    rng = np.random.default_rng(seed)
    comm = np.arange(n) % k

    src, dst = [], []
    for i in range(n - 1):
        same = comm[i + 1:] == comm[i]
        prob = np.where(same, cfg.p_in, cfg.p_out)
        hit = np.nonzero(rng.random(n - i - 1) < prob)[0] + i + 1
        src.append(np.full(hit.size, i))
        dst.append(hit)
    edges = np.stack([np.concatenate(src), np.concatenate(dst)], axis=1) if n > 1 else np.zeros((0, 2), np.int64)

    feats = community_means(cfg)[comm] + cfg.noise_std * rng.standard_normal((n, cfg.feature_dim))
    return FeatureGraph(n, edges, feats, comm, None, name)
