"""Pre-training, few-shot splits, target enhancement, fine-tuning and evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .checkpoint import CONFIG_PREFIX, Checkpoint
from .contrastive import PairPlan, build_domain_token, build_training_set
from .dimred import DimMap, apply_map, fit_map
from .errors import NumericError, ValidationError
from .graph import UNLABELED, FeatureGraph, ego_nodes, induced_subgraph, normalize_adjacency
from .losses import FinetuneProblem, PairBatchKernel, readout_pool
from .neural import (
    AdamState,
    Params,
    adam_step,
    attention_enhance,
    check_heads,
    gcn_forward,
    init_attention,
    init_gcn,
    init_head,
    softmax_cross_entropy,
)
from .rng import substream

log = logging.getLogger(__name__)

TASKS = ("node", "graph")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    dim_target: int = 50
    hidden: int = 256
    K: int = 50
    N: Optional[int] = None
    walk_len: int = 50
    seed: int = 0
    mean_tokens: bool = False
    holdout: float = 0.0

    @property
    def plan(self) -> PairPlan:
        return PairPlan(self.K, self.N, self.walk_len)

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "dim_target", "hidden", "K", "walk_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if not 0.0 <= self.holdout < 1.0:
            raise ValidationError("holdout must lie in [0, 1)")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 200
    lr: float = 1e-4
    heads: int = 2
    ego_hops: int = 2
    hidden: int = 256
    dim_target: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.lr <= 0 or self.ego_hops < 0:
            raise ValidationError("fine-tuning needs epochs >= 1, lr > 0 and ego_hops >= 0")


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    epoch_losses: list = field(default_factory=list)
    initial_loss: float = float("nan")
    holdout_accuracy: list = field(default_factory=list)


@dataclass(frozen=True)
class FewShotSplit:
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray
    shots: int


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float


# --- pre-training -----------------------------------------------------------


def map_domains(domains: Sequence[FeatureGraph], dim_target: int):
    maps, mapped = [], []
    for i, g in enumerate(domains):
        if g.num_nodes == 0:
            raise ValidationError(f"source domain {i} has no nodes")
        m = fit_map(g.features, dim_target)
        maps.append(m)
        mapped.append(FeatureGraph(g.num_nodes, g.edges, apply_map(g.features, m), g.labels, i, g.name))
    return mapped, maps


def _accuracy(pred, truth) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(truth))) if len(truth) else float("nan")


def run_pretraining(domains: Sequence[FeatureGraph], cfg: PretrainConfig) -> PretrainResult:
    """Train the GCN and pair head on same-domain vs cross-domain merged pairs."""
    cfg.validate()
    if len(domains) < 2:
        raise ValidationError(f"pre-training needs at least 2 source domains, got {len(domains)}")
    mapped, maps = map_domains(domains, cfg.dim_target)
    tokens = [build_domain_token(g.features, i, mean=cfg.mean_tokens) for i, g in enumerate(mapped)]
    samples = build_training_set(mapped, cfg.plan, substream(cfg.seed, "sampling"), tokens)

    held = []
    train = samples
    if cfg.holdout > 0:
        perm = substream(cfg.seed, "holdout").permutation(len(samples))
        n_held = int(round(len(samples) * cfg.holdout))
        held_set = set(perm[:n_held].tolist())
        held = [samples[i] for i in sorted(held_set)]
        train = [s for i, s in enumerate(samples) if i not in held_set]
    held_labels = np.array([s.label for s in held])

    kernel = PairBatchKernel(samples)
    init_rng = substream(cfg.seed, "init")
    params = init_gcn(init_rng, cfg.dim_target, cfg.hidden)
    params.update(init_head(init_rng, "proj_pre", cfg.hidden, 2))
    state = AdamState(lr=cfg.lr)
    batch_rng = substream(cfg.seed, "batches")

    result = PretrainResult(Checkpoint())
    result.initial_loss = _mean_loss(kernel, params, train, cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            loss, grads = kernel.loss(params, batch)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite pre-training loss at epoch {epoch + 1}")
            adam_step(state, params, grads)
            total += loss * len(batch)
        result.epoch_losses.append(total / len(train))
        msg = f"pretrain epoch {epoch + 1}/{cfg.epochs} loss {result.epoch_losses[-1]:.6f}"
        if held:
            result.holdout_accuracy.append(_accuracy(kernel.predict(params, held), held_labels))
            msg += f" holdout acc {result.holdout_accuracy[-1]:.4f}"
        log.info(msg)

    ckpt = result.checkpoint
    for name in ("gcn.W1", "gcn.W2", "proj_pre.W"):
        ckpt[name] = params[name]
    for tok in tokens:
        ckpt[f"token.{tok.domain_id}"] = tok.vector
    for i, m in enumerate(maps):
        ckpt[f"vmap.{i}"] = m.projection
    echo = asdict(cfg)
    echo["N"] = cfg.plan.negatives(len(domains))
    for key, value in echo.items():
        ckpt[CONFIG_PREFIX + key] = float(value)
    return result


def _mean_loss(kernel: PairBatchKernel, params: Params, samples, chunk: int) -> float:
    total = 0.0
    for start in range(0, len(samples), chunk):
        batch = samples[start:start + chunk]
        e, _ = kernel.embed(params, batch)
        total += softmax_cross_entropy(e @ params["proj_pre.W"], [x.label for x in batch])[0] * len(batch)
    return total / len(samples)


def pretrain(domains: Sequence[FeatureGraph], cfg: PretrainConfig) -> Checkpoint:
    return run_pretraining(domains, cfg).checkpoint


def gcn_params(ckpt: Checkpoint) -> Params:
    return {n: np.array(ckpt[n]) for n in ("gcn.W1", "gcn.W2")}


def embed_graph(params: Params, g: FeatureGraph) -> np.ndarray:
    """Node embeddings f(V, E, X) of an already dimension-unified graph."""
    h, _ = gcn_forward(normalize_adjacency(g), g.features, params)
    return h


def source_embeddings(ckpt: Checkpoint, domains: Sequence[FeatureGraph]) -> list[np.ndarray]:
    """Embed each source domain with its stored map and the pre-trained GCN."""
    params = gcn_params(ckpt)
    out = []
    for i, g in enumerate(domains):
        x = g.features @ ckpt[f"vmap.{i}"]
        out.append(embed_graph(params, g.with_features(x)))
    return out


# --- few-shot splits and metrics -------------------------------------------


def few_shot_split(labels, m: int, rng: np.random.Generator) -> FewShotSplit:
    """m training instances per class; the rest shuffled and cut 1:9 into val/test."""
    labels = np.array([UNLABELED if y is None else y for y in labels], dtype=np.int64)
    if m < 1:
        raise ValidationError("shots must be positive")
    labeled = np.nonzero(labels != UNLABELED)[0]
    if labeled.size == 0:
        raise ValidationError("no labeled instances to split")
    train = []
    for c in np.unique(labels[labeled]):
        ids = labeled[labels[labeled] == c]
        if ids.size < m:
            raise ValidationError(f"class {c} has {ids.size} labeled instances, fewer than {m} shots")
        train.append(np.sort(rng.choice(ids, size=m, replace=False)))
    train = np.concatenate(train)
    rest = rng.permutation(np.setdiff1d(labeled, train))
    n_val = min(rest.size, max(1, int(np.floor(rest.size / 10 + 0.5))))
    return FewShotSplit(train, rest[:n_val], rest[n_val:], m)


def evaluate_metrics(preds, truth, num_classes: int) -> Metrics:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape or preds.size == 0:
        raise ValidationError("predictions and truth must be nonempty and equally long")
    for arr in (preds, truth):
        if (arr < 0).any() or (arr >= num_classes).any():
            raise ValidationError(f"class id outside [0, {num_classes})")
    f1 = np.zeros(num_classes)
    for c in range(num_classes):
        tp = np.sum((preds == c) & (truth == c))
        fp = np.sum((preds == c) & (truth != c))
        fn = np.sum((preds != c) & (truth == c))
        if tp:
            precision, recall = tp / (tp + fp), tp / (tp + fn)
            f1[c] = 2 * precision * recall / (precision + recall)
    return Metrics(float(np.mean(preds == truth)), float(f1.mean()))


def domain_separation(embeddings: np.ndarray, domain_ids, domains: Optional[Sequence[int]] = None) -> dict:
    """Per-domain spread around the centroid and pairwise centroid distances."""
    emb = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(domain_ids)
    present = sorted(set(ids.tolist()))
    wanted = present if domains is None else list(domains)
    for d in wanted:
        if d not in present:
            raise ValidationError(f"domain {d} has no embedding rows")
    if len(wanted) < 2:
        raise ValidationError("domain separation needs at least 2 domains")
    centroids = {d: emb[ids == d].mean(axis=0) for d in wanted}
    intra = {d: float(np.linalg.norm(emb[ids == d] - centroids[d], axis=1).mean()) for d in wanted}
    inter = {
        (a, b): float(np.linalg.norm(centroids[a] - centroids[b]))
        for i, a in enumerate(wanted) for b in wanted[i + 1:]
    }
    return {"intra_mean": intra, "inter": inter, "centroids": centroids}


# --- downstream ----------------------------------------------------------------


def enhance_target(g_t: FeatureGraph, ckpt: Checkpoint, attn: Params) -> np.ndarray:
    """Map the target features to the token width and add the token attention summary."""
    tokens = ckpt.tokens()
    dim_map = fit_map(g_t.features, tokens.shape[1])
    enhanced, _ = attention_enhance(apply_map(g_t.features, dim_map), tokens, attn)
    return enhanced


def task_instances(g: FeatureGraph, task: str, ids: np.ndarray, hops: int, adj=None, neighbors=None):
    """Propagation and pooling operators for the instances ``ids`` of a task.

    Node task: rows of the full graph's Â. Graph task: the ``hops`` ego network
    of every id, each normalized on its own and sum-pooled.
    """
    if task == "node":
        adj = normalize_adjacency(g) if adj is None else adj
        return adj, adj[ids]
    if task != "graph":
        raise ValidationError(f"task must be one of {TASKS}, got {task!r}")
    nbrs = g.neighbors() if neighbors is None else neighbors
    blocks, pools, picks = [], [], []
    for c in ids:
        nodes = ego_nodes(g, int(c), hops, nbrs)
        a = normalize_adjacency(induced_subgraph(g, nodes))
        blocks.append(a)
        pools.append(readout_pool(a))
        picks.extend(nodes)
    total = len(picks)
    select = sp.csr_matrix((np.ones(total), (np.arange(total), np.array(picks))), shape=(total, g.num_nodes))
    return sp.block_diag(blocks, format="csr") @ select, sp.block_diag(pools, format="csr")


@dataclass
class FinetunedModel:
    """Downstream classifier: GCN, task head, optional token attention, target map."""

    params: Params
    dim_map: DimMap
    task: str
    num_classes: int
    ego_hops: int
    tokens: Optional[np.ndarray] = None
    best_epoch: int = 0

    def problem(self, g: FeatureGraph, ids: np.ndarray, adj=None, neighbors=None) -> FinetuneProblem:
        x = apply_map(g.features, self.dim_map)
        prop, pool = task_instances(g, self.task, ids, self.ego_hops, adj, neighbors)
        return FinetuneProblem(x, prop, pool, g.labels[ids], self.tokens)

    def predict(self, g: FeatureGraph, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        logits, _ = self.problem(g, ids).logits(self.params)
        return np.argmax(logits, axis=1)

    def evaluate(self, g: FeatureGraph, ids) -> Metrics:
        ids = np.asarray(ids, dtype=np.int64)
        return evaluate_metrics(self.predict(g, ids), g.labels[ids], self.num_classes)

    def to_checkpoint(self) -> Checkpoint:
        ckpt = Checkpoint()
        for name in sorted(self.params):
            ckpt[name] = self.params[name]
        if self.tokens is not None:
            for i, t in enumerate(self.tokens):
                ckpt[f"token.{i}"] = t
        ckpt["vmap.target"] = self.dim_map.projection
        ckpt["vmap.target.singular_values"] = self.dim_map.singular_values
        ckpt[CONFIG_PREFIX + "task"] = float(TASKS.index(self.task))
        ckpt[CONFIG_PREFIX + "num_classes"] = float(self.num_classes)
        ckpt[CONFIG_PREFIX + "ego_hops"] = float(self.ego_hops)
        ckpt[CONFIG_PREFIX + "best_epoch"] = float(self.best_epoch)
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FinetunedModel":
        if "proj_ft.W" not in ckpt or "vmap.target" not in ckpt:
            raise ValidationError("checkpoint is not a fine-tuned model")
        cfg = ckpt.config()
        params = {n: np.array(t) for n, t in ckpt.items()
                  if n.startswith(("gcn.", "attn.", "proj_ft."))}
        tokens = ckpt.tokens() if any(n.startswith("token.") for n in ckpt) else None
        if tokens is not None and not any(n.startswith("attn.") for n in params):
            tokens = None
        dim_map = DimMap(np.array(ckpt["vmap.target"]), np.array(ckpt["vmap.target.singular_values"]))
        return cls(params, dim_map, TASKS[int(cfg["task"])], int(cfg["num_classes"]),
                   int(cfg["ego_hops"]), tokens, int(cfg.get("best_epoch", 0)))


def _fit_downstream(g_t: FeatureGraph, task: str, split: FewShotSplit, cfg: FinetuneConfig,
                    ckpt: Optional[Checkpoint]):
    cfg.validate()
    if task not in TASKS:
        raise ValidationError(f"task must be one of {TASKS}, got {task!r}")
    if g_t.labels is None or not (g_t.labels != UNLABELED).any():
        raise ValidationError(f"{task} task needs labeled nodes in the target graph")
    for part in (split.train_ids, split.val_ids, split.test_ids):
        if part.size and (g_t.labels[part] == UNLABELED).any():
            raise ValidationError("split contains unlabeled nodes")
    num_classes = int(g_t.labels.max()) + 1
    rng = substream(cfg.seed, "finetune-init")

    if ckpt is not None:
        tokens = ckpt.tokens()
        dim = tokens.shape[1]
        check_heads(dim, cfg.heads)
        params = gcn_params(ckpt)
        params.update(init_attention(rng, dim, cfg.heads))
    else:
        tokens = None
        dim = cfg.dim_target
        params = init_gcn(rng, dim, cfg.hidden)
    hidden = params["gcn.W2"].shape[1]
    params.update(init_head(rng, "proj_ft", hidden, num_classes))

    model = FinetunedModel(params, fit_map(g_t.features, dim), task, num_classes, cfg.ego_hops, tokens)
    adj = normalize_adjacency(g_t) if task == "node" else None
    nbrs = g_t.neighbors() if task == "graph" else None
    train = model.problem(g_t, split.train_ids, adj, nbrs)
    val = model.problem(g_t, split.val_ids, adj, nbrs) if split.val_ids.size else None

    state = AdamState(lr=cfg.lr)
    best_acc, best_params = -1.0, None
    for epoch in range(1, cfg.epochs + 1):
        loss, grads = train.loss(params)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite fine-tuning loss at epoch {epoch}")
        adam_step(state, params, grads)
        if val is None:
            best_params, model.best_epoch = dict(params), epoch
            continue
        logits, _ = val.logits(params)
        acc = _accuracy(np.argmax(logits, axis=1), val.labels)
        if acc > best_acc:
            best_acc, best_params, model.best_epoch = acc, dict(params), epoch
    model.params = best_params
    test_ids = split.test_ids if split.test_ids.size else split.val_ids
    return model, model.evaluate(g_t, test_ids)


def finetune(ckpt: Checkpoint, g_t: FeatureGraph, task: str, split: FewShotSplit, cfg: FinetuneConfig):
    """Fine-tune the pre-trained GCN with token attention and a fresh task head."""
    return _fit_downstream(g_t, task, split, cfg, ckpt)


def scratch_baseline(g_t: FeatureGraph, task: str, split: FewShotSplit, cfg: FinetuneConfig):
    """Same training loop from a random GCN, without tokens or attention."""
    return _fit_downstream(g_t, task, split, cfg, None)
