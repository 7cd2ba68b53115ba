"""The two trained objectives: same-domain pair classification and few-shot fine-tuning.

The pre-training path has two implementations. ``reference_pretrain_loss``
materializes every merged graph and runs the pooled GCN on its normalized
adjacency. ``PairBatchKernel`` gives the same numbers without building merged
graphs: inside a merged graph a subgraph node only sees its own subgraph and
its own domain token, so its propagated features and readout weight do not
depend on the partner. Only the two token rows are pair specific.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .contrastive import MergedSample, Subgraph
from .graph import FeatureGraph, normalize_adjacency
from .neural import (
    Params,
    attention_backward,
    attention_enhance,
    pooled_gcn_backward,
    pooled_gcn_forward,
    softmax_cross_entropy,
)


def readout_pool(adj: sp.csr_matrix) -> sp.csr_matrix:
    """1ᵀÂ as a 1 x n row: second-layer propagation folded into a sum readout."""
    return sp.csr_matrix(np.asarray(adj.sum(axis=0)))


def stack_graphs(graphs: Sequence[FeatureGraph]):
    """Block-diagonal propagation and sum-readout pooling for a list of graphs."""
    adjs = [normalize_adjacency(g) for g in graphs]
    prop = sp.block_diag(adjs, format="csr")
    pool = sp.block_diag([readout_pool(a) for a in adjs], format="csr")
    x = np.vstack([g.features for g in graphs])
    return prop, pool, x


def reference_pretrain_loss(params: Params, samples: Sequence[MergedSample]):
    """Mean cross-entropy over merged graphs, computed directly on each graph."""
    prop, pool, x = stack_graphs([s.graph for s in samples])
    labels = np.array([s.label for s in samples])
    e, cache = pooled_gcn_forward(prop, pool, x, params)
    w = params["proj_pre.W"]
    loss, dlogits = softmax_cross_entropy(e @ w, labels)
    grads, _ = pooled_gcn_backward(cache, dlogits @ w.T, need_dx=False)
    grads["proj_pre.W"] = e.T @ dlogits
    return loss, grads


class _Block:
    __slots__ = ("p", "s", "tok_base", "tok_sbase", "c_tok")

    def __init__(self, sub: Subgraph, token: np.ndarray):
        g = sub.graph
        n = g.num_nodes
        c = 1.0 / np.sqrt(g.degrees() + 2.0)
        c_tok = 1.0 / np.sqrt(n + 2.0)
        loops = np.arange(n)
        rows = np.concatenate([g.edges[:, 0], g.edges[:, 1], loops])
        cols = np.concatenate([g.edges[:, 1], g.edges[:, 0], loops])
        inner = sp.csr_matrix((c[rows] * c[cols], (rows, cols)), shape=(n, n))
        self.p = inner @ g.features + np.outer(c * c_tok, token)
        self.s = np.asarray(inner.sum(axis=0)).ravel() + c * c_tok
        self.tok_base = c_tok * (c @ g.features) + c_tok * c_tok * token
        self.tok_sbase = c_tok * c.sum() + c_tok * c_tok
        self.c_tok = c_tok


class PairBatchKernel:
    """Pre-training loss and gradients over minibatches of merged samples."""

    def __init__(self, samples: Sequence[MergedSample]):
        self._index: dict[int, int] = {}
        self._blocks: list[_Block] = []
        self._tokens: list[np.ndarray] = []
        for smp in samples:
            for sub, tok in ((smp.a, smp.token_a), (smp.b, smp.token_b)):
                if id(sub) not in self._index:
                    self._index[id(sub)] = len(self._blocks)
                    self._blocks.append(_Block(sub, tok.vector))
                    self._tokens.append(tok.vector)
        # feature columns that are zero everywhere (domains narrower than the
        # target width) contribute nothing and are dropped from the products
        width = self._blocks[0].p.shape[1] if self._blocks else 0
        used = np.zeros(width, dtype=bool)
        for blk, tok in zip(self._blocks, self._tokens):
            used |= np.any(blk.p != 0, axis=0) | (tok != 0)
        self._cols = np.flatnonzero(used)
        if len(self._cols) < width:
            for blk in self._blocks:
                blk.p = np.ascontiguousarray(blk.p[:, self._cols])

    # rows per chunk; small enough that a chunk's hidden activations stay in cache
    chunk_rows = 256

    def _chunks(self, uniq: np.ndarray):
        """Group subgraph blocks into row chunks with dense readout-weight matrices."""
        chunks = []
        start, rows = 0, 0
        for k, u in enumerate(uniq):
            rows += self._blocks[u].p.shape[0]
            if rows >= self.chunk_rows or k == len(uniq) - 1:
                blocks = [self._blocks[v] for v in uniq[start:k + 1]]
                p = np.vstack([b.p for b in blocks])
                weights = np.zeros((len(blocks), p.shape[0]))
                offset = 0
                for i, b in enumerate(blocks):
                    weights[i, offset:offset + len(b.s)] = b.s
                    offset += len(b.s)
                chunks.append((slice(start, k + 1), p, weights))
                start, rows = k + 1, 0
        return chunks

    def _assemble(self, samples: Sequence[MergedSample]):
        pairs = np.array([(self._index[id(s.a)], self._index[id(s.b)]) for s in samples], dtype=np.int64)
        uniq, inv = np.unique(pairs, return_inverse=True)
        inv = inv.reshape(pairs.shape)
        b_count = len(samples)
        incidence = np.zeros((b_count, len(uniq)))
        np.add.at(incidence, (np.arange(b_count), inv[:, 0]), 1.0)
        np.add.at(incidence, (np.arange(b_count), inv[:, 1]), 1.0)

        ba = [self._blocks[i] for i in pairs[:, 0]]
        bb = [self._blocks[i] for i in pairs[:, 1]]
        cross = np.array([x.c_tok * y.c_tok for x, y in zip(ba, bb)])
        t_a = np.array([self._tokens[i] for i in pairs[:, 0]])
        t_b = np.array([self._tokens[i] for i in pairs[:, 1]])
        tok_p = np.vstack([
            np.array([x.tok_base for x in ba]) + cross[:, None] * t_b,
            np.array([y.tok_base for y in bb]) + cross[:, None] * t_a,
        ])
        tok_s = np.concatenate([np.array([x.tok_sbase for x in ba]) + cross,
                                np.array([y.tok_sbase for y in bb]) + cross])[:, None]
        tok_p = np.ascontiguousarray(tok_p[:, self._cols])
        return self._chunks(uniq), len(uniq), incidence, tok_p, tok_s

    def embed(self, params: Params, samples: Sequence[MergedSample]):
        """Graph-level readouts E (batch x h) plus the cache for ``backward``."""
        w1, w2 = params["gcn.W1"][self._cols], params["gcn.W2"]
        chunks, n_blocks, incidence, tok_p, tok_s = self._assemble(samples)
        readouts = np.empty((n_blocks, w1.shape[1]))
        masks = []
        for sl, p, weights in chunks:
            z = p @ w1
            mask = z > 0
            z *= mask
            masks.append(mask)
            readouts[sl] = weights @ z
        zt = tok_p @ w1
        np.maximum(zt, 0.0, out=zt)
        b = len(samples)
        q = incidence @ readouts + tok_s[:b] * zt[:b] + tok_s[b:] * zt[b:]
        e = q @ w2
        return e, (chunks, masks, incidence, tok_p, tok_s, zt, q)

    def backward(self, params: Params, cache, de: np.ndarray) -> Params:
        chunks, masks, incidence, tok_p, tok_s, zt, q = cache
        dw2 = q.T @ de
        dq = de @ params["gcn.W2"].T
        dread = incidence.T @ dq
        dw1 = np.zeros((len(self._cols), dq.shape[1]))
        for (sl, p, weights), mask in zip(chunks, masks):
            dz = weights.T @ dread[sl]
            dz *= mask
            dw1 += p.T @ dz
        dzt = tok_s * np.vstack([dq, dq])
        dzt *= zt > 0
        dw1 += tok_p.T @ dzt
        full = np.zeros_like(params["gcn.W1"])
        full[self._cols] = dw1
        return {"gcn.W1": full, "gcn.W2": dw2}

    def loss(self, params: Params, samples: Sequence[MergedSample]):
        labels = np.array([s.label for s in samples])
        e, cache = self.embed(params, samples)
        w = params["proj_pre.W"]
        loss, dlogits = softmax_cross_entropy(e @ w, labels)
        grads = self.backward(params, cache, dlogits @ w.T)
        grads["proj_pre.W"] = e.T @ dlogits
        return loss, grads

    def predict(self, params: Params, samples: Sequence[MergedSample], chunk: int = 512) -> np.ndarray:
        out = []
        for start in range(0, len(samples), chunk):
            e, _ = self.embed(params, samples[start:start + chunk])
            out.append(np.argmax(e @ params["proj_pre.W"], axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


class FinetuneProblem:
    """Fine-tuning objective on a target graph.

    ``prop``/``pool`` describe the instances of one split (node rows or ego
    networks); ``tokens`` switch the attention enhancement on when given.
    """

    def __init__(self, x: np.ndarray, prop, pool, labels, tokens=None):
        self.x = x
        self.prop = prop
        self.pool = pool
        self.labels = np.asarray(labels, dtype=np.int64)
        self.tokens = tokens

    def logits(self, params: Params, head: str = "proj_ft"):
        x, att_cache = self.x, None
        if self.tokens is not None:
            x, att_cache = attention_enhance(self.x, self.tokens, params)
        e, cache = pooled_gcn_forward(self.prop, self.pool, x, params)
        return e @ params[f"{head}.W"], (e, cache, att_cache)

    def loss(self, params: Params, head: str = "proj_ft"):
        logits, (e, cache, att_cache) = self.logits(params, head)
        w = params[f"{head}.W"]
        loss, dlogits = softmax_cross_entropy(logits, self.labels)
        grads, dx = pooled_gcn_backward(cache, dlogits @ w.T, need_dx=att_cache is not None)
        grads[f"{head}.W"] = e.T @ dlogits
        if att_cache is not None:
            att_grads, _ = attention_backward(att_cache, dx)
            grads.update(att_grads)
        return loss, grads
