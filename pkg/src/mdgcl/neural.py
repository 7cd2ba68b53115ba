"""Dense float64 building blocks with hand-written backward passes.

Parameters travel as ``dict[str, ndarray]`` keyed by their checkpoint names
(``gcn.W1``, ``gcn.W2``, ``proj_pre.W``, ``proj_ft.W``, ``attn.h<k>.Wq`` ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import NumericError, ValidationError

Params = dict[str, np.ndarray]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_gcn(rng: np.random.Generator, in_dim: int, hidden: int) -> Params:
    return {"gcn.W1": glorot(rng, in_dim, hidden), "gcn.W2": glorot(rng, hidden, hidden)}


def init_head(rng: np.random.Generator, name: str, in_dim: int, num_classes: int) -> Params:
    return {f"{name}.W": glorot(rng, in_dim, num_classes)}


def check_heads(dim: int, heads: int) -> int:
    if heads < 1 or dim % heads:
        raise ValidationError(f"attention heads ({heads}) must divide the unified feature width ({dim})")
    return dim // heads


def init_attention(rng: np.random.Generator, dim: int, heads: int) -> Params:
    dh = check_heads(dim, heads)
    out = {}
    for k in range(heads):
        for part in ("Wq", "Wk", "Wv"):
            out[f"attn.h{k}.{part}"] = glorot(rng, dim, dh)
    return out


def attention_heads(params: Params) -> int:
    return sum(1 for n in params if n.startswith("attn.") and n.endswith(".Wq"))


# --- GCN ------------------------------------------------------------------


def gcn_forward(adj: sp.spmatrix, x: np.ndarray, params: Params):
    """H = Â ReLU(Â X W1) W2, returning (H, cache)."""
    w1, w2 = params["gcn.W1"], params["gcn.W2"]
    if x.shape[0] != adj.shape[0] or x.shape[1] != w1.shape[0]:
        raise ValidationError(f"shape mismatch: Â {adj.shape}, X {x.shape}, W1 {w1.shape}")
    p = adj @ x
    u = p @ w1
    z = np.maximum(u, 0.0)
    az = adj @ z
    h = az @ w2
    return h, {"adj": adj, "p": p, "u": u, "az": az, "w1": w1, "w2": w2}


def gcn_backward(cache, dh: np.ndarray):
    """Gradients of a scalar loss given dL/dH; returns (grads, dL/dX)."""
    if cache is None:
        raise ValidationError("backward called without a forward cache")
    adj = cache["adj"]
    dw2 = cache["az"].T @ dh
    dz = adj.T @ (dh @ cache["w2"].T)
    du = dz * (cache["u"] > 0)
    dw1 = cache["p"].T @ du
    dx = adj.T @ (du @ cache["w1"].T)
    return {"gcn.W1": dw1, "gcn.W2": dw2}, dx


def pooled_gcn_forward(prop: sp.spmatrix, pool: sp.spmatrix, x: np.ndarray, params: Params):
    """Pooled rows of a 2-layer GCN: ``pool · ReLU(prop · X · W1) · W2``.

    ``prop`` maps the feature rows onto the stacked (block-diagonal) instance
    nodes with their normalized adjacency already applied; ``pool`` holds, per
    output row, the second-layer adjacency folded into the readout. A node task
    uses ``pool`` = selected rows of Â; a sum readout uses 1ᵀÂ per graph.
    """
    w1, w2 = params["gcn.W1"], params["gcn.W2"]
    p = prop @ x
    u = p @ w1
    z = np.maximum(u, 0.0)
    q = pool @ z
    e = q @ w2
    return e, {"prop": prop, "pool": pool, "p": p, "u": u, "q": q, "w1": w1, "w2": w2}


def pooled_gcn_backward(cache, de: np.ndarray, need_dx: bool = True):
    if cache is None:
        raise ValidationError("backward called without a forward cache")
    dw2 = cache["q"].T @ de
    dz = cache["pool"].T @ (de @ cache["w2"].T)
    du = dz * (cache["u"] > 0)
    dw1 = cache["p"].T @ du
    dx = cache["prop"].T @ (du @ cache["w1"].T) if need_dx else None
    return {"gcn.W1": dw1, "gcn.W2": dw2}, dx


# --- domain attention -----------------------------------------------------


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def attention_enhance(x: np.ndarray, tokens: np.ndarray, params: Params):
    """Add the attention-weighted token summary to every feature row.

    Scores are plain dot products (no 1/sqrt(d_h) scaling). Head outputs are
    concatenated in head order; returns (X + P, cache).
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    heads = attention_heads(params)
    if heads == 0 or tokens.shape[0] < 1:
        raise ValidationError("attention needs at least one head and one token")
    if x.shape[1] != tokens.shape[1]:
        raise ValidationError(f"feature width {x.shape[1]} differs from token width {tokens.shape[1]}")
    check_heads(x.shape[1], heads)
    outs, per_head = [], []
    for k in range(heads):
        wq, wk, wv = (params[f"attn.h{k}.{n}"] for n in ("Wq", "Wk", "Wv"))
        q = x @ wq
        kt = tokens @ wk
        vt = tokens @ wv
        alpha = _softmax_rows(q @ kt.T)
        outs.append(alpha @ vt)
        per_head.append((q, kt, vt, alpha))
    p = np.concatenate(outs, axis=1)
    return x + p, {"x": x, "tokens": tokens, "heads": per_head, "params": params}


def attention_backward(cache, dout: np.ndarray):
    if cache is None:
        raise ValidationError("backward called without a forward cache")
    x, tokens, params = cache["x"], cache["tokens"], cache["params"]
    dx = dout.copy()
    grads = {}
    start = 0
    for k, (q, kt, vt, alpha) in enumerate(cache["heads"]):
        dh = q.shape[1]
        dp = dout[:, start:start + dh]
        start += dh
        dalpha = dp @ vt.T
        dvt = alpha.T @ dp
        ds = alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True))
        dq = ds @ kt
        dkt = ds.T @ q
        grads[f"attn.h{k}.Wq"] = x.T @ dq
        grads[f"attn.h{k}.Wk"] = tokens.T @ dkt
        grads[f"attn.h{k}.Wv"] = tokens.T @ dvt
        dx += dq @ params[f"attn.h{k}.Wq"].T
    return grads, dx


# --- loss -----------------------------------------------------------------


def cross_entropy(logits: np.ndarray, label: int):
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValidationError(f"label {label} outside [0, {logits.shape[0]})")
    shifted = logits - logits.max()
    lse = np.log(np.exp(shifted).sum())
    probs = np.exp(shifted - lse)
    grad = probs.copy()
    grad[label] -= 1.0
    return float(lse - shifted[label]), grad


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows and its gradient wrt the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    m, c = logits.shape
    if labels.shape != (m,) or (labels < 0).any() or (labels >= c).any():
        raise ValidationError("labels out of range for the logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    loss = float(np.mean(lse - shifted[rows, labels]))
    grad = np.exp(shifted - lse[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / m


# --- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Params) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValidationError(f"gradient shape {g.shape} differs from parameter {name} {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        params[name] = params[name] - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --- verification ---------------------------------------------------------


def grad_check(
    fn: Callable[[Params], tuple[float, Params]],
    params: Params,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    max_coords: int = 200,
    floor: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> dict:
    """Compare analytic gradients with central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(|numeric|, floor)``;
    tensors larger than ``max_coords`` entries are checked on a random sample of
    ``max_coords`` coordinates.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    base = {n: np.array(t, dtype=np.float64) for n, t in params.items()}
    _, analytic = fn(base)
    worst, worst_name = 0.0, None
    per_param = {}
    for name in sorted(analytic):
        t = base[name]
        coords = np.arange(t.size)
        if t.size > max_coords:
            coords = np.sort(rng.choice(t.size, max_coords, replace=False))
        errs = []
        for c in coords:
            plus = {n: a.copy() for n, a in base.items()}
            minus = {n: a.copy() for n, a in base.items()}
            plus[name].flat[c] += step
            minus[name].flat[c] -= step
            numeric = (fn(plus)[0] - fn(minus)[0]) / (2.0 * step)
            a = analytic[name].flat[c]
            errs.append(abs(a - numeric) / max(abs(numeric), floor))
        per_param[name] = float(max(errs)) if errs else 0.0
        if per_param[name] >= worst:
            worst, worst_name = per_param[name], name
    return {
        "max_rel_error": worst,
        "worst_param": worst_name,
        "per_param": per_param,
        "passed": worst < tolerance,
    }
