"""Graph JSON, embedding CSV and metrics JSON formats."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .graph import UNLABELED, FeatureGraph

GRAPH_SCHEMA = "mdgcl-graph-v1"


def graph_to_dict(g: FeatureGraph) -> dict:
    out = {
        "schema": GRAPH_SCHEMA,
        "domain": g.name if g.name is not None else "",
        "num_nodes": g.num_nodes,
        "edges": g.edges.tolist(),
        "features": g.features.tolist(),
    }
    if g.labels is not None:
        out["labels"] = [None if y == UNLABELED else int(y) for y in g.labels]
    return out


def graph_from_dict(data: dict, domain_id: Optional[int] = None) -> FeatureGraph:
    if not isinstance(data, dict):
        raise FormatError("graph file must hold a JSON object")
    if data.get("schema") != GRAPH_SCHEMA:
        raise FormatError(f"schema must be {GRAPH_SCHEMA!r}, got {data.get('schema')!r}")
    for key in ("num_nodes", "edges", "features"):
        if key not in data:
            raise FormatError(f"graph file is missing {key!r}")
    n = data["num_nodes"]
    if not isinstance(n, int) or n < 0:
        raise ValidationError(f"num_nodes must be a nonnegative integer, got {n!r}")
    feats = data["features"]
    if len(feats) != n:
        raise ValidationError(f"features has {len(feats)} rows for {n} nodes")
    widths = {len(row) for row in feats}
    if len(widths) > 1:
        first = len(feats[0])
        row = next(i for i, r in enumerate(feats) if len(r) != first)
        raise ValidationError(f"ragged feature rows: row {row} has width {len(feats[row])}, row 0 has {first}")
    width = widths.pop() if widths else 0
    for e in data["edges"]:
        if len(e) != 2:
            raise ValidationError(f"edge {e!r} is not a pair")
        u, v = e
        if not (0 <= u < n and 0 <= v < n):
            raise ValidationError(f"edge [{u}, {v}] has an endpoint outside [0, {n})")
    name = data.get("domain")
    return FeatureGraph(
        n,
        data["edges"],
        np.asarray(feats, dtype=np.float64).reshape(n, width),
        data.get("labels"),
        domain_id,
        name,
    )


def save_graph(path, g: FeatureGraph) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(g)), encoding="utf-8")


def load_graph(path, domain_id: Optional[int] = None) -> FeatureGraph:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from exc
    return graph_from_dict(data, domain_id)


def export_embeddings(h: np.ndarray, labels: Sequence, domain_ids: Sequence, path) -> None:
    """Write one CSV row per node: ``node_id,domain,label,e0..e{h-1}``.

    Floats use ``repr`` so every value parses back to the identical double.
    Missing labels are written as empty fields.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1 and h.size == 0:
        h = h.reshape(0, 0)
    if len(labels) != h.shape[0] or len(domain_ids) != h.shape[0]:
        raise ValidationError("embedding, label and domain row counts differ")
    header = ["node_id", "domain", "label"] + [f"e{k}" for k in range(h.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(h.shape[0]):
            y = labels[i]
            y = "" if y is None or y == UNLABELED else int(y)
            w.writerow([i, int(domain_ids[i]), y] + [repr(float(v)) for v in h[i]])


def read_embeddings(path) -> tuple[np.ndarray, list, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    width = len(rows[0]) - 3
    body = rows[1:]
    h = np.array([[float(v) for v in r[3:]] for r in body], dtype=np.float64).reshape(len(body), width)
    labels = [None if r[2] == "" else int(r[2]) for r in body]
    domains = [int(r[1]) for r in body]
    return h, labels, domains


def metrics_record(task: str, shots: int, seed: int, accuracy: float, macro_f1: float) -> dict:
    return {"task": task, "shots": int(shots), "seed": int(seed), "accuracy": float(accuracy), "macro_f1": float(macro_f1)}


def write_metrics(path, record: dict) -> None:
    Path(path).write_text(json.dumps(record) + "\n", encoding="utf-8")
