"""Command-line entry point: ``mdgcl <subcommand> [options]``.

Results go to stdout as JSON lines; progress logs go to stderr.
Exit codes: 0 success, 1 usage error, 2 validation or I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import CONFIG_PREFIX, Checkpoint
from .dimred import apply_map, fit_map
from .errors import FormatError, NumericError, ValidationError
from .graph import normalize_adjacency
from .io import export_embeddings, load_graph, metrics_record, save_graph, write_metrics
from .neural import attention_enhance, check_heads, gcn_forward
from .pipeline import (
    TASKS,
    FinetuneConfig,
    FinetunedModel,
    PretrainConfig,
    few_shot_split,
    finetune,
    gcn_params,
    run_pretraining,
    scratch_baseline,
)
from .rng import substream
from .synth import SynthDomainConfig, generate_synthetic_domain
from .verify import gradient_reports

log = logging.getLogger("mdgcl")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass(frozen=True)
class RunConfig:
    dim_target: int = 50
    hidden: int = 256
    lr: float = 1e-4
    # None: each stage keeps its own default (100 pre-training, 200 fine-tuning)
    epochs: Optional[int] = None
    batch_size: int = 64
    K: int = 50
    N: Optional[int] = None
    walk_len: int = 50
    heads: int = 2
    shots: int = 1
    task: str = "node"
    seed: int = 0
    ego_hops: int = 2

    def pretrain_config(self) -> PretrainConfig:
        extra = {} if self.epochs is None else {"epochs": self.epochs}
        return PretrainConfig(batch_size=self.batch_size, lr=self.lr, dim_target=self.dim_target,
                              hidden=self.hidden, K=self.K, N=self.N, walk_len=self.walk_len,
                              seed=self.seed, **extra)

    def finetune_config(self) -> FinetuneConfig:
        extra = {} if self.epochs is None else {"epochs": self.epochs}
        return FinetuneConfig(lr=self.lr, heads=self.heads, ego_hops=self.ego_hops, hidden=self.hidden,
                              dim_target=self.dim_target, seed=self.seed, **extra)


_KEY_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _KEY_TYPES[key]
    if key == "task":
        if raw not in TASKS:
            raise ValueError(f"expected one of {', '.join(TASKS)}")
        return raw
    if "float" in kind:
        value = float(raw)
        if not np.isfinite(value):
            raise ValueError("expected a finite number")
        return value
    return int(raw)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        if key not in _KEY_TYPES:
            raise ValidationError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ValidationError(f"{source}:{lineno}: bad value {raw!r} for {key}: {exc}") from None
    return RunConfig(**values)


def parse_config(path) -> RunConfig:
    """Read a ``key = value`` config file; missing keys take their defaults."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()


def _run_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "task", "shots") if getattr(args, k, None) is not None}
    return replace(cfg, **overrides)


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = args.seed if args.rotation_seed is None else args.rotation_seed
    for i in range(args.domains):
        cfg = SynthDomainConfig(num_nodes=args.nodes, num_communities=args.communities, p_in=args.p_in,
                                p_out=args.p_out, feature_dim=args.feature_dim,
                                basis_rotation_seed=base if args.shared_rotation else base + i,
                                noise_std=args.noise)
        g = generate_synthetic_domain(cfg, seed=args.seed * 1000 + i, name=f"synth{i}")
        path = out / f"domain{i}.json"
        save_graph(path, g)
        _emit({"path": str(path), "num_nodes": g.num_nodes, "num_edges": g.num_edges,
               "rotation_seed": cfg.basis_rotation_seed})
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg = _run_config(args).pretrain_config()
    domains = [load_graph(p, domain_id=i) for i, p in enumerate(args.graph)]
    if len(domains) < 2:
        raise ValidationError(f"pretrain needs at least 2 --graph domains, got {len(domains)}")
    result = run_pretraining(domains, cfg)
    result.checkpoint.save(args.out)
    _emit({"checkpoint": str(args.out), "epochs": cfg.epochs, "initial_loss": result.initial_loss,
           "final_loss": result.epoch_losses[-1]})
    return EXIT_OK


def _single_graph(args):
    if len(args.graph) != 1:
        raise ValidationError(f"expected exactly one --graph, got {len(args.graph)}")
    return load_graph(args.graph[0])


def _cmd_finetune(args) -> int:
    run = _run_config(args)
    cfg = run.finetune_config()
    g = _single_graph(args)
    split = few_shot_split(g.labels if g.labels is not None else [], run.shots, substream(run.seed, "splits"))
    if args.scratch:
        model, metrics = scratch_baseline(g, run.task, split, cfg)
    else:
        if not args.ckpt:
            raise ValidationError("finetune needs --ckpt (or --scratch for the baseline)")
        ckpt = Checkpoint.load(args.ckpt)
        check_heads(ckpt.tokens().shape[1], cfg.heads)
        model, metrics = finetune(ckpt, g, run.task, split, cfg)
    if args.out:
        model.to_checkpoint().save(args.out)
    record = metrics_record(run.task, run.shots, run.seed, metrics.accuracy, metrics.macro_f1)
    if args.metrics:
        write_metrics(args.metrics, record)
    _emit(record)
    return EXIT_OK


def _cmd_eval(args) -> int:
    run = _run_config(args)
    if not args.ckpt:
        raise ValidationError("eval needs --ckpt with a fine-tuned model")
    model = FinetunedModel.from_checkpoint(Checkpoint.load(args.ckpt))
    g = _single_graph(args)
    split = few_shot_split(g.labels if g.labels is not None else [], run.shots, substream(run.seed, "splits"))
    ids = split.test_ids if split.test_ids.size else split.val_ids
    metrics = model.evaluate(g, ids)
    _emit(metrics_record(model.task, run.shots, run.seed, metrics.accuracy, metrics.macro_f1))
    return EXIT_OK


def _cmd_export(args) -> int:
    if not args.ckpt:
        raise ValidationError("export-emb needs --ckpt")
    ckpt = Checkpoint.load(args.ckpt)
    graphs = [load_graph(p) for p in args.graph]
    if not graphs:
        raise ValidationError("export-emb needs at least one --graph")
    params = gcn_params(ckpt)
    finetuned = "vmap.target" in ckpt
    model = FinetunedModel.from_checkpoint(ckpt) if finetuned else None
    blocks, labels, domains = [], [], []
    for i, g in enumerate(graphs):
        if model is not None:
            x = apply_map(g.features, model.dim_map)
            if model.tokens is not None:
                x, _ = attention_enhance(x, model.tokens, model.params)
            params = model.params
        elif f"vmap.{i}" in ckpt and ckpt[f"vmap.{i}"].shape[0] == g.dim:
            x = g.features @ ckpt[f"vmap.{i}"]
        else:
            x = apply_map(g.features, fit_map(g.features, params["gcn.W1"].shape[0]))
        h, _ = gcn_forward(normalize_adjacency(g), x, params)
        blocks.append(h)
        labels.extend([None] * g.num_nodes if g.labels is None else [None if y < 0 else int(y) for y in g.labels])
        domains.extend([i] * g.num_nodes)
    export_embeddings(np.vstack(blocks), labels, domains, args.out)
    _emit({"embeddings": str(args.out), "rows": len(labels), "graphs": len(graphs)})
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    reports = gradient_reports(seed=args.seed if args.seed is not None else 0)
    ok = True
    for loss, rep in reports.items():
        _emit({"loss": loss, "max_rel_error": rep["max_rel_error"], "worst_param": rep["worst_param"],
               "passed": rep["passed"]})
        ok &= rep["passed"]
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_inspect(args) -> int:
    if not args.ckpt:
        raise ValidationError("inspect needs --ckpt")
    ckpt = Checkpoint.load(args.ckpt)
    _emit({"checkpoint": str(args.ckpt), "tensors": len(ckpt)})
    for name, t in ckpt.items():
        record = {"name": name, "shape": list(t.shape)}
        if name.startswith(CONFIG_PREFIX):
            record["value"] = float(t)
        _emit(record)
    return EXIT_OK


COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "export-emb": _cmd_export,
    "gradcheck": _cmd_gradcheck,
    "inspect": _cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdgcl", description="Multi-domain graph contrastive pre-training and transfer.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="subcommand")
    sub.required = True

    def common(p, *, graphs=True, ckpt=False, out=False):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        if graphs:
            p.add_argument("--graph", action="append", default=[], help="graph JSON (repeatable)")
        if ckpt:
            p.add_argument("--ckpt")
        if out:
            p.add_argument("--out", required=True)
        return p

    p = common(sub.add_parser("synth", help="write synthetic domain JSON files"), graphs=False, out=True)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--nodes", type=int, default=300)
    p.add_argument("--communities", type=int, default=3)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--p-in", type=float, default=0.05)
    p.add_argument("--p-out", type=float, default=0.005)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--rotation-seed", type=int, help="first basis rotation seed (default: --seed)")
    p.add_argument("--shared-rotation", action="store_true", help="give every domain the same rotation")

    common(sub.add_parser("pretrain", help="pre-train on two or more source domains"), out=True)

    p = common(sub.add_parser("finetune", help="fine-tune on a target graph"), ckpt=True)
    p.add_argument("--out", help="where to save the fine-tuned model")
    p.add_argument("--metrics", help="also write the metrics JSON here")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--shots", type=int)
    p.add_argument("--scratch", action="store_true", help="train the from-scratch baseline instead")

    p = common(sub.add_parser("eval", help="evaluate a fine-tuned model on its test split"), ckpt=True)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--shots", type=int)

    common(sub.add_parser("export-emb", help="export node embeddings as CSV"), ckpt=True, out=True)
    common(sub.add_parser("gradcheck", help="check analytic gradients of both losses"), graphs=False)
    common(sub.add_parser("inspect", help="list the tensors of a checkpoint"), graphs=False, ckpt=True)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    log.propagate = False
    try:
        if args.config and args.command in ("synth", "gradcheck", "inspect"):
            parse_config(args.config)
        return COMMANDS[args.command](args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ValidationError, FormatError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except OSError as exc:
        log.error("%s: %s", exc.filename or "I/O error", exc.strerror or exc)
        return EXIT_INVALID
    finally:
        log.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
