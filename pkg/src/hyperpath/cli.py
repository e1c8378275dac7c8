"""Command-line entry point wiring the library into reproducible batch runs.

Every subcommand writes a ``manifest.json`` with the fully resolved config
into its ``--out`` directory. Training-style commands read a flat
``key = value`` config file; any key can be overridden by a same-named flag.
Exit codes: 0 success, 2 usage/config errors, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np

from . import __version__
from . import model as mdl
from .analysis import gromov_delta
from .evaluate import ari, f1_scores, kmeans, linear_probe, link_predict_eval, nmi, split_labeled
from .hetgraph import GraphFormatError, HeteroGraph, load_graph, metapath_subgraph
from .sampler import enumerate_instances, instance_counts
from .synth import synth_dataset, write_dataset
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, scale_features, train


class UsageError(Exception):
    """Bad invocation: unknown key, unreadable file, invalid config value."""


def parse_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` text config; '#' starts a comment."""
    out: dict[str, str] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in text.split("=", 1))
            out[key] = value
    return out


def _load_graph_checked(nodes: str, edges: str) -> HeteroGraph:
    for path in (nodes, edges):
        if not os.path.exists(path):
            raise UsageError(f"input file not found: {path}")
    return load_graph(nodes, edges)


def _write_manifest(out_dir: str, command: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    doc = {"command": command, "version": __version__, "config": payload}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    mapping: dict[str, str] = {}
    if getattr(args, "config", None):
        mapping.update(parse_config_file(args.config))
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            mapping[f.name] = str(value)
    try:
        return TrainConfig.from_mapping(mapping)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for f in fields(TrainConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None)


def _add_io_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nodes", required=True, help="nodes.tsv path")
    p.add_argument("--edges", required=True, help="edges.tsv path")


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_ingest(args) -> int:
    g = _load_graph_checked(args.nodes, args.edges)
    lines = [f"nodes\t{g.num_nodes}", f"edges\t{g.num_edges}", f"feature_dim\t{g.feature_dim}"]
    for t, name in enumerate(g.type_names):
        lines.append(f"nodes[{name}]\t{len(g.nodes_of_type(t))}")
    pair_counts: dict[str, int] = {}
    for u, v in g.edges():
        a, b = sorted((g.type_names[g.node_type[u]], g.type_names[g.node_type[v]]))
        pair_counts[f"{a}-{b}"] = pair_counts.get(f"{a}-{b}", 0) + 1
    for pair in sorted(pair_counts):
        lines.append(f"edges[{pair}]\t{pair_counts[pair]}")
    if g.labels is not None:
        lines.append(f"labeled\t{int((g.labels >= 0).sum())}")
        lines.append(f"classes\t{int(g.labels.max()) + 1}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.tsv"), "w", encoding="utf-8") as fh:
        fh.write(text)
    _write_manifest(args.out, "ingest", {"nodes": args.nodes, "edges": args.edges})
    return 0


def _cmd_sample(args) -> int:
    g = _load_graph_checked(args.nodes, args.edges)
    l = int(args.l)
    targets = g.nodes_of_type(g.type_id(args.target_type))
    cap = int(args.max_instances) if args.max_instances else None
    instances = enumerate_instances(
        g, targets, l, max_per_metapath=cap, seed=int(args.seed)
    )
    counts = instance_counts(instances)
    rows = []
    for sub_l in range(2, l + 1):
        for mp in sorted(counts, key=lambda m: (len(m), m)):
            if len(mp) <= sub_l:
                rows.append(f"{sub_l}\t{g.metapath_name(mp)}\t{counts[mp]}")
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "instance_counts.tsv"), "w", encoding="utf-8") as fh:
        fh.write(text)
    _write_manifest(
        args.out,
        "sample",
        {
            "nodes": args.nodes,
            "edges": args.edges,
            "l": l,
            "target_type": args.target_type,
            "max_instances": cap or 0,
            "seed": int(args.seed),
        },
    )
    return 0


def _epoch_log_text(result) -> str:
    rows = ["epoch\ttrain_loss\tval_loss\ttask_loss\thyp_loss\tseconds"]
    for r in result.log:
        rows.append(
            f"{r.epoch}\t{r.train_loss!r}\t{r.val_loss!r}\t{r.task_loss!r}"
            f"\t{r.hyp_loss!r}\t{r.seconds:.6f}"
        )
    return "\n".join(rows) + "\n"


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    g = _load_graph_checked(args.nodes, args.edges)
    result = train(g, config)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "epochs.tsv"), "w", encoding="utf-8") as fh:
        fh.write(_epoch_log_text(result))
    save_checkpoint(os.path.join(args.out, "checkpoint.bin"), result.params, config)
    payload = asdict(config)
    payload.update({"nodes": args.nodes, "edges": args.edges})
    _write_manifest(args.out, "train", payload)
    last = result.log[-1]
    print(
        f"trained {len(result.log)} epochs (best epoch {result.best_epoch}); "
        f"final train_loss {last.train_loss:.6f} val_loss {last.val_loss:.6f}"
    )
    return 0


def _embeddings_for_checkpoint(
    g: HeteroGraph, params, config: TrainConfig
) -> tuple[np.ndarray, np.ndarray]:
    """(target node ids, tangent-coordinate embeddings) for a checkpoint."""
    from .trainer import infer_target_types

    target_types = infer_target_types(g, config)
    instances = {}
    for t in target_types:
        instances.update(
            enumerate_instances(
                g,
                g.nodes_of_type(t),
                config.max_path_len,
                max_per_metapath=config.max_instances or None,
                seed=config.seed,
            )
        )
    feats = scale_features(g.features, config.feature_scale)
    targets = np.sort(np.concatenate([g.nodes_of_type(t) for t in target_types]))
    prepared = mdl.prepare_instances(g, instances, targets, features=feats)
    if tuple(prepared.metapaths) != tuple(params.metapaths):
        raise ValueError(
            "metapaths in the graph do not match the checkpoint; "
            "was it trained on this dataset?"
        )
    bundle = mdl.forward(prepared, params, training=False)
    return prepared.targets, bundle.z_tangent()


def _cmd_export_embeddings(args) -> int:
    g = _load_graph_checked(args.nodes, args.edges)
    params, config = load_checkpoint(args.checkpoint)
    targets, emb = _embeddings_for_checkpoint(g, params, config)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "embeddings.tsv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for node, row in zip(targets, emb):
            fh.write(f"{g.node_ids[int(node)]}\t{','.join(repr(float(x)) for x in row)}\n")
    _write_manifest(
        args.out,
        "export-embeddings",
        {"nodes": args.nodes, "edges": args.edges, "checkpoint": args.checkpoint},
    )
    print(f"wrote {len(targets)} embeddings to {path}")
    return 0


def _metric_rows(samples: dict[str, list[float]]) -> str:
    lines = []
    for metric in samples:
        vals = np.array(samples[metric])
        lines.append(
            f"{metric}\t{vals.mean():.6f}\t{vals.std(ddof=0):.6f}\t{len(vals)}"
        )
    return "\n".join(lines) + "\n"


def _cmd_eval(args) -> int:
    g = _load_graph_checked(args.nodes, args.edges)
    params, config = load_checkpoint(args.checkpoint)
    targets, emb = _embeddings_for_checkpoint(g, params, config)
    seeds = range(int(args.seeds))
    samples: dict[str, list[float]] = {}

    if config.task == "node_classification":
        if g.labels is None:
            raise ValueError("graph has no labels to evaluate against")
        mask = g.labels[targets] >= 0
        labels = g.labels[targets][mask]
        x = emb[mask]
        n_classes = int(labels.max()) + 1
        samples = {"macro_f1": [], "micro_f1": [], "nmi": [], "ari": []}
        for seed in seeds:
            tr, te = split_labeled(labels, config.train_ratio, seed)
            pred = linear_probe(x, tr, te, labels)
            macro, micro = f1_scores(pred, labels[te])
            samples["macro_f1"].append(macro)
            samples["micro_f1"].append(micro)
            assign = kmeans(x, n_classes, seed)
            samples["nmi"].append(nmi(assign, labels))
            samples["ari"].append(ari(assign, labels))
    else:
        src_t, dst_t = (g.type_id(t) for t in config.link_types.split("-"))
        pos = [
            (int(u), int(v))
            for u in g.nodes_of_type(src_t)
            for v in g.neighbors(int(u))
            if g.node_type[v] == dst_t and (src_t != dst_t or u < v)
        ]
        emb_map = {int(node): emb[i] for i, node in enumerate(targets)}
        samples = {"roc_auc": [], "f1": []}
        for seed in seeds:
            auc, f1 = link_predict_eval(g, emb_map, pos, seed)
            samples["roc_auc"].append(auc)
            samples["f1"].append(f1)

    text = _metric_rows(samples)
    sys.stdout.write(text)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.tsv"), "w", encoding="utf-8") as fh:
        fh.write(text)
    _write_manifest(
        args.out,
        "eval",
        {
            "nodes": args.nodes,
            "edges": args.edges,
            "checkpoint": args.checkpoint,
            "seeds": int(args.seeds),
        },
    )
    return 0


def _cmd_synth(args) -> int:
    props = tuple(float(x) for x in args.proportions.split(","))
    if len(props) != 3:
        raise UsageError("--proportions needs three comma-separated values")
    total = sum(props)
    if total <= 0:
        raise UsageError("--proportions must sum to a positive value")
    props = tuple(p / total for p in props)
    g, manifest = synth_dataset(
        n=int(args.n),
        m=int(args.m),
        proportions=props,  # type: ignore[arg-type]
        mu=float(args.mu),
        sigma=float(args.sigma),
        feature_dim=int(args.feature_dim),
        seed=int(args.seed),
    )
    write_dataset(g, manifest, args.out)
    _write_manifest(args.out, "synth", manifest)
    print(
        f"synthetic graph: {g.num_nodes} nodes, {g.num_edges} edges "
        f"({manifest['dropped_edges']} dropped), features {g.feature_dim}"
    )
    return 0


def _cmd_analyze_delta(args) -> int:
    g = _load_graph_checked(args.nodes, args.edges)
    lines = []
    for text in args.metapath:
        mp = g.parse_metapath(text)
        sub = metapath_subgraph(g, mp)
        result = gromov_delta(sub, mode=args.mode, q=int(args.q), seed=int(args.seed))
        lines.append(
            f"{text}\t{sub.num_nodes}\t{sub.num_edges}"
            f"\t{result.delta_avg:.6f}\t{result.delta_max:.6f}"
        )
    text_out = "\n".join(lines) + "\n"
    sys.stdout.write(text_out)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "delta.tsv"), "w", encoding="utf-8") as fh:
        fh.write(text_out)
    _write_manifest(
        args.out,
        "analyze-delta",
        {
            "nodes": args.nodes,
            "edges": args.edges,
            "metapaths": list(args.metapath),
            "mode": args.mode,
            "q": int(args.q),
            "seed": int(args.seed),
        },
    )
    return 0


def _cmd_bench_epoch(args) -> int:
    config = _resolve_config(args)
    g = _load_graph_checked(args.nodes, args.edges)
    l_values = [int(x) for x in args.l_values.split(",")]
    epochs = int(args.bench_epochs)
    rows = ["l\tinstances\tepoch\tseconds"]
    for l in l_values:
        cfg = replace(config, max_path_len=l, epochs=epochs, patience=epochs)
        result = train(g, cfg)
        total = result.prepared.total_instances()
        for r in result.log:
            rows.append(f"{l}\t{total}\t{r.epoch}\t{r.seconds:.6f}")
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "bench.tsv"), "w", encoding="utf-8") as fh:
        fh.write(text)
    payload = asdict(config)
    payload.update(
        {"nodes": args.nodes, "edges": args.edges, "l_values": l_values, "bench_epochs": epochs}
    )
    _write_manifest(args.out, "bench-epoch", payload)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperpath",
        description="Metapath-specific hyperbolic embedding of heterogeneous graphs",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset and summarize it")
    _add_io_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("sample", help="enumerate metapath instances and count them")
    _add_io_flags(p)
    p.add_argument("--l", required=True, type=int, help="maximum nodes per instance")
    p.add_argument("--target-type", required=True)
    p.add_argument("--max-instances", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_sample)

    p = sub.add_parser("train", help="train a model")
    _add_io_flags(p)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="probe / clustering / link metrics from a checkpoint")
    _add_io_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("export-embeddings", help="write node embeddings as TSV")
    _add_io_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_export_embeddings)

    p = sub.add_parser("synth", help="generate a synthetic heterogeneous graph")
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--proportions", default="6,2,1")
    p.add_argument("--mu", required=True, type=float)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--feature-dim", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("analyze-delta", help="Gromov delta of metapath subgraphs")
    _add_io_flags(p)
    p.add_argument("--metapath", action="append", required=True, help="e.g. A-B-A")
    p.add_argument("--mode", choices=("exact", "sampled"), default="sampled")
    p.add_argument("--q", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_analyze_delta)

    p = sub.add_parser("bench-epoch", help="per-epoch wall time for several l values")
    _add_io_flags(p)
    p.add_argument("--l-values", default="2,3,4")
    p.add_argument("--bench-epochs", type=int, default=3)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_bench_epoch)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GraphFormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
