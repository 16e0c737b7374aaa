"""Command-line interface.

Subcommands: ``generate``, ``stats``, ``embed``, ``rewire``, ``train``,
``sweep``, ``project``. Common flags: ``--data DIR``, ``--out DIR``,
``--seed N``, ``--config FILE``, ``--jobs N``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import embeddings as emb_mod
from . import harness, models
from .config import RunConfig, SweepGrid, load_config, substream_seed
from .graph import generate_synthetic, load_dataset, make_splits, save_dataset
from .rewiring import cosine_topk, load_ecg_edges, save_ecg_edges

logger = logging.getLogger("ecgnn")


def _add_common(p: argparse.ArgumentParser, *, data_required: bool = True):
    p.add_argument("--data", required=data_required, help="dataset directory")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="root random seed")
    p.add_argument("--config", default=None, help="key=value configuration file")


_CONFIG_FLAGS = [
    ("--backbone", "backbone", str), ("--mode", "mode", str),
    ("--tau", "tau", str), ("--k", "k", int), ("--p-de", "p_de", float),
    ("--depth", "depth", int), ("--width", "width", int),
    ("--lr", "lr", float), ("--max-epochs", "max_epochs", int),
    ("--patience", "patience", int), ("--hidden-dropout", "hidden_dropout", float),
    ("--embed-depth", "embed_depth", int), ("--embed-width", "embed_width", int),
    ("--embed-epochs", "embed_epochs", int), ("--bgrl-steps", "bgrl_steps", int),
    ("--metric", "metric", str), ("--num-splits", "num_splits", int),
]


def _add_config_flags(p: argparse.ArgumentParser):
    for flag, dest, typ in _CONFIG_FLAGS:
        p.add_argument(flag, dest=dest, type=typ, default=None)
    p.add_argument("--symmetrize", dest="symmetrize", action="store_true",
                   default=None)
    p.add_argument("--dropedge-rescale", dest="dropedge_rescale",
                   action="store_true", default=None)


def build_run_config(args) -> RunConfig:
    overrides = {}
    for _, dest, _ in _CONFIG_FLAGS:
        value = getattr(args, dest, None)
        if value is not None:
            overrides[dest] = value
    for dest in ("symmetrize", "dropedge_rescale"):
        value = getattr(args, dest, None)
        if value is not None:
            overrides[dest] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "data", None) is not None:
        overrides["data_dir"] = args.data
    if args.config:
        return load_config(args.config, overrides)
    return RunConfig.from_dict({**overrides}) if overrides else RunConfig()


def cmd_generate(args) -> int:
    g, nodes = generate_synthetic(args.n, args.classes, args.avg_degree,
                                  args.homophily, args.feature_dim,
                                  args.separation, args.seed or 0)
    splits = make_splits(g.num_nodes, args.splits, args.seed or 0)
    save_dataset(args.out, g, nodes, splits)
    print(f"wrote {g.num_nodes} nodes, {g.num_undirected_edges} edges, "
          f"{len(splits)} splits to {args.out}")
    return 0


def cmd_stats(args) -> int:
    cfg = build_run_config(args)
    g, nodes, _ = load_dataset(args.data, num_splits=cfg.num_splits,
                               seed=substream_seed(cfg.seed, "data"))
    ecg_sets = []
    for emb_path in args.emb or []:
        emb = emb_mod.load_embeddings(emb_path)
        ecg_sets.append((emb.source_tag, cosine_topk(emb, cfg.k)))
    text, rows = harness.stats_report(g, nodes, Path(args.data).name, ecg_sets)
    print(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_stats_csv(out / "stats.csv", rows)
    return 0


def cmd_embed(args) -> int:
    cfg = build_run_config(args)
    data = load_dataset(args.data, num_splits=cfg.num_splits,
                        seed=substream_seed(cfg.seed, "data"))
    g, nodes, splits = data
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tau = cfg.tau
    if tau == "MLP->GNN":
        if not args.donor_ckpt or not args.donor_ecg:
            raise SystemExit("--tau MLP->GNN requires --donor-ckpt and --donor-ecg")
        model, _ = models.load_checkpoint(args.donor_ckpt)
        ecg = load_ecg_edges(args.donor_ecg)
        emb = emb_mod.extract_gnn_embeddings(model, g, nodes, ecg,
                                             symmetrize=cfg.symmetrize,
                                             split_id=args.split)
        path = out / "mlpgnn.emb"
        emb_mod.save_embeddings(path, emb)
        print(f"wrote {path}")
        return 0
    split_ids = range(len(splits)) if args.split is None else [args.split]
    if tau in ("MLP", "MLPBGRL"):
        for i in split_ids:
            emb = harness.embeddings_for_split(cfg, g, nodes, splits, i, out)
            print(f"wrote {harness.embedding_path(out, cfg, tau, i)}")
    else:
        harness.embeddings_for_split(cfg, g, nodes, splits, 0, out)
        print(f"wrote {harness.embedding_path(out, cfg, 'BGRL', None)}")
    return 0


def cmd_rewire(args) -> int:
    cfg = build_run_config(args)
    emb = emb_mod.load_embeddings(args.emb)
    edges = cosine_topk(emb, cfg.k)
    labels = None
    if args.data:
        _, nodes, _ = load_dataset(args.data, num_splits=cfg.num_splits,
                                   seed=substream_seed(cfg.seed, "data"))
        labels = nodes.labels
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ecg_edges.tsv"
    save_ecg_edges(path, edges, source_tag=emb.source_tag, labels=labels)
    print(f"wrote {path} (+ JSON sidecar)")
    return 0


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    outcome = harness.run_experiment(cfg, args.out, save_models=args.save_models)
    print(f"{cfg.backbone} {cfg.mode}: {outcome.test.metric} "
          f"{outcome.test.mean:.4f} ± {outcome.test.std:.4f} "
          f"over {len(outcome.test.values)} splits")
    return 0


def _parse_list(raw: str, typ):
    return [typ(tok) for tok in raw.split(",") if tok]


def cmd_sweep(args) -> int:
    cfg = build_run_config(args)
    grid = SweepGrid()
    if args.backbones:
        grid.backbones = _parse_list(args.backbones, str)
    if args.taus:
        grid.taus = _parse_list(args.taus, str)
    if args.ks:
        grid.ks = _parse_list(args.ks, int)
    if args.p_des:
        grid.p_des = _parse_list(args.p_des, float)
    if args.depths:
        grid.depths = _parse_list(args.depths, int)
    if args.widths:
        grid.widths = _parse_list(args.widths, int)
    result = harness.run_sweep(cfg, grid, args.out, jobs=args.jobs)
    print((Path(args.out) / "best_hparams.txt").read_text(encoding="utf-8"))
    completed = sum(1 for c in result.cells if c.test is not None)
    print(f"{completed}/{len(result.cells)} cells completed")
    return 0


def cmd_project(args) -> int:
    cfg = build_run_config(args)
    g, nodes, splits = load_dataset(args.data, num_splits=cfg.num_splits,
                                    seed=substream_seed(cfg.seed, "data"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.emb:
        emb = emb_mod.load_embeddings(args.emb)
    else:
        emb = harness.embeddings_for_split(cfg, g, nodes, splits, 0, out)
    edges = cosine_topk(emb, cfg.k)
    path = out / "projection.csv"
    harness.export_projection(g, edges, nodes.features, nodes.labels,
                              substream_seed(cfg.seed, "projection"), path)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecgnn",
        description=("Weak-classifier graph rewiring and two-processor GNNs "
                     "for node classification under heterophily"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--avg-degree", type=float, default=10.0)
    p.add_argument("--homophily", type=float, default=0.1)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("stats", help="homophily statistics report")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--emb", action="append",
                   help="embedding file; adds a rewired-graph row (repeatable)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("embed", help="train weak classifiers, write .emb files")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--split", type=int, default=None,
                   help="restrict to one split (default: all)")
    p.add_argument("--donor-ckpt", default=None,
                   help="checkpoint for --tau MLP->GNN extraction")
    p.add_argument("--donor-ecg", default=None,
                   help="ecg_edges.tsv the donor model was trained with")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("rewire", help="cosine top-k edges from an embedding file")
    _add_common(p, data_required=False)
    _add_config_flags(p)
    p.add_argument("--emb", required=True)
    p.set_defaults(func=cmd_rewire)

    p = sub.add_parser("train", help="run one configuration over all splits")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--save-models", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a hyperparameter lattice")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--backbones", default=None, help="comma-separated list")
    p.add_argument("--taus", default=None)
    p.add_argument("--ks", default=None)
    p.add_argument("--p-des", dest="p_des", default=None)
    p.add_argument("--depths", default=None)
    p.add_argument("--widths", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("project", help="random-layer 2-D projection export")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--emb", default=None)
    p.set_defaults(func=cmd_project)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
