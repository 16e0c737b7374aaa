"""Experiment orchestration: single runs, hyperparameter sweeps, reports.

A run executes the full pipeline per split: weak-classifier embeddings
(label-trained ones per split, the self-supervised one once), cosine top-k
rewiring, model training, and aggregation of the chosen metric as
mean +/- sample standard deviation over splits. Embeddings are always
written to disk and reloaded, which makes the two-phase structure explicit
and runs resumable.

Every numeric output embeds the full run configuration and a content hash
of the input data; re-running from a provenance record reproduces the
numbers exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import embeddings as emb_mod
from . import models
from .config import RunConfig, SweepGrid, substream_seed
from .embeddings import EmbeddingMatrix
from .graph import Graph, NodeTable, SplitSet, load_dataset
from .homophily import directed_report, format_report, report
from .rewiring import EcgEdges, cosine_topk, ecg_homophily
from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

RESULTS_HEADER = ["dataset", "backbone", "mode", "tau", "k", "p_de", "L", "d",
                  "metric", "mean", "std"]


@dataclass(frozen=True)
class EvalResult:
    """Per-split values of one metric with their mean and sample std."""

    metric: str
    values: tuple[float, ...]
    mean: float
    std: float

    @staticmethod
    def from_values(metric: str, values) -> "EvalResult":
        arr = np.asarray(list(values), dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return EvalResult(metric, tuple(float(v) for v in arr), float(arr.mean()), std)


@dataclass(frozen=True)
class ExperimentResult:
    config: RunConfig
    validation: EvalResult
    test: EvalResult


def data_content_hash(data_dir) -> str:
    """SHA-256 over the dataset's text files (names and bytes, sorted)."""
    h = hashlib.sha256()
    d = Path(data_dir)
    for name in sorted(("edges.tsv", "features.csv", "labels.csv", "splits.json")):
        p = d / name
        if p.exists():
            h.update(name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# embedding pipeline (written to disk, reloaded, cached)


def embedding_path(out_dir: Path, cfg: RunConfig, tag: str, split: int | None) -> Path:
    stem = {"MLP": f"mlp_d{cfg.embed_depth}w{cfg.embed_width}",
            "BGRL": f"bgrl_w{cfg.embed_width}",
            "MLPBGRL": f"mlpbgrl_d{cfg.embed_depth}w{cfg.embed_width}",
            "MLP->GNN": (f"mlpgnn_{cfg.backbone}_k{cfg.k}p{cfg.p_de}"
                         f"L{cfg.depth}d{cfg.width}")}[tag]
    if split is not None:
        stem += f"_split{split}"
    return out_dir / "embeddings" / (stem + ".emb")


def _cached(path: Path, compute) -> EmbeddingMatrix:
    if path.exists():
        logger.info("reusing %s", path)
        return emb_mod.load_embeddings(path)
    emb = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    emb_mod.save_embeddings(path, emb)
    return emb_mod.load_embeddings(path)


def _mlp_embedding(cfg: RunConfig, nodes: NodeTable, splits: SplitSet,
                   split_id: int, out_dir: Path) -> EmbeddingMatrix:
    def compute():
        _, emb = emb_mod.train_mlp(
            nodes, splits[split_id][0], cfg.embed_depth, cfg.embed_width,
            substream_seed(cfg.seed, "embed-mlp", split_id),
            epochs=cfg.embed_epochs, split_id=split_id)
        return emb

    return _cached(embedding_path(out_dir, cfg, "MLP", split_id), compute)


def _bgrl_embedding(cfg: RunConfig, g: Graph, nodes: NodeTable,
                    out_dir: Path) -> EmbeddingMatrix:
    def compute():
        _, emb = emb_mod.train_bgrl(
            g, nodes, cfg.embed_width, substream_seed(cfg.seed, "embed-bgrl"),
            steps=cfg.bgrl_steps, lr=cfg.bgrl_lr,
            feature_dropout=cfg.bgrl_feature_dropout,
            edge_dropout=cfg.bgrl_edge_dropout, ema=cfg.bgrl_ema)
        return emb

    return _cached(embedding_path(out_dir, cfg, "BGRL", None), compute)


def _gnn_embedding(cfg: RunConfig, g: Graph, nodes: NodeTable, splits: SplitSet,
                   split_id: int, out_dir: Path) -> EmbeddingMatrix:
    """Embeddings from a donor model of the same backbone trained with
    MLP-sourced rewiring on the same split."""
    def compute():
        donor_emb = _mlp_embedding(cfg, nodes, splits, split_id, out_dir)
        donor_ecg = cosine_topk(donor_emb, cfg.k)
        donor_cfg = cfg.replace(tau="MLP", mode="ecg")
        result = models.train(donor_cfg, g, nodes, splits[split_id], donor_ecg,
                              seed=substream_seed(cfg.seed, "donor-train", split_id))
        extracted = emb_mod.extract_gnn_embeddings(result.model, g, nodes,
                                                   donor_ecg,
                                                   symmetrize=cfg.symmetrize,
                                                   split_id=split_id)
        logger.info("split %d rewired homophily: donor embeddings %.3f, "
                    "extracted %.3f", split_id,
                    ecg_homophily(donor_ecg, nodes.labels),
                    ecg_homophily(cosine_topk(extracted, cfg.k), nodes.labels))
        return extracted

    return _cached(embedding_path(out_dir, cfg, "MLP->GNN", split_id), compute)


def embeddings_for_split(cfg: RunConfig, g: Graph, nodes: NodeTable,
                         splits: SplitSet, split_id: int,
                         out_dir: Path) -> EmbeddingMatrix:
    if cfg.tau == "MLP":
        return _mlp_embedding(cfg, nodes, splits, split_id, out_dir)
    if cfg.tau == "BGRL":
        return _bgrl_embedding(cfg, g, nodes, out_dir)
    if cfg.tau == "MLPBGRL":
        def compute():
            return emb_mod.concat_embeddings(
                _mlp_embedding(cfg, nodes, splits, split_id, out_dir),
                _bgrl_embedding(cfg, g, nodes, out_dir))

        return _cached(embedding_path(out_dir, cfg, "MLPBGRL", split_id), compute)
    if cfg.tau == "MLP->GNN":
        return _gnn_embedding(cfg, g, nodes, splits, split_id, out_dir)
    raise ValueError(f"unknown embedding source {cfg.tau!r}")


# ---------------------------------------------------------------------------
# single experiment


def _results_row(cfg: RunConfig, dataset: str, test: EvalResult) -> list:
    ecg_mode = cfg.mode == "ecg"
    return [dataset, cfg.backbone, cfg.mode,
            cfg.tau if ecg_mode else "-",
            cfg.k if ecg_mode else "-",
            cfg.p_de if ecg_mode else "-",
            cfg.depth, cfg.width, test.metric,
            f"{test.mean:.6f}", f"{test.std:.6f}"]


def write_results_csv(path, rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        writer.writerows(rows)


def run_experiment(cfg: RunConfig, out_dir, *,
                   data: tuple[Graph, NodeTable, SplitSet] | None = None,
                   save_models: bool = False) -> ExperimentResult:
    """Execute the full pipeline for every split and aggregate the metric."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = load_dataset(cfg.data_dir, num_splits=cfg.num_splits,
                            seed=substream_seed(cfg.seed, "data"))
    g, nodes, splits = data

    val_values = []
    test_values = []
    for i in range(len(splits)):
        ecg = None
        if cfg.mode == "ecg":
            emb = embeddings_for_split(cfg, g, nodes, splits, i, out_dir)
            ecg = cosine_topk(emb, cfg.k)
        try:
            result = models.train(cfg, g, nodes, splits[i], ecg,
                                  seed=substream_seed(cfg.seed, "train", i))
        except models.TrainingDiverged as exc:
            raise models.TrainingDiverged(f"split {i}: {exc}") from exc
        val_values.append(result.val_metric)
        test_values.append(result.test_metric)
        logger.info("split %d: val %.4f test %.4f (best epoch %d/%d)", i,
                    result.val_metric, result.test_metric, result.best_epoch,
                    result.epochs_run)
        if save_models:
            ckpt_dir = out_dir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            models.save_checkpoint(ckpt_dir / f"model_split{i}.ckpt",
                                   result.model, cfg.to_dict())

    outcome = ExperimentResult(
        cfg,
        EvalResult.from_values(cfg.metric, val_values),
        EvalResult.from_values(cfg.metric, test_values))
    dataset_name = Path(cfg.data_dir).name or "dataset"
    write_results_csv(out_dir / "results.csv",
                      [_results_row(cfg, dataset_name, outcome.test)])
    provenance = {
        "config": cfg.to_dict(),
        "data_hash": data_content_hash(cfg.data_dir) if cfg.data_dir else None,
        "metric": cfg.metric,
        "validation": {"values": list(outcome.validation.values),
                       "mean": outcome.validation.mean,
                       "std": outcome.validation.std},
        "test": {"values": list(outcome.test.values),
                 "mean": outcome.test.mean, "std": outcome.test.std},
        "std_kind": "sample standard deviation over splits (ddof=1)",
    }
    with open(out_dir / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return outcome


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepCell:
    config: RunConfig
    validation: EvalResult | None = None
    test: EvalResult | None = None
    error: str | None = None


@dataclass
class SweepResult:
    cells: list[SweepCell]
    selected: dict[str, dict[str, int]]   # backbone -> {mode -> cell index}
    selection_rule: str


def _cell_key(cfg: RunConfig) -> str:
    if cfg.mode == "baseline":
        return f"{cfg.backbone}_baseline_L{cfg.depth}_d{cfg.width}"
    tau = cfg.tau.replace("->", "2")
    return (f"{cfg.backbone}_ecg_{tau}_k{cfg.k}_p{cfg.p_de}"
            f"_L{cfg.depth}_d{cfg.width}")


def _run_cell(args) -> dict:
    cfg_dict, cell_dir = args
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        outcome = run_experiment(cfg, cell_dir)
        return {"ok": True,
                "validation": (outcome.validation.metric,
                               list(outcome.validation.values)),
                "test": (outcome.test.metric, list(outcome.test.values))}
    except Exception as exc:  # cell failures must not abort the sweep
        logger.warning("sweep cell failed (%s): %s", cell_dir, exc)
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def run_sweep(base: RunConfig, grid: SweepGrid, out_dir, *,
              jobs: int = 1) -> SweepResult:
    """Run the configuration lattice, select by mean validation metric, and
    report the selected cells' test numbers (never the max over test)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configs = grid.cells(base)
    cells = [SweepCell(cfg) for cfg in configs]
    tasks = [(cfg.to_dict(), str(out_dir / "cells" / _cell_key(cfg)))
             for cfg in configs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            payloads = list(pool.map(_run_cell, tasks))
    else:
        payloads = [_run_cell(t) for t in tasks]
    for cell, payload in zip(cells, payloads):
        if payload["ok"]:
            metric, vals = payload["validation"]
            cell.validation = EvalResult.from_values(metric, vals)
            metric, vals = payload["test"]
            cell.test = EvalResult.from_values(metric, vals)
        else:
            cell.error = payload["error"]

    selected = select_cells(cells)
    result = SweepResult(cells, selected,
                         "maximise mean validation metric; report that cell's test")
    dataset_name = Path(base.data_dir).name or "dataset"
    rows = [_results_row(c.config, dataset_name, c.test)
            for c in cells if c.test is not None]
    write_results_csv(out_dir / "results.csv", rows)
    (out_dir / "best_hparams.txt").write_text(
        format_sweep_report(result, dataset_name), encoding="utf-8")
    return result


def select_cells(cells: list[SweepCell]) -> dict[str, dict[str, int]]:
    """Best completed cell per (backbone, mode) by mean validation metric."""
    selected: dict[str, dict[str, int]] = {}
    for idx, cell in enumerate(cells):
        if cell.validation is None:
            continue
        per_backbone = selected.setdefault(cell.config.backbone, {})
        cur = per_backbone.get(cell.config.mode)
        if cur is None or cell.validation.mean > cells[cur].validation.mean:
            per_backbone[cell.config.mode] = idx
    return selected


def format_sweep_report(result: SweepResult, dataset_name: str) -> str:
    lines = [f"dataset: {dataset_name}",
             f"selection: {result.selection_rule}", ""]
    lines.append("best hyperparameters per backbone (rewired mode):")
    for backbone, modes in sorted(result.selected.items()):
        if "ecg" in modes:
            cfg = result.cells[modes["ecg"]].config
            lines += [f"  {backbone}:",
                      f"    L: {cfg.depth}",
                      f"    d: {cfg.width}",
                      f"    tau: {cfg.tau}",
                      f"    k: {cfg.k}",
                      f"    p_de: {cfg.p_de}"]
    lines.append("")
    lines.append("comparison (test metric of the validation-selected cell):")
    for backbone, modes in sorted(result.selected.items()):
        base_cell = result.cells[modes["baseline"]] if "baseline" in modes else None
        ecg_cell = result.cells[modes["ecg"]] if "ecg" in modes else None
        if base_cell is not None:
            lines.append(f"  {backbone} baseline: "
                         f"{base_cell.test.mean:.4f} ± {base_cell.test.std:.4f}")
        if ecg_cell is not None:
            marker = ""
            if base_cell is not None:
                if ecg_cell.test.mean > base_cell.test.mean:
                    marker = " (↑)"
                elif ecg_cell.test.mean < base_cell.test.mean:
                    marker = " (↓)"
                else:
                    marker = " (=)"
            lines.append(f"  {backbone} ecg:      "
                         f"{ecg_cell.test.mean:.4f} ± {ecg_cell.test.std:.4f}"
                         f"{marker}")
    failed = [c for c in result.cells if c.error is not None]
    if failed:
        lines.append("")
        lines.append(f"failed cells: {len(failed)}")
        for c in failed:
            lines.append(f"  {_cell_key(c.config)}: {c.error}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# qualitative projection


def pca_2d(values: np.ndarray) -> np.ndarray:
    """Project rows to the top-2 principal axes (centred, float64)."""
    x = np.asarray(values, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return x @ vt[:2].T


def projection_points(g: Graph, ecg: EcgEdges, features: np.ndarray,
                      seed: int, width: int = 64) -> dict[str, np.ndarray]:
    """Random-weight GCN layer over each graph, then PCA to 2-D.

    The same random weights are applied on both edge sets so the contrast
    between the two point clouds is purely structural.
    """
    rng = np.random.default_rng(seed)
    w = Tensor(T.glorot(rng, (features.shape[1], width)))
    b = Tensor(np.zeros((1, width), np.float32))
    params = {"W": w, "b": b}
    x = Tensor(np.asarray(features, dtype=np.float32))
    out = {}
    for name, edges in (("input", g), ("ecg", ecg)):
        h = models.backbone_layer("gcn", edges, x, params)
        out[name] = pca_2d(h.values)
    return out


def export_projection(g: Graph, ecg: EcgEdges, features: np.ndarray,
                      labels: np.ndarray, seed: int, out_path,
                      width: int = 64) -> None:
    """Write ``projection.csv`` with columns x,y,label,graph (2n rows)."""
    points = projection_points(g, ecg, features, seed, width)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "label", "graph"])
        for name in ("input", "ecg"):
            for (px, py), y in zip(points[name], labels):
                writer.writerow([f"{px:.9g}", f"{py:.9g}", int(y), name])


# ---------------------------------------------------------------------------
# statistics report


def stats_report(g: Graph, nodes: NodeTable, name: str,
                 ecg_sets: list[tuple[str, EcgEdges]] = ()) -> tuple[str, list[list]]:
    """Aligned text plus CSV rows (graph, edges, h-edge, h-adj, LI)."""
    def fmt(x):
        return "" if x is None else f"{x:.6f}"

    texts = []
    rows = []
    rep = report(g, nodes.labels)
    texts.append(format_report(name, rep))
    rows.append([name, rep.num_edges, fmt(rep.edge_homophily),
                 fmt(rep.adjusted_homophily), fmt(rep.label_informativeness)])
    for tag, edges in ecg_sets:
        r, s = edges.directed_pairs()
        drep = directed_report(r, s, nodes.labels)
        label = f"{name}/ecg-{tag}-k{edges.k}"
        texts.append(format_report(label, drep))
        rows.append([label, drep.num_edges, fmt(drep.edge_homophily),
                     fmt(drep.adjusted_homophily), fmt(drep.label_informativeness)])
    return "\n\n".join(texts), rows


def write_stats_csv(path, rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["graph", "edges", "edge_homophily",
                         "adjusted_homophily", "label_informativeness"])
        writer.writerows(rows)
