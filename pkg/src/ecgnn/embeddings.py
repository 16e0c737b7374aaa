"""Frozen node embeddings from weak classifiers.

Four sources feed the rewiring stage:

* ``MLP``       a label-trained pointwise network (no graph access); one
                embedding per split, trained on that split's train mask only.
* ``BGRL``      a structure-trained self-supervised encoder (no label
                access): an online GCN encoder chases an EMA target encoder
                through a predictor under random feature/edge dropout,
                maximising per-node cosine alignment. Trained once and
                shared across splits.
* ``MLPBGRL``   the row-normalised concatenation of the two.
* ``MLP->GNN``  final hidden representations extracted from an already
                trained MLP-rewired model of the same backbone.

Embeddings are immutable after extraction and are persisted to ``.emb``
text files (header line ``<num_nodes> <dim> <source_tag> <split_id|->``,
then one space-separated row per node at 9 significant digits, which
round-trips float32 exactly).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import EMBEDDING_SOURCES, seed_stream
from .graph import Graph, NodeTable
from .models import (EcgGnnModel, EdgeArrays, backbone_layer, build_kernel,
                     forward_hidden, graph_arrays, make_context)
from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

TAG_MLP, TAG_BGRL, TAG_MLPBGRL, TAG_MLP_GNN = EMBEDDING_SOURCES


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Immutable per-node embedding block with its provenance tag."""

    values: np.ndarray          # (num_nodes, dim) float32, read-only
    source_tag: str
    split_id: int | None = None

    def __post_init__(self):
        if self.source_tag not in EMBEDDING_SOURCES:
            raise ValueError(f"unknown source tag {self.source_tag!r}")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite embedding value")
        self.values.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _normalize_rows(values: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(values.astype(np.float64), axis=1, keepdims=True)
    out = np.divide(values, norms, out=np.zeros_like(values, dtype=np.float64),
                    where=norms > 0)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# label-trained pointwise network


def mlp_hidden(params: dict[str, Tensor], x: Tensor, depth: int) -> Tensor:
    """Hidden stack: GELU layers with skip connections from the third layer
    on (the first two layers are plain, so depth 2 is the unadorned
    two-matrix form)."""
    h = x
    for i in range(1, depth + 1):
        z = T.add(T.matmul(h, params[f"l{i}.W"]), params[f"l{i}.b"])
        a = T.gelu(z)
        h = T.add(a, h) if i >= 3 else a
    return h


def init_mlp_params(rng: np.random.Generator, in_dim: int, width: int,
                    depth: int, num_classes: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i in range(1, depth + 1):
        din = in_dim if i == 1 else width
        params[f"l{i}.W"] = Tensor(T.glorot(rng, (din, width)), requires_grad=True)
        params[f"l{i}.b"] = Tensor(np.zeros((1, width), np.float32), requires_grad=True)
    params["head.W"] = Tensor(T.glorot(rng, (width, num_classes)), requires_grad=True)
    params["head.b"] = Tensor(np.zeros((1, num_classes), np.float32), requires_grad=True)
    return params


def train_mlp(nodes: NodeTable, train_idx: np.ndarray, depth: int, width: int,
              seed: int, *, lr: float = 3e-3, epochs: int = 300,
              split_id: int | None = None) -> tuple[dict[str, Tensor], EmbeddingMatrix]:
    """Train the pointwise classifier on one split's train mask.

    A disposable logistic head is attached during training; the returned
    embedding is the final hidden activation for every node.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("empty train mask")
    present = np.unique(nodes.labels[train_idx])
    if present.size < nodes.num_classes:
        missing = sorted(set(range(nodes.num_classes)) - set(present.tolist()))
        raise ValueError(f"class(es) {missing} missing from train mask")

    rng = seed_stream(seed, "init")
    params = init_mlp_params(rng, nodes.features.shape[1], width, depth,
                             nodes.num_classes)
    state = T.AdamState(params)
    x = Tensor(nodes.features)
    for _ in range(epochs):
        with T.Tape() as tape:
            hidden = mlp_hidden(params, x, depth)
            logits = T.add(T.matmul(hidden, params["head.W"]), params["head.b"])
            loss = T.cross_entropy(logits, nodes.labels, train_idx)
        tape.backward(loss)
        T.adam_step(params, state, lr=lr)
        T.zero_grads(params)

    hidden = mlp_hidden(params, x, depth)
    emb = EmbeddingMatrix(hidden.values.copy(), TAG_MLP, split_id)
    return params, emb


def mlp_predictions(params: dict[str, Tensor], nodes: NodeTable, depth: int) -> np.ndarray:
    hidden = mlp_hidden(params, Tensor(nodes.features), depth)
    logits = T.add(T.matmul(hidden, params["head.W"]), params["head.b"])
    return logits.values


# ---------------------------------------------------------------------------
# structure-trained self-supervised encoder


@dataclass
class BgrlState:
    """Online/target encoder parameters, predictor, and training trace.

    Online and target encoders share shapes; target parameters are never
    touched by the optimiser (only by the EMA update).
    """

    online: dict[str, Tensor]
    target: dict[str, Tensor]
    predictor: dict[str, Tensor]
    ema: float
    feature_dropout: float
    edge_dropout: float
    loss_history: list[float] = field(default_factory=list)


def _encoder_params(rng: np.random.Generator, in_dim: int, width: int,
                    requires_grad: bool) -> dict[str, Tensor]:
    params = {}
    for i, din in enumerate((in_dim, width), start=1):
        params[f"enc{i}.W"] = Tensor(T.glorot(rng, (din, width)),
                                     requires_grad=requires_grad)
        params[f"enc{i}.b"] = Tensor(np.zeros((1, width), np.float32),
                                     requires_grad=requires_grad)
    return params


def _encode(params: dict[str, Tensor], kern, x: Tensor) -> Tensor:
    h = backbone_layer("gcn", kern, x, params, prefix="enc1.")
    return backbone_layer("gcn", kern, h, params, prefix="enc2.")


def _predict(params: dict[str, Tensor], h: Tensor) -> Tensor:
    z = T.gelu(T.add(T.matmul(h, params["p1.W"]), params["p1.b"]))
    return T.add(T.matmul(z, params["p2.W"]), params["p2.b"])


def _dropped_graph_kernel(g: Graph, p_e: float, rng: np.random.Generator):
    u, v = g.undirected_pairs()
    keep = rng.random(u.size) >= p_e
    uu, vv = u[keep], v[keep]
    ea = EdgeArrays(g.num_nodes, np.concatenate([uu, vv]), np.concatenate([vv, uu]))
    return build_kernel("gcn", ea)


def train_bgrl(g: Graph, nodes: NodeTable, width: int, seed: int, *,
               steps: int = 500, feature_dropout: float = 0.2,
               edge_dropout: float = 0.3, ema: float = 0.99,
               lr: float = 2e-4) -> tuple[BgrlState, EmbeddingMatrix]:
    """Self-supervised training on features and structure only.

    Each step draws two augmentations, aligns predictor(online(aug_i)) with
    target(aug_j) by mean row cosine (both orderings, averaged), updates the
    online encoder and predictor by gradient, and moves the target towards
    the online encoder by EMA. Labels are never read. A single training run
    serves every split. The default learning rate is sized so the alignment
    loss is still descending at the end of the default step budget.
    """
    if g.num_undirected_edges < 1:
        raise ValueError("self-supervised training needs at least one edge")
    in_dim = nodes.features.shape[1]
    rng_init = seed_stream(seed, "init")
    rng_aug = seed_stream(seed, "augmentation")
    online = _encoder_params(rng_init, in_dim, width, requires_grad=True)
    target = {k: Tensor(p.values.copy()) for k, p in online.items()}
    predictor = {
        "p1.W": Tensor(T.glorot(rng_init, (width, width)), requires_grad=True),
        "p1.b": Tensor(np.zeros((1, width), np.float32), requires_grad=True),
        "p2.W": Tensor(T.glorot(rng_init, (width, width)), requires_grad=True),
        "p2.b": Tensor(np.zeros((1, width), np.float32), requires_grad=True),
    }
    state = BgrlState(online, target, predictor, ema, feature_dropout, edge_dropout)
    trainable = {**online, **predictor}
    opt = T.AdamState(trainable)
    x = Tensor(nodes.features)

    for _ in range(steps):
        x1 = T.dropout(x, feature_dropout, rng_aug)
        x2 = T.dropout(x, feature_dropout, rng_aug)
        k1 = _dropped_graph_kernel(g, edge_dropout, rng_aug)
        k2 = _dropped_graph_kernel(g, edge_dropout, rng_aug)
        with T.Tape() as tape:
            # target forwards record nothing: target tensors are untracked
            h2 = _encode(target, k2, x2)
            h1t = _encode(target, k1, x1)
            z1 = _predict(predictor, _encode(online, k1, x1))
            z2 = _predict(predictor, _encode(online, k2, x2))
            align = T.add(T.mean_all(T.cosine_rowwise(z1, h2)),
                          T.mean_all(T.cosine_rowwise(z2, h1t)))
            loss = T.scale(align, -0.5)
        state.loss_history.append(loss.item())
        tape.backward(loss)
        T.adam_step(trainable, opt, lr=lr)
        T.zero_grads(trainable)
        for name, p in target.items():
            p.values = ema * p.values + (1.0 - ema) * online[name].values

    full_kernel = build_kernel("gcn", graph_arrays(g))
    emb_values = _encode(online, full_kernel, x).values.copy()
    emb = EmbeddingMatrix(emb_values.astype(np.float32), TAG_BGRL, None)
    return state, emb


# ---------------------------------------------------------------------------
# derived sources


def concat_embeddings(a: EmbeddingMatrix, b: EmbeddingMatrix) -> EmbeddingMatrix:
    """Row-normalise each block to unit L2 norm (zero rows stay zero) and
    concatenate horizontally."""
    if a.num_nodes != b.num_nodes:
        raise ValueError(f"node-count mismatch: {a.num_nodes} vs {b.num_nodes}")
    values = np.hstack([_normalize_rows(a.values), _normalize_rows(b.values)])
    split_id = a.split_id if a.split_id is not None else b.split_id
    return EmbeddingMatrix(values, TAG_MLPBGRL, split_id)


def extract_gnn_embeddings(model: EcgGnnModel, g: Graph, nodes: NodeTable,
                           ecg=None, *, symmetrize: bool = False,
                           split_id: int | None = None) -> EmbeddingMatrix:
    """Final pre-classifier representations of a trained donor model."""
    if not model.params:
        raise ValueError("donor model has no parameters")
    ctx = make_context(model, g, ecg if model.mode == "ecg" else None,
                       symmetrize=symmetrize)
    hidden = forward_hidden(ctx, Tensor(nodes.features), train_mode=False)
    return EmbeddingMatrix(hidden.values.copy(), TAG_MLP_GNN, split_id)


# ---------------------------------------------------------------------------
# persistence


def save_embeddings(path, emb: EmbeddingMatrix) -> None:
    split = "-" if emb.split_id is None else str(emb.split_id)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{emb.num_nodes} {emb.dim} {emb.source_tag} {split}\n")
        for row in emb.values:
            fh.write(" ".join(f"{x:.9g}" for x in row) + "\n")


def load_embeddings(path) -> EmbeddingMatrix:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4:
            raise ValueError(f"{path}: malformed embedding header")
        n, dim, tag, split = int(header[0]), int(header[1]), header[2], header[3]
        values = np.loadtxt(fh, dtype=np.float32, ndmin=2)
    if values.shape != (n, dim):
        raise ValueError(f"{path}: expected {n}x{dim} values, got {values.shape}")
    return EmbeddingMatrix(values, tag, None if split == "-" else int(split))
