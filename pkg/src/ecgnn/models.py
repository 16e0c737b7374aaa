"""Two-processor GNNs: one backbone over the input graph and one over the
rewired neighbour graph, fused per layer by learned linear maps.

Backbones:

* ``gcn``      symmetric-normalised convolution with internal self-loops;
               normalisation degrees come from the edge set in use.
* ``sage``     separate self transform plus mean neighbour aggregation.
* ``gat_sep``  multi-head additive attention over neighbours plus a separate
               self transform. Attention is computed on a dense masked score
               matrix (O(n^2) memory), which is exact and fine at the scales
               this package targets.

Processor outputs are pre-activation; the model applies GELU (and dropout in
training) after the per-layer fusion, so the fusion itself stays linear. In
baseline mode a single processor runs on the input graph alone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import seed_stream
from .graph import Graph, NodeTable
from .rewiring import EcgEdges, symmetrize_pairs
from . import tensor as T
from .tensor import Tensor, Propagator

BACKBONES = ("gcn", "sage", "gat_sep")
ATTENTION_SLOPE = 0.2

CHECKPOINT_MAGIC = b"ECGN"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Non-finite loss during optimisation; message carries diagnostics."""


# ---------------------------------------------------------------------------
# edge structures and backbone kernels


@dataclass(frozen=True)
class EdgeArrays:
    """Directed message edges: ``dst[i]`` aggregates from ``src[i]``."""

    num_nodes: int
    dst: np.ndarray
    src: np.ndarray


def graph_arrays(g: Graph) -> EdgeArrays:
    r, s = g.directed_pairs()
    return EdgeArrays(g.num_nodes, r, s)


def ecg_arrays(edges: EcgEdges, symmetrize: bool = False) -> EdgeArrays:
    r, s = edges.directed_pairs()
    if symmetrize:
        r, s = symmetrize_pairs(r, s)
    return EdgeArrays(edges.num_nodes, r, s)


def _as_edge_arrays(edges) -> EdgeArrays:
    if isinstance(edges, EdgeArrays):
        return edges
    if isinstance(edges, Graph):
        return graph_arrays(edges)
    if isinstance(edges, EcgEdges):
        return ecg_arrays(edges)
    raise TypeError(f"unsupported edge container: {type(edges).__name__}")


@dataclass(frozen=True)
class Kernel:
    """Precomputed aggregation structure for one backbone on one edge set."""

    kind: str
    prop: Propagator | None = None
    coeff: np.ndarray | None = None
    mask: np.ndarray | None = None


def build_kernel(kind: str, ea: EdgeArrays, *,
                 full_recv: np.ndarray | None = None,
                 full_send: np.ndarray | None = None,
                 message_scale: float = 1.0) -> Kernel:
    """Build the aggregation kernel for ``kind`` on the given edge set.

    ``full_recv``/``full_send`` override the degree counts used for
    normalisation (the standard-DropEdge variant that keeps the full-set
    normalisation and rescales kept messages by ``message_scale``).
    """
    n, dst, src = ea.num_nodes, ea.dst, ea.src
    if kind == "gcn":
        recv = (np.bincount(dst, minlength=n) if full_recv is None else full_recv) + 1.0
        send = (np.bincount(src, minlength=n) if full_send is None else full_send) + 1.0
        loops = np.arange(n, dtype=np.int64)
        dst2 = np.concatenate([dst, loops])
        src2 = np.concatenate([src, loops])
        coeff = 1.0 / np.sqrt(recv[dst2] * send[src2])
        if message_scale != 1.0:
            coeff[:dst.size] *= message_scale
        return Kernel(kind, prop=Propagator(n, dst2, src2), coeff=coeff)
    if kind == "sage":
        recv = np.bincount(dst, minlength=n) if full_recv is None else full_recv
        denom = np.maximum(recv, 1)
        coeff = message_scale / denom[dst]
        return Kernel(kind, prop=Propagator(n, dst, src), coeff=coeff)
    if kind == "gat_sep":
        mask = np.zeros((n, n), dtype=bool)
        mask[dst, src] = True
        return Kernel(kind, mask=mask)
    raise ValueError(f"unknown backbone kind {kind!r}")


def _processor(kern: Kernel, h: Tensor, params: dict[str, Tensor],
               prefix: str, heads: int) -> Tensor:
    """One pre-activation processor layer on the kernel's edge set."""
    if kern.kind == "gcn":
        t = T.matmul(h, params[prefix + "W"])
        agg = T.spmm(kern.prop, kern.coeff, t)
        return T.add(agg, params[prefix + "b"])
    if kern.kind == "sage":
        self_term = T.matmul(h, params[prefix + "W_self"])
        mean_nbr = T.spmm(kern.prop, kern.coeff, h)
        agg = T.matmul(mean_nbr, params[prefix + "W_agg"])
        return T.add(T.add(self_term, agg), params[prefix + "b"])
    if kern.kind == "gat_sep":
        parts = []
        for j in range(heads):
            hp = f"{prefix}h{j}."
            proj = T.matmul(h, params[hp + "W"])
            s = T.matmul(proj, params[hp + "a_src"])
            t = T.matmul(proj, params[hp + "a_dst"])
            scores = T.leaky_relu(T.attention_scores(s, t), ATTENTION_SLOPE)
            alpha = T.masked_row_softmax(scores, kern.mask)
            parts.append(T.matmul(alpha, proj))
        agg = T.matmul(T.concat_cols(parts), params[prefix + "W_agg"])
        self_term = T.matmul(h, params[prefix + "W_self"])
        return T.add(T.add(self_term, agg), params[prefix + "b"])
    raise ValueError(f"unknown backbone kind {kern.kind!r}")


def backbone_layer(kind: str, edges, h: Tensor, params: dict[str, Tensor], *,
                   heads: int = 4, prefix: str = "") -> Tensor:
    """Standalone single-processor layer on an arbitrary edge set.

    ``edges`` may be a Graph, EdgeArrays, a rewired edge set, or a prebuilt
    Kernel. GCN and SAGE outputs pass through GELU; the attention variant
    composes its two linear paths without an activation.
    """
    kern = edges if isinstance(edges, Kernel) else build_kernel(kind, _as_edge_arrays(edges))
    if kern.kind != kind:
        raise ValueError(f"kernel built for {kern.kind!r}, requested {kind!r}")
    pre = _processor(kern, h, params, prefix, heads)
    return T.gelu(pre) if kind in ("gcn", "sage") else pre


def init_processor_params(rng: np.random.Generator, kind: str, in_dim: int,
                          width: int, prefix: str, heads: int = 4) -> dict[str, Tensor]:
    """Glorot-initialised parameter dict for one processor layer."""
    def p(shape):
        return Tensor(T.glorot(rng, shape), requires_grad=True)

    params: dict[str, Tensor] = {}
    if kind == "gcn":
        params[prefix + "W"] = p((in_dim, width))
    elif kind == "sage":
        params[prefix + "W_self"] = p((in_dim, width))
        params[prefix + "W_agg"] = p((in_dim, width))
    elif kind == "gat_sep":
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        dh = width // heads
        for j in range(heads):
            params[f"{prefix}h{j}.W"] = p((in_dim, dh))
            params[f"{prefix}h{j}.a_src"] = p((dh, 1))
            params[f"{prefix}h{j}.a_dst"] = p((dh, 1))
        params[prefix + "W_self"] = p((in_dim, width))
        params[prefix + "W_agg"] = p((width, width))
    else:
        raise ValueError(f"unknown backbone kind {kind!r}")
    params[prefix + "b"] = Tensor(np.zeros((1, width), dtype=np.float32),
                                  requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# the model


class EcgGnnModel:
    """Per-layer processor parameters, fusion matrices, and the classifier.

    In ``ecg`` mode each layer holds two processors (input graph and rewired
    graph) plus fusion matrices mapping both outputs to the shared width; in
    ``baseline`` mode a single processor per layer.
    """

    def __init__(self, backbone: str, depth: int, width: int, in_dim: int,
                 num_classes: int, mode: str = "ecg", heads: int = 4):
        if backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {backbone!r}")
        if mode not in ("baseline", "ecg"):
            raise ValueError(f"mode must be 'baseline' or 'ecg', got {mode!r}")
        if depth < 1:
            raise ValueError("depth must be at least 1")
        self.backbone = backbone
        self.depth = depth
        self.width = width
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.mode = mode
        self.heads = heads
        self.params: dict[str, Tensor] = {}

    def init_params(self, rng: np.random.Generator) -> "EcgGnnModel":
        self.params = {}
        for layer in range(1, self.depth + 1):
            din = self.in_dim if layer == 1 else self.width
            self.params.update(init_processor_params(
                rng, self.backbone, din, self.width, f"l{layer}.inp.", self.heads))
            if self.mode == "ecg":
                self.params.update(init_processor_params(
                    rng, self.backbone, din, self.width, f"l{layer}.ecg.", self.heads))
                self.params[f"l{layer}.fuse.W"] = Tensor(
                    T.glorot(rng, (self.width, self.width)), requires_grad=True)
                self.params[f"l{layer}.fuse.U"] = Tensor(
                    T.glorot(rng, (self.width, self.width)), requires_grad=True)
        self.params["head.W"] = Tensor(
            T.glorot(rng, (self.width, self.num_classes)), requires_grad=True)
        return self

    def param_count(self) -> int:
        return sum(p.values.size for p in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].values = v.copy()


@dataclass
class ForwardContext:
    """Static per-run state: kernels for the input graph and the rewired set."""

    model: EcgGnnModel
    kern_inp: Kernel
    ecg_full: EdgeArrays | None = None
    kern_ecg_eval: Kernel | None = None
    p_de: float = 0.0
    hidden_dropout: float = 0.0
    dropedge_rescale: bool = False
    full_recv: np.ndarray | None = None
    full_send: np.ndarray | None = None


def make_context(model: EcgGnnModel, g: Graph, ecg: EcgEdges | None = None, *,
                 p_de: float = 0.0, hidden_dropout: float = 0.0,
                 symmetrize: bool = False,
                 dropedge_rescale: bool = False) -> ForwardContext:
    kern_inp = build_kernel(model.backbone, graph_arrays(g))
    ctx = ForwardContext(model, kern_inp, p_de=p_de, hidden_dropout=hidden_dropout,
                         dropedge_rescale=dropedge_rescale)
    if model.mode == "ecg":
        if ecg is None:
            raise ValueError("ecg mode requires a rewired edge set")
        # symmetrisation (when requested) defines the edge set in use; edge
        # dropout then acts on that set
        ea = ecg_arrays(ecg, symmetrize=symmetrize)
        ctx.ecg_full = ea
        ctx.kern_ecg_eval = build_kernel(model.backbone, ea)
        if dropedge_rescale:
            ctx.full_recv = np.bincount(ea.dst, minlength=ea.num_nodes)
            ctx.full_send = np.bincount(ea.src, minlength=ea.num_nodes)
    return ctx


def _ecg_train_kernel(ctx: ForwardContext, rng: np.random.Generator) -> Kernel:
    """Kernel on a freshly dropped rewired edge set (one per layer per pass)."""
    full = ctx.ecg_full
    if ctx.p_de <= 0.0:
        r, s = full.dst, full.src
    elif ctx.p_de >= 1.0:
        r = s = np.empty(0, dtype=np.int64)
    else:
        keep = rng.random(full.dst.size) >= ctx.p_de
        r, s = full.dst[keep], full.src[keep]
    ea = EdgeArrays(full.num_nodes, r, s)
    if ctx.dropedge_rescale and ctx.p_de < 1.0:
        return build_kernel(ctx.model.backbone, ea, full_recv=ctx.full_recv,
                            full_send=ctx.full_send,
                            message_scale=1.0 / (1.0 - ctx.p_de))
    return build_kernel(ctx.model.backbone, ea)


def forward_hidden(ctx: ForwardContext, x: Tensor, train_mode: bool = False,
                   rng_dropedge: np.random.Generator | None = None,
                   rng_dropout: np.random.Generator | None = None) -> Tensor:
    """Final pre-classifier representation after all fused layers."""
    model = ctx.model
    h = x
    for layer in range(1, model.depth + 1):
        pre = _processor(ctx.kern_inp, h, model.params, f"l{layer}.inp.", model.heads)
        if model.mode == "ecg":
            if train_mode:
                kern_ecg = _ecg_train_kernel(ctx, rng_dropedge)
            else:
                kern_ecg = ctx.kern_ecg_eval
            pre_ecg = _processor(kern_ecg, h, model.params, f"l{layer}.ecg.",
                                 model.heads)
            fused = T.add(T.matmul(pre, model.params[f"l{layer}.fuse.W"]),
                          T.matmul(pre_ecg, model.params[f"l{layer}.fuse.U"]))
        else:
            fused = pre
        h = T.gelu(fused)
        if train_mode and ctx.hidden_dropout > 0.0:
            h = T.dropout(h, ctx.hidden_dropout, rng_dropout, train=True)
    return h


def forward_logits(ctx: ForwardContext, x: Tensor, train_mode: bool = False,
                   rng_dropedge: np.random.Generator | None = None,
                   rng_dropout: np.random.Generator | None = None) -> Tensor:
    h = forward_hidden(ctx, x, train_mode, rng_dropedge, rng_dropout)
    return T.matmul(h, ctx.model.params["head.W"])


def ecg_forward(model: EcgGnnModel, g: Graph, ecg: EcgEdges | None, x: Tensor, *,
                train_mode: bool = False, rng: np.random.Generator | None = None,
                p_de: float = 0.0, hidden_dropout: float = 0.0,
                symmetrize: bool = False) -> Tensor:
    """Convenience single-call forward; builds kernels on the fly."""
    ctx = make_context(model, g, ecg, p_de=p_de, hidden_dropout=hidden_dropout,
                       symmetrize=symmetrize)
    if train_mode and rng is None:
        rng = np.random.default_rng(0)
    return forward_logits(ctx, x, train_mode, rng, rng)


# ---------------------------------------------------------------------------
# metrics


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Argmax match rate over the mask; argmax ties go to the lowest class."""
    pred = np.argmax(logits[mask], axis=1)
    return float(np.mean(pred == np.asarray(labels)[mask]))


def roc_auc(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Probability a random positive outscores a random negative, ties 1/2."""
    s = np.asarray(scores, dtype=np.float64)[mask]
    y = np.asarray(labels)[mask]
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc requires both classes in the mask")
    order = np.argsort(s, kind="stable")
    sv = s[order]
    starts = np.concatenate([[0], np.flatnonzero(sv[1:] != sv[:-1]) + 1])
    ends = np.concatenate([starts[1:], [s.size]])
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metric_value(metric: str, logits: np.ndarray, labels: np.ndarray,
                 mask: np.ndarray) -> float:
    if metric == "accuracy":
        return accuracy(logits, labels, mask)
    if metric == "auc":
        if logits.shape[1] != 2:
            raise ValueError("AUC is defined for binary tasks only")
        return roc_auc(logits[:, 1] - logits[:, 0], labels, mask)
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: EcgGnnModel
    val_metric: float
    test_metric: float
    best_epoch: int
    epochs_run: int
    history: list[tuple[float, float]] = field(default_factory=list)


def train(cfg, g: Graph, nodes: NodeTable, split, ecg: EcgEdges | None = None,
          seed: int = 0, *, model: EcgGnnModel | None = None,
          freeze: frozenset[str] = frozenset()) -> TrainResult:
    """Train one model on one split with early stopping on validation.

    Optimises masked cross-entropy on the train set, tracks the validation
    metric every epoch, retains the best-validation parameters, and
    evaluates once on test. ``cfg`` is a RunConfig; ``model`` may be passed
    pre-initialised (its listed ``freeze`` parameters are excluded from the
    optimiser but still participate in the forward pass).
    """
    train_idx, val_idx, test_idx = split
    if train_idx.size == 0:
        raise ValueError("empty train mask")
    present = np.unique(nodes.labels[train_idx])
    if present.size < nodes.num_classes:
        missing = sorted(set(range(nodes.num_classes)) - set(present.tolist()))
        raise ValueError(f"class(es) {missing} missing from train mask")

    rng_init = seed_stream(seed, "init")
    rng_dropout = seed_stream(seed, "dropout")
    rng_dropedge = seed_stream(seed, "dropedge")

    if model is None:
        mode = cfg.mode
        model = EcgGnnModel(cfg.backbone, cfg.depth, cfg.width,
                            nodes.features.shape[1], nodes.num_classes,
                            mode=mode, heads=cfg.heads).init_params(rng_init)
    ctx = make_context(model, g, ecg if model.mode == "ecg" else None,
                       p_de=cfg.p_de, hidden_dropout=cfg.hidden_dropout,
                       symmetrize=cfg.symmetrize,
                       dropedge_rescale=cfg.dropedge_rescale)
    x = Tensor(nodes.features)
    trainable = {k: p for k, p in model.params.items() if k not in freeze}
    state = T.AdamState(trainable)

    best_val = -np.inf
    best_snap = model.snapshot()
    best_epoch = 0
    bad_epochs = 0
    history: list[tuple[float, float]] = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        with T.Tape() as tape:
            logits = forward_logits(ctx, x, True, rng_dropedge, rng_dropout)
            loss = T.cross_entropy(logits, nodes.labels, train_idx)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise TrainingDiverged(
                f"non-finite loss {loss_value} at epoch {epoch} "
                f"(backbone={model.backbone}, mode={model.mode}, lr={cfg.lr})")
        tape.backward(loss)
        T.adam_step(trainable, state, lr=cfg.lr)
        T.zero_grads(model.params)

        eval_logits = forward_logits(ctx, x, False).values
        val = metric_value(cfg.metric, eval_logits, nodes.labels, val_idx)
        history.append((loss_value, val))
        if val > best_val:
            best_val = val
            best_snap = model.snapshot()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    model.restore(best_snap)
    final_logits = forward_logits(ctx, x, False).values
    test = metric_value(cfg.metric, final_logits, nodes.labels, test_idx)
    return TrainResult(model, best_val, test, best_epoch, epoch, history)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: EcgGnnModel, config: dict | None = None) -> None:
    """Versioned binary container: header JSON + little-endian float32 block."""
    manifest = []
    blocks = []
    offset = 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].values, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        blocks.append(arr.tobytes())
    header = {
        "model": {"backbone": model.backbone, "depth": model.depth,
                  "width": model.width, "in_dim": model.in_dim,
                  "num_classes": model.num_classes, "mode": model.mode,
                  "heads": model.heads},
        "config": config or {},
        "manifest": manifest,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        for b in blocks:
            fh.write(b)


def load_checkpoint(path) -> tuple[EcgGnnModel, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        block = fh.read()
    m = header["model"]
    model = EcgGnnModel(m["backbone"], m["depth"], m["width"], m["in_dim"],
                        m["num_classes"], mode=m["mode"], heads=m["heads"])
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        arr = np.frombuffer(block, dtype="<f4", count=count, offset=start)
        model.params[entry["name"]] = Tensor(
            arr.reshape(shape).astype(np.float32), requires_grad=True)
    return model, header["config"]
