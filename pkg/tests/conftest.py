"""Shared fixtures and numerical checking helpers."""

from __future__ import annotations

import numpy as np
import pytest

from ecgnn.graph import Graph, NodeTable, graph_from_edges
from ecgnn.tensor import Tape, Tensor


def triangle_graph() -> Graph:
    return graph_from_edges(3, np.array([[0, 1], [0, 2], [1, 2]]))


def path_graph(n: int) -> Graph:
    edges = np.array([[i, i + 1] for i in range(n - 1)])
    return graph_from_edges(n, edges)


def random_graph(rng: np.random.Generator, num_nodes: int,
                 edge_prob: float = 0.4) -> Graph:
    pairs = [(u, v) for u in range(num_nodes) for v in range(u + 1, num_nodes)
             if rng.random() < edge_prob]
    if not pairs:
        pairs = [(0, 1)]
    return graph_from_edges(num_nodes, np.array(pairs))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# gradient checking: analytic float32 backward vs float64 central differences


def fd_gradients(build, arrays: dict[str, np.ndarray], h: float = 1e-3):
    grads = {}
    base = {k: np.asarray(v, dtype=np.float64).copy() for k, v in arrays.items()}

    def loss_at(values):
        return build({k: Tensor(v.copy()) for k, v in values.items()}).item()

    for name in arrays:
        g = np.zeros_like(base[name])
        for idx in np.ndindex(*base[name].shape):
            orig = base[name][idx]
            base[name][idx] = orig + h
            lp = loss_at(base)
            base[name][idx] = orig - h
            lm = loss_at(base)
            base[name][idx] = orig
            g[idx] = (lp - lm) / (2.0 * h)
        grads[name] = g
    return grads


def check_gradients(build, arrays: dict[str, np.ndarray], tol: float = 1e-4,
                    h: float = 1e-3) -> float:
    """Assert the recorded backward pass matches central finite differences.

    The analytic gradient runs the production float32 path; the difference
    quotients re-evaluate the same computation in float64. Returns the worst
    relative error over all inputs.
    """
    arrays32 = {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays32.items()}
    with Tape() as tape:
        loss = build(tensors)
    tape.backward(loss)
    fd = fd_gradients(build, arrays32, h=h)
    pairs = {name: (np.asarray(tensors[name].grad, dtype=np.float64), fd[name])
             for name in arrays}
    # one scale for the whole check: the error of any block is judged
    # against the gradient's overall magnitude (with a floor so checks of
    # legitimately zero gradients stay meaningful)
    scale = max(max(float(np.max(np.abs(a))), float(np.max(np.abs(f))))
                for a, f in pairs.values())
    scale = max(scale, 1e-3)
    worst = 0.0
    for name, (analytic, numeric) in pairs.items():
        rel = float(np.max(np.abs(analytic - numeric))) / scale
        worst = max(worst, rel)
        assert rel <= tol, f"gradient mismatch for {name!r}: rel err {rel:.3e}"
    return worst


def make_node_table(rng: np.random.Generator, num_nodes: int, num_classes: int,
                    dim: int = 6) -> NodeTable:
    labels = rng.integers(0, num_classes, num_nodes)
    labels[:num_classes] = np.arange(num_classes)  # every class present
    feats = rng.standard_normal((num_nodes, dim)).astype(np.float32)
    return NodeTable(feats, labels.astype(np.int64), num_classes)


def backbone_arrays(kind: str, g, in_dim: int, width: int, heads: int, *,
                    seed: int, h_rng: np.random.Generator,
                    fd_step: float) -> dict[str, np.ndarray]:
    """Random layer parameters plus input, re-drawn until every attention
    score sits away from the leaky-relu kink (central differences are only
    meaningful at smooth points)."""
    from ecgnn.models import init_processor_params

    for attempt in range(100):
        params = init_processor_params(np.random.default_rng(seed + attempt),
                                       kind, in_dim, width, "", heads=heads)
        arrays = {k: p.values.copy() for k, p in params.items()}
        arrays["h"] = h_rng.standard_normal((g.num_nodes, in_dim)).astype(np.float32)
        if kind != "gat_sep":
            return arrays
        margin = np.inf
        for j in range(heads):
            proj = arrays["h"] @ arrays[f"h{j}.W"]
            s = proj @ arrays[f"h{j}.a_src"]
            t = proj @ arrays[f"h{j}.a_dst"]
            margin = min(margin, float(np.abs(s + t.T).min()))
        if margin > 20 * fd_step:
            return arrays
    raise AssertionError("no kink-free parameter draw found")
