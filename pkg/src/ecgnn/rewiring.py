"""Cosine top-k neighbour graphs over node embeddings, plus edge dropout.

The rewired graph is directed: each node aggregates from exactly the k nodes
most cosine-similar to it, with no self-selection and no symmetrisation.
Similarities are computed exactly (full pairwise scan, float64) in row
blocks; ties are broken towards the smaller node id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_BLOCK_ROWS = 512


@dataclass(frozen=True)
class EcgEdges:
    """Exactly-k directed neighbour lists with non-increasing scores."""

    k: int
    neighbor_ids: np.ndarray   # (n, k) int64
    scores: np.ndarray         # (n, k) float64

    def __post_init__(self):
        self.neighbor_ids.setflags(write=False)
        self.scores.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return self.neighbor_ids.shape[0]

    def directed_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All directed edges as (receivers, senders)."""
        n = self.num_nodes
        receivers = np.repeat(np.arange(n, dtype=np.int64), self.k)
        return receivers, self.neighbor_ids.reshape(-1)

    def validate(self) -> None:
        n, k = self.neighbor_ids.shape
        if k != self.k:
            raise ValueError("neighbor list width does not match k")
        if self.neighbor_ids.min() < 0 or self.neighbor_ids.max() >= n:
            raise ValueError("neighbor id out of range")
        if np.any(self.neighbor_ids == np.arange(n)[:, None]):
            raise ValueError("self-selection in neighbor lists")
        if np.any(np.diff(self.scores, axis=1) > 0):
            raise ValueError("scores must be non-increasing within each list")


def _normalize_rows(values: np.ndarray) -> np.ndarray:
    emb = np.asarray(values, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    ok = norms > 0.0
    return np.divide(emb, norms, out=np.zeros_like(emb), where=ok)


def _block_scores(queries: np.ndarray, unit: np.ndarray) -> np.ndarray:
    """Pairwise dot products accumulated feature-by-feature.

    The fixed per-feature summation order makes identical vector pairs give
    bitwise-identical scores wherever they sit in the matrix, so exact ties
    stay exact (a dense BLAS product does not guarantee that across tiles).
    """
    out = np.zeros((queries.shape[0], unit.shape[0]))
    for j in range(unit.shape[1]):
        out += queries[:, j, None] * unit[None, :, j]
    return out


def cosine_topk(emb, k: int) -> EcgEdges:
    """Exact top-k cosine neighbours for every node.

    ``emb`` is an (n, d) array or anything with a ``.values`` array (an
    embedding matrix). Zero-norm rows score 0 against everything. Ties are
    resolved towards the smaller id. O(n^2 d), blocked over query rows.
    """
    values = getattr(emb, "values", emb)
    n = values.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < num_nodes, got k={k}, n={n}")
    unit = _normalize_rows(values)
    nbr = np.empty((n, k), dtype=np.int64)
    scr = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, n)
        sims = _block_scores(unit[start:stop], unit)
        sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        # stable sort on the negated scores: equal scores keep ascending id
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        nbr[start:stop] = order
        scr[start:stop] = np.take_along_axis(sims, order, axis=1)
    edges = EcgEdges(k, nbr, scr)
    edges.validate()
    return edges


def ecg_homophily(edges: EcgEdges, labels: np.ndarray) -> float:
    """Fraction of directed edges whose endpoints share a label."""
    labels = np.asarray(labels)
    r, s = edges.directed_pairs()
    return float(np.mean(labels[r] == labels[s]))


def drop_edge(edges: EcgEdges, p_de: float,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Keep each directed edge independently with probability ``1 - p_de``.

    Resampled by the caller at every layer of every training forward pass;
    evaluation uses the full edge set. No rescaling of kept messages.
    """
    if not 0.0 <= p_de <= 1.0:
        raise ValueError("p_de must lie in [0, 1]")
    r, s = edges.directed_pairs()
    if p_de <= 0.0:
        return r, s
    if p_de >= 1.0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    keep = rng.random(r.size) >= p_de
    return r[keep], s[keep]


def symmetrize_pairs(receivers: np.ndarray,
                     senders: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Union of both orientations with duplicates removed."""
    n = int(max(receivers.max(initial=-1), senders.max(initial=-1))) + 1
    codes = np.concatenate([receivers * n + senders, senders * n + receivers])
    codes = np.unique(codes)
    return codes // n, codes % n


def save_ecg_edges(path, edges: EcgEdges, *, source_tag: str,
                   labels: np.ndarray | None = None) -> None:
    """Write ``u v score`` lines plus a one-line JSON sidecar."""
    path = Path(path)
    r, s = edges.directed_pairs()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v, sc in zip(r, s, edges.scores.reshape(-1)):
            fh.write(f"{u} {v} {sc:.9g}\n")
    sidecar = {"k": edges.k, "source_tag": source_tag}
    if labels is not None:
        sidecar["directed_edge_homophily"] = ecg_homophily(edges, labels)
    with open(path.with_suffix(path.suffix + ".json"), "w",
              encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar, fh)
        fh.write("\n")


def load_ecg_edges(path) -> EcgEdges:
    rows: dict[int, list[tuple[int, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            u, v, sc = line.split()
            rows.setdefault(int(u), []).append((int(v), float(sc)))
    n = max(rows) + 1
    ks = {len(v) for v in rows.values()}
    if len(rows) != n or len(ks) != 1:
        raise ValueError(f"{path}: every node needs the same number of neighbours")
    k = ks.pop()
    nbr = np.empty((n, k), dtype=np.int64)
    scr = np.empty((n, k), dtype=np.float64)
    for u, lst in rows.items():
        nbr[u] = [v for v, _ in lst]
        scr[u] = [sc for _, sc in lst]
    edges = EcgEdges(k, nbr, scr)
    edges.validate()
    return edges
