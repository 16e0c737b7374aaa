"""Dataset containers and IO: sparse undirected graphs, node tables, splits.

File formats (all UTF-8, LF line endings):

* ``edges.tsv``     one undirected edge per line, two 0-based node ids
                    separated by whitespace; each edge listed once.
* ``features.csv``  one node per line, comma-separated reals; row i = node i.
* ``labels.csv``    one 0-based class id per line.
* ``splits.json``   array of ``{"train": [...], "val": [...], "test": [...]}``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

TRAIN_FRACTION = 0.5
VAL_FRACTION = 0.25


class DatasetError(ValueError):
    """Malformed dataset input; the message carries file and line context."""


def _fail(path, message, line=None):
    where = str(path) if line is None else f"{path}:{line}"
    raise DatasetError(f"{where}: {message}")


@dataclass(frozen=True)
class Graph:
    """Undirected graph in compressed row form.

    Neighbours of node ``u`` are
    ``neighbor_ids[row_offsets[u]:row_offsets[u + 1]]``, strictly increasing.
    Adjacency is symmetric, self-loops are never stored, and the total slot
    count equals ``2 * num_undirected_edges``.
    """

    num_nodes: int
    row_offsets: np.ndarray
    neighbor_ids: np.ndarray
    num_undirected_edges: int

    def __post_init__(self):
        self.row_offsets.setflags(write=False)
        self.neighbor_ids.setflags(write=False)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, u: int) -> np.ndarray:
        return self.neighbor_ids[self.row_offsets[u]:self.row_offsets[u + 1]]

    def directed_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Both orientations of every edge as (receivers, senders)."""
        receivers = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees)
        return receivers, self.neighbor_ids

    def undirected_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Each edge once as (u, v) with u < v."""
        r, s = self.directed_pairs()
        keep = r < s
        return r[keep], s[keep]

    def validate(self) -> None:
        n = self.num_nodes
        if self.row_offsets.shape != (n + 1,) or self.row_offsets[0] != 0:
            raise DatasetError("row_offsets must have length num_nodes + 1 and start at 0")
        if self.row_offsets[-1] != self.neighbor_ids.size:
            raise DatasetError("row_offsets must end at len(neighbor_ids)")
        if np.any(np.diff(self.row_offsets) < 0):
            raise DatasetError("row_offsets must be non-decreasing")
        if self.neighbor_ids.size != 2 * self.num_undirected_edges:
            raise DatasetError("slot count must equal 2 * num_undirected_edges")
        if self.neighbor_ids.size == 0:
            return
        if self.neighbor_ids.min() < 0 or self.neighbor_ids.max() >= n:
            raise DatasetError("neighbor id out of range")
        r, s = self.directed_pairs()
        if np.any(r == s):
            raise DatasetError("self-loop stored in adjacency")
        same_row = r[:-1] == r[1:]
        if np.any(same_row & (self.neighbor_ids[:-1] >= self.neighbor_ids[1:])):
            raise DatasetError("adjacency lists must be strictly increasing")
        # exhaustive symmetry: the multiset of (u, v) equals the multiset of (v, u)
        fwd = np.sort(r * n + s)
        rev = np.sort(s * n + r)
        if not np.array_equal(fwd, rev):
            raise DatasetError("adjacency is not symmetric")


def graph_from_edges(num_nodes: int, edges: np.ndarray, *,
                     source: str = "<edges>", lines: np.ndarray | None = None) -> Graph:
    """Build a validated Graph from an (m, 2) array of undirected edges.

    Self-loops are stripped with a warning. Duplicate edges (in either
    orientation) are an error.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = int(np.flatnonzero((edges < 0).any(1) | (edges >= num_nodes).any(1))[0])
        _fail(source, f"node id out of range in edge ({edges[bad, 0]}, {edges[bad, 1]})",
              None if lines is None else int(lines[bad]))
    loop = edges[:, 0] == edges[:, 1]
    if loop.any():
        logger.warning("%s: stripped %d self-loop(s) on load", source, int(loop.sum()))
        edges = edges[~loop]
        if lines is not None:
            lines = lines[~loop]
    canon = np.sort(edges, axis=1)
    order = np.lexsort((canon[:, 1], canon[:, 0]))
    sc = canon[order]
    dup = np.flatnonzero((sc[1:] == sc[:-1]).all(axis=1))
    if dup.size:
        i = order[dup[0] + 1]
        _fail(source, f"duplicate edge ({edges[i, 0]}, {edges[i, 1]})",
              None if lines is None else int(lines[i]))
    receivers = np.concatenate([edges[:, 0], edges[:, 1]])
    senders = np.concatenate([edges[:, 1], edges[:, 0]])
    perm = np.lexsort((senders, receivers))
    counts = np.bincount(receivers, minlength=num_nodes)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    g = Graph(num_nodes, offsets, senders[perm], edges.shape[0])
    g.validate()
    return g


@dataclass(frozen=True)
class NodeTable:
    """Node feature matrix, integer labels in 0..C-1, and the class count."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    def validate(self, num_nodes: int) -> None:
        if self.features.shape[0] != num_nodes:
            raise DatasetError(
                f"feature row-count mismatch: {self.features.shape[0]} rows for {num_nodes} nodes")
        if self.labels.shape != (num_nodes,):
            raise DatasetError("labels length must equal num_nodes")
        if not np.isfinite(self.features).all():
            raise DatasetError("non-finite feature value")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(
                f"label out of range: {int(self.labels.max())} with {self.num_classes} classes")
        present = np.bincount(self.labels, minlength=self.num_classes)
        if (present == 0).any():
            missing = int(np.flatnonzero(present == 0)[0])
            raise DatasetError(f"class {missing} has no nodes")


@dataclass(frozen=True)
class SplitSet:
    """A list of (train, val, test) index-set triples."""

    splits: tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]

    def __len__(self) -> int:
        return len(self.splits)

    def __getitem__(self, i):
        return self.splits[i]

    def validate(self, num_nodes: int) -> None:
        for i, (tr, va, te) in enumerate(self.splits):
            all_ids = np.concatenate([tr, va, te])
            if all_ids.size and (all_ids.min() < 0 or all_ids.max() >= num_nodes):
                raise DatasetError(f"split {i}: node id out of range")
            if np.unique(all_ids).size != all_ids.size:
                raise DatasetError(f"split {i}: train/val/test sets are not disjoint")
            total = all_ids.size
            for name, part, frac in (("train", tr, TRAIN_FRACTION),
                                     ("val", va, VAL_FRACTION),
                                     ("test", te, 1.0 - TRAIN_FRACTION - VAL_FRACTION)):
                if abs(part.size - frac * total) > 1.0:
                    raise DatasetError(
                        f"split {i}: {name} size {part.size} is off the "
                        f"{frac:.0%} ratio of {total} nodes by more than one node")


def make_splits(num_nodes: int, num_splits: int, seed: int) -> SplitSet:
    """Independent uniform 50/25/25 partitions, deterministic in the seed."""
    if num_nodes < 4:
        raise ValueError("need at least 4 nodes to split 50/25/25")
    rng = np.random.default_rng(seed)
    n_train = int(round(num_nodes * TRAIN_FRACTION))
    n_val = int(round(num_nodes * VAL_FRACTION))
    out = []
    for _ in range(num_splits):
        perm = rng.permutation(num_nodes)
        out.append((np.sort(perm[:n_train]),
                    np.sort(perm[n_train:n_train + n_val]),
                    np.sort(perm[n_train + n_val:])))
    splits = SplitSet(tuple(out))
    splits.validate(num_nodes)
    return splits


def _read_lines(path: Path) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DatasetError(f"{path}: file not found") from None
    return text.splitlines()


def _load_features(path: Path) -> np.ndarray:
    rows = []
    width = None
    for i, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            row = [float(tok) for tok in line.split(",")]
        except ValueError:
            _fail(path, "malformed feature row", i)
        if width is None:
            width = len(row)
        elif len(row) != width:
            _fail(path, f"feature row has {len(row)} columns, expected {width}", i)
        rows.append(row)
    if not rows:
        _fail(path, "empty feature file")
    return np.asarray(rows, dtype=np.float32)


def _load_labels(path: Path) -> tuple[np.ndarray, int]:
    vals = []
    for i, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            vals.append(int(line.strip()))
        except ValueError:
            _fail(path, "malformed label", i)
    labels = np.asarray(vals, dtype=np.int64)
    if labels.size == 0:
        _fail(path, "empty label file")
    if labels.min() < 0:
        _fail(path, f"negative label {int(labels.min())}")
    num_classes = int(np.unique(labels).size)
    if labels.max() >= num_classes:
        _fail(path, f"label out of range: {int(labels.max())} with {num_classes} classes")
    return labels, num_classes


def _load_edges(path: Path, num_nodes: int) -> Graph:
    pairs = []
    lines = []
    for i, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        toks = line.split()
        if len(toks) != 2:
            _fail(path, f"expected two node ids, got {len(toks)} fields", i)
        try:
            pairs.append((int(toks[0]), int(toks[1])))
        except ValueError:
            _fail(path, "malformed node id", i)
        lines.append(i)
    edges = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return graph_from_edges(num_nodes, edges, source=str(path),
                            lines=np.asarray(lines, dtype=np.int64))


def _load_splits(path: Path, num_nodes: int) -> SplitSet:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, list) or not raw:
        _fail(path, "expected a non-empty array of split objects")
    out = []
    for i, entry in enumerate(raw):
        try:
            out.append(tuple(np.asarray(sorted(entry[part]), dtype=np.int64)
                             for part in ("train", "val", "test")))
        except (KeyError, TypeError):
            _fail(path, f"split {i} must have train/val/test integer arrays")
    splits = SplitSet(tuple(out))
    splits.validate(num_nodes)
    return splits


def load_dataset(dir_path, *, num_splits: int = 10,
                 seed: int = 0) -> tuple[Graph, NodeTable, SplitSet]:
    """Load and validate a dataset directory.

    When ``splits.json`` is absent, ``num_splits`` random 50/25/25 splits are
    generated from ``seed``.
    """
    d = Path(dir_path)
    features = _load_features(d / "features.csv")
    labels, num_classes = _load_labels(d / "labels.csv")
    if labels.size != features.shape[0]:
        _fail(d / "labels.csv",
              f"{labels.size} labels for {features.shape[0]} feature rows")
    nodes = NodeTable(features, labels, num_classes)
    nodes.validate(features.shape[0])
    graph = _load_edges(d / "edges.tsv", features.shape[0])
    split_path = d / "splits.json"
    if split_path.exists():
        splits = _load_splits(split_path, graph.num_nodes)
    else:
        logger.info("%s: no splits.json, generating %d random splits (seed %d)",
                    d, num_splits, seed)
        splits = make_splits(graph.num_nodes, num_splits, seed)
    return graph, nodes, splits


def save_dataset(dir_path, graph: Graph, nodes: NodeTable,
                 splits: SplitSet | None = None) -> None:
    """Write a dataset directory in the textual formats read by load_dataset."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    u, v = graph.undirected_pairs()
    with open(d / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for a, b in zip(u, v):
            fh.write(f"{a} {b}\n")
    with open(d / "features.csv", "w", encoding="utf-8", newline="\n") as fh:
        for row in nodes.features:
            fh.write(",".join(f"{x:.9g}" for x in row) + "\n")
    with open(d / "labels.csv", "w", encoding="utf-8", newline="\n") as fh:
        for y in nodes.labels:
            fh.write(f"{y}\n")
    if splits is not None:
        payload = [{"train": tr.tolist(), "val": va.tolist(), "test": te.tolist()}
                   for tr, va, te in splits.splits]
        with open(d / "splits.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh)
            fh.write("\n")


def generate_synthetic(num_nodes: int, num_classes: int, avg_degree: float,
                       target_edge_homophily: float, feature_dim: int,
                       class_separation: float, seed: int) -> tuple[Graph, NodeTable]:
    """Sample a labelled graph with a controlled intra-class edge fraction.

    Labels are uniform over classes. Features are per-class Gaussians with
    mean ``class_separation`` along the class' one-hot direction and unit
    variance. Each edge is intra-class with probability
    ``target_edge_homophily`` and inter-class otherwise; duplicates are
    rejected and resampled.
    """
    if num_classes < 2 or num_nodes < num_classes:
        raise ValueError("need num_nodes >= num_classes >= 2")
    if feature_dim < num_classes:
        raise ValueError("feature_dim must be at least num_classes for one-hot class means")
    if not 0.0 <= target_edge_homophily <= 1.0:
        raise ValueError("target_edge_homophily must lie in [0, 1]")
    rng = np.random.default_rng(seed)

    labels = rng.integers(0, num_classes, size=num_nodes)
    while np.unique(labels).size < num_classes:
        labels = rng.integers(0, num_classes, size=num_nodes)
    means = np.zeros((num_classes, feature_dim))
    means[np.arange(num_classes), np.arange(num_classes)] = class_separation
    features = (rng.standard_normal((num_nodes, feature_dim))
                + means[labels]).astype(np.float32)

    members = [np.flatnonzero(labels == c) for c in range(num_classes)]
    num_edges = int(round(avg_degree * num_nodes / 2))
    budget = 100 * max(num_edges, 1)
    present: set[tuple[int, int]] = set()
    edges = np.empty((num_edges, 2), dtype=np.int64)
    attempts = 0
    for made in range(num_edges):
        # the intra/inter coin is drawn once per edge; rejected pairs are
        # resampled within the chosen branch so the coin stays unbiased
        same = rng.random() < target_edge_homophily
        while True:
            attempts += 1
            if attempts > budget:
                raise DatasetError(
                    f"infeasible edge budget: {made}/{num_edges} edges "
                    f"after {budget} attempts")
            u = int(rng.integers(num_nodes))
            if same:
                pool = members[labels[u]]
                if pool.size < 2:
                    continue
                v = int(pool[rng.integers(pool.size)])
                if v == u:
                    continue
            else:
                v = int(rng.integers(num_nodes))
                if labels[v] == labels[u]:
                    continue
            key = (u, v) if u < v else (v, u)
            if key not in present:
                break
        present.add(key)
        edges[made] = key
    graph = graph_from_edges(num_nodes, edges, source="<synthetic>")
    nodes = NodeTable(features, labels, num_classes)
    nodes.validate(num_nodes)
    return graph, nodes
