"""Edge-level label statistics: edge homophily, adjusted homophily, and
label informativeness.

Edge homophily is the fraction of edges whose endpoints share a label.
Adjusted homophily corrects that fraction for class-size and degree
imbalance and can be negative. Label informativeness is the mutual
information between the endpoint labels of a uniformly sampled edge,
normalised by the entropy of one endpoint; it is computed exactly by
enumerating all ordered endpoint pairs rather than by sampling.

All computation is in float64. Cases where a metric is undefined (a single
effective class) return ``None`` so reports can render an explicit marker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph

UNDEFINED_EPS = 1e-12


@dataclass(frozen=True)
class HomophilyReport:
    num_edges: int
    edge_homophily: float
    adjusted_homophily: float | None
    label_informativeness: float | None
    class_degree_mass: np.ndarray


def _pair_stats(receivers: np.ndarray, senders: np.ndarray, labels: np.ndarray):
    """Shared core over a multiset of ordered endpoint pairs.

    Returns (h_edge, h_adj, li, degree_mass). The pair multiset must be
    symmetric (both orientations of every edge present) so that the two
    endpoint marginals coincide.
    """
    if receivers.size == 0:
        raise ValueError("empty edge set")
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1
    total = float(receivers.size)

    ya = labels[receivers]
    yb = labels[senders]
    joint = np.bincount(ya * num_classes + yb,
                        minlength=num_classes * num_classes).astype(np.float64)
    joint = joint.reshape(num_classes, num_classes) / total
    degree_mass = np.bincount(ya, minlength=num_classes).astype(np.float64)

    h_edge = float(np.count_nonzero(ya == yb)) / total

    mass_frac = degree_mass / total
    sum_sq = float(np.sum(mass_frac * mass_frac))
    denom = 1.0 - sum_sq
    h_adj = None if denom < UNDEFINED_EPS else (h_edge - sum_sq) / denom

    marginal = joint.sum(axis=1)
    pos = marginal > 0.0
    entropy = float(-np.sum(marginal[pos] * np.log(marginal[pos])))
    if entropy < UNDEFINED_EPS:
        li = None
    else:
        outer = np.outer(marginal, marginal)
        nz = joint > 0.0
        mutual = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
        li = mutual / entropy
    return h_edge, h_adj, li, degree_mass


def edge_homophily(g: Graph, labels: np.ndarray) -> float:
    """Fraction of undirected edges whose endpoints share a label."""
    r, s = g.directed_pairs()
    return _pair_stats(r, s, labels)[0]


def adjusted_homophily(g: Graph, labels: np.ndarray) -> float | None:
    """Edge homophily corrected for degree-weighted class imbalance.

    ``(h_edge - sum_k (D_k / 2|E|)^2) / (1 - sum_k (D_k / 2|E|)^2)`` where
    ``D_k`` is the sum of degrees over class-k nodes. ``None`` when the
    denominator vanishes (one effective class).
    """
    r, s = g.directed_pairs()
    return _pair_stats(r, s, labels)[1]


def label_informativeness(g: Graph, labels: np.ndarray) -> float | None:
    """Normalised mutual information between endpoint labels of a random edge.

    Exact enumeration over all ordered endpoint pairs; natural logarithms
    (the ratio is base-invariant). ``None`` when the endpoint-label entropy
    vanishes.
    """
    r, s = g.directed_pairs()
    return _pair_stats(r, s, labels)[2]


def report(g: Graph, labels: np.ndarray) -> HomophilyReport:
    """All three metrics plus edge count and per-class degree mass."""
    r, s = g.directed_pairs()
    h_edge, h_adj, li, mass = _pair_stats(r, s, labels)
    return HomophilyReport(g.num_undirected_edges, h_edge, h_adj, li, mass)


def directed_report(receivers: np.ndarray, senders: np.ndarray,
                    labels: np.ndarray) -> HomophilyReport:
    """Metrics for a directed edge set (e.g. a rewired neighbour graph).

    Edge homophily is the fraction of directed edges with matching endpoint
    labels. For the adjusted and informativeness metrics each directed edge
    contributes both ordered endpoint pairs, which keeps the two endpoint
    marginals identical as in the undirected case.
    """
    receivers = np.asarray(receivers, dtype=np.int64)
    senders = np.asarray(senders, dtype=np.int64)
    if receivers.size == 0:
        raise ValueError("empty edge set")
    labels = np.asarray(labels, dtype=np.int64)
    h_edge = float(np.mean(labels[receivers] == labels[senders]))
    r2 = np.concatenate([receivers, senders])
    s2 = np.concatenate([senders, receivers])
    _, h_adj, li, mass = _pair_stats(r2, s2, labels)
    return HomophilyReport(int(receivers.size), h_edge, h_adj, li, mass)


def format_report(name: str, rep: HomophilyReport) -> str:
    """Aligned plain-text rendering; undefined metrics render as a dash."""
    def fmt(x):
        return "—" if x is None else f"{x:.4f}"

    lines = [
        f"graph                 {name}",
        f"edges                 {rep.num_edges}",
        f"edge homophily        {fmt(rep.edge_homophily)}",
        f"adjusted homophily    {fmt(rep.adjusted_homophily)}",
        f"label informativeness {fmt(rep.label_informativeness)}",
        "class degree mass     " + " ".join(f"{m:.0f}" for m in rep.class_degree_mass),
    ]
    return "\n".join(lines)
