"""Dense 2-D tensors with reverse-mode gradients, sparse propagation, Adam.

Every tensor is a rank-2 float array (scalars are 1x1). Forward values are
float32 by default; float64 arrays are carried through unchanged so that
numerical oracles can re-run identical computations at higher precision.

A :class:`Tape` records primitive applications in execution order while it
is the active context. ``backward(loss)`` replays the records in reverse,
visiting each exactly once, and accumulates gradients into the ``grad``
field of every reachable tensor that requires one. Without an active tape
all primitives are plain numpy computations.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_TAPE_STACK: list["Tape"] = []


class GradientError(RuntimeError):
    """Misuse of the tape: double backward, missing tape, non-scalar loss."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "_tape")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 2:
            raise ValueError(f"tensors are rank-2; got shape {arr.shape}")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError("item() requires a scalar tensor")
        return float(self.values.reshape(()))

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype}{tag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)


class Tape:
    """Execution-ordered record of primitive applications."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every tracked tensor reachable from ``loss``."""
        if self._consumed:
            raise GradientError("backward already called on this tape")
        if loss.values.size != 1:
            raise GradientError("backward requires a scalar loss")
        self._consumed = True
        loss.grad = np.ones_like(loss.values)
        for out, inputs, bw in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            for inp, gi in zip(inputs, bw(g)):
                if gi is None or not inp.tracked:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise GradientError("loss was not recorded on a tape")
    loss._tape.backward(loss)


def _record(out: Tensor, inputs: tuple[Tensor, ...], bw) -> Tensor:
    if _TAPE_STACK and any(t.tracked for t in inputs):
        tape = _TAPE_STACK[-1]
        out._tape = tape
        tape._records.append((out, inputs, bw))
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values)
    av, bv = a.values, b.values

    def bw(g):
        return g @ bv.T, av.T @ g

    return _record(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a (1, d) row broadcast over rows of ``a``."""
    if a.shape != b.shape and not (b.shape == (1, a.shape[1])):
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = Tensor(a.values + b.values)
    b_is_row = b.shape != a.shape

    def bw(g):
        gb = g.sum(axis=0, keepdims=True) if b_is_row else g
        return g, gb

    return _record(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.values * a.values.dtype.type(c))

    def bw(g):
        return (g * a.values.dtype.type(c),)

    return _record(out, (a,), bw)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-CDF GELU, ``x * Phi(x)`` (exact, not the tanh approximation)."""
    xv = x.values
    cdf = ndtr(xv)
    out = Tensor(xv * cdf)

    def bw(g):
        pdf = np.exp(-0.5 * xv * xv) * xv.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + xv * pdf),)

    return _record(out, (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xv = x.values
    out = Tensor(np.where(xv > 0, xv, xv * xv.dtype.type(slope)))

    def bw(g):
        return (g * np.where(xv > 0, xv.dtype.type(1), xv.dtype.type(slope)),)

    return _record(out, (x,), bw)


def row_softmax(x: Tensor) -> Tensor:
    xv = x.values
    shifted = xv - xv.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bw)


def masked_row_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax restricted to ``mask``; fully-masked rows yield zeros."""
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} does not match {x.shape}")
    xv = x.values
    neg = np.where(mask, xv, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(neg - m)
    s = e.sum(axis=1, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    out = Tensor(y.astype(xv.dtype, copy=False))
    yv = out.values

    def bw(g):
        dot = (g * yv).sum(axis=1, keepdims=True)
        return (yv * (g - dot),)

    return _record(out, (x,), bw)


def attention_scores(s: Tensor, t: Tensor) -> Tensor:
    """Outer sum of two column vectors: ``out[i, j] = s[i] + t[j]``."""
    if s.shape[1] != 1 or t.shape[1] != 1:
        raise ValueError("attention_scores expects column vectors")
    out = Tensor(s.values + t.values.T)

    def bw(g):
        return g.sum(axis=1, keepdims=True), g.sum(axis=0)[:, None]

    return _record(out, (s, t), bw)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if len({p.shape[0] for p in parts}) != 1:
        raise ValueError("concat_cols requires equal row counts")
    out = Tensor(np.concatenate([p.values for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), bw)


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray([[x.values.mean()]], dtype=x.values.dtype))
    size = x.values.size

    def bw(g):
        return (np.full_like(x.values, g.reshape(())) / size,)

    return _record(out, (x,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator,
            train: bool = True) -> Tensor:
    """Inverted-scaling dropout; identity when ``p == 0`` or not training."""
    if not train or p <= 0.0:
        return x
    if p >= 1.0:
        out = Tensor(np.zeros_like(x.values))
        return _record(out, (x,), lambda g: (np.zeros_like(g),))
    keep = (rng.random(x.shape) >= p)
    factor = (keep / (1.0 - p)).astype(x.values.dtype)
    out = Tensor(x.values * factor)

    def bw(g):
        return (g * factor,)

    return _record(out, (x,), bw)


def cosine_rowwise(a: Tensor, b: Tensor) -> Tensor:
    """Per-row cosine similarity as an (n, 1) tensor; zero-norm rows give 0."""
    if a.shape != b.shape:
        raise ValueError(f"cosine_rowwise shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    na = np.linalg.norm(av, axis=1, keepdims=True)
    nb = np.linalg.norm(bv, axis=1, keepdims=True)
    denom = na * nb
    ok = denom > 1e-12
    dot = (av * bv).sum(axis=1, keepdims=True)
    cos = np.divide(dot, denom, out=np.zeros_like(dot), where=ok)
    out = Tensor(cos.astype(av.dtype, copy=False))

    def bw(g):
        ga = np.zeros_like(av)
        gb = np.zeros_like(bv)
        w = np.where(ok, g, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            ga_full = bv / denom - cos * av / (na * na)
            gb_full = av / denom - cos * bv / (nb * nb)
        np.copyto(ga, w * ga_full, where=ok)
        np.copyto(gb, w * gb_full, where=ok)
        return ga.astype(av.dtype, copy=False), gb.astype(bv.dtype, copy=False)

    return _record(out, (a, b), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over the ``mask`` rows."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("cross_entropy over an empty mask")
    labels = np.asarray(labels, dtype=np.int64)
    sub = logits.values[mask]
    y = labels[mask]
    m = sub.max(axis=1, keepdims=True)
    shifted = sub - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(mask.size), y].mean()
    out = Tensor(np.asarray([[loss]], dtype=logits.values.dtype))

    def bw(g):
        soft = np.exp(logp)
        soft[np.arange(mask.size), y] -= 1.0
        grad = np.zeros_like(logits.values)
        grad[mask] = soft * (g.reshape(()) / mask.size)
        return (grad,)

    return _record(out, (logits,), bw)


# ---------------------------------------------------------------------------
# sparse propagation


def _segment_sum(values: np.ndarray, offsets: np.ndarray, num_rows: int) -> np.ndarray:
    """Sum contiguous row-major segments; empty segments yield zero rows."""
    out = np.zeros((num_rows, values.shape[1]), dtype=values.dtype)
    if values.shape[0] == 0:
        return out
    nonempty = np.flatnonzero(np.diff(offsets) > 0)
    if nonempty.size:
        out[nonempty] = np.add.reduceat(values, offsets[nonempty], axis=0)
    return out


class Propagator:
    """Directed edge structure prepared for aggregation in both directions.

    Edge ``(dst[i], src[i])`` carries a message from ``src[i]`` into the
    aggregate at ``dst[i]``. Permutations and offsets for receiver- and
    sender-major orderings are precomputed once.
    """

    __slots__ = ("num_nodes", "num_edges", "fwd_perm", "fwd_src", "fwd_offsets",
                 "bwd_perm", "bwd_dst", "bwd_offsets")

    def __init__(self, num_nodes: int, dst: np.ndarray, src: np.ndarray):
        dst = np.asarray(dst, dtype=np.int64)
        src = np.asarray(src, dtype=np.int64)
        if dst.shape != src.shape or dst.ndim != 1:
            raise ValueError("dst and src must be 1-D arrays of equal length")
        self.num_nodes = num_nodes
        self.num_edges = dst.size
        self.fwd_perm = np.argsort(dst, kind="stable")
        self.fwd_src = src[self.fwd_perm]
        counts = np.bincount(dst, minlength=num_nodes)
        self.fwd_offsets = np.concatenate([[0], np.cumsum(counts)])
        self.bwd_perm = np.argsort(src, kind="stable")
        self.bwd_dst = dst[self.bwd_perm]
        counts = np.bincount(src, minlength=num_nodes)
        self.bwd_offsets = np.concatenate([[0], np.cumsum(counts)])


def spmm(prop: Propagator, coeffs: np.ndarray, x: Tensor) -> Tensor:
    """Per-node weighted neighbour sum: ``out[u] = sum_v c(u,v) x[v]``.

    ``coeffs`` aligns with the propagator's edge order and is treated as a
    constant; the gradient flows to ``x`` only. Nodes with no incoming
    messages get a zero row.
    """
    if x.shape[0] != prop.num_nodes:
        raise ValueError(f"spmm: x has {x.shape[0]} rows for {prop.num_nodes} nodes")
    coeffs = np.asarray(coeffs)
    if coeffs.shape != (prop.num_edges,):
        raise ValueError("spmm: one coefficient per edge required")
    cf = coeffs[prop.fwd_perm].astype(x.values.dtype, copy=False)
    msgs = cf[:, None] * x.values[prop.fwd_src]
    out = Tensor(_segment_sum(msgs, prop.fwd_offsets, prop.num_nodes))
    cb = coeffs[prop.bwd_perm]

    def bw(g):
        back = cb[:, None].astype(g.dtype) * g[prop.bwd_dst]
        return (_segment_sum(back, prop.bwd_offsets, prop.num_nodes),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# optimisation


def glorot(rng: np.random.Generator, shape: tuple[int, int],
           dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    __slots__ = ("step", "m", "v")

    def __init__(self, params: dict[str, Tensor]):
        self.step = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float = 3e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update from each parameter's accumulated ``grad``."""
    b1, b2 = betas
    state.step += 1
    step_size = lr * math.sqrt(1.0 - b2 ** state.step) / (1.0 - b1 ** state.step)
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise GradientError(f"parameter {name!r} has no gradient")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.values = p.values - step_size * m / (np.sqrt(v) + eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
