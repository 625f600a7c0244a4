"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every primitive records its inputs and a
backward closure on the output tensor, so the computation tape is rebuilt
from scratch on every training step. ``backward()`` materializes the tape
as a topological ordering of the reachable graph and walks it in reverse,
accumulating gradients into every ``requires_grad`` ancestor.

Only the primitives the training equations need are provided; there is no
general broadcasting beyond what those primitives use (bias rows, additive
attention masks, scalar weights).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    ``data`` is immutable by convention after construction; only ``grad``
    is mutated, and only inside ``backward()``.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd) -> Tensor:
    """Wrap a primitive's result, recording the tape entry when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    return out


def tape(root: Tensor) -> list["Tensor"]:
    """The recorded computation as a topologically ordered node list.

    Every entry's recorded inputs appear before it; leaves come first and
    ``root`` last. Built iteratively so deep latent chains cannot hit the
    recursion limit.
    """
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return topo


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Materializes the tape and walks it in reverse, accumulating gradients
    into every reachable ``requires_grad`` tensor.
    """
    if loss.shape != ():
        raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
    topo = tape(loss)

    # non-leaf grads are per-sweep temporaries; only leaves accumulate
    # across backward calls (re-walking a shared subgraph must not reuse
    # stale upstream gradients)
    for node in topo:
        if node._parents:
            node.grad = None

    loss._accumulate(np.ones((), dtype=np.float64))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a_d, b_d = a.data, b.data  # capture forward-time arrays (data may be swapped)
    out_data = a_d * b_d

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b_d, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a_d, b.shape))

    return _make(out_data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make(a.data * c, (a,), bwd)


def sdiv(a: Tensor, c: float) -> Tensor:
    """Divide by a scalar (kept distinct from scale: x/c != x*(1/c) bitwise)."""
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / c)

    return _make(a.data / c, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth everywhere, so finite differences agree."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def bwd(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            a._accumulate(g * (cdf + x * pdf))

    return _make(out_data, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(np.sum(a.data), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.shape).copy())

    return _make(np.mean(a.data), (a,), bwd)


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the row (second-to-last) axis; the time-axis join.

    ``concat_rows(A[T, d], v[1, d]) -> [(T+1), d]`` with the last row equal
    to ``v``, bit-exact; leading batch axes pass through.
    """
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ValueError(f"concat_rows shape mismatch: {a.shape} vs {b.shape}")
    na = a.shape[-2]

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g[..., :na, :])
        if b.requires_grad:
            b._accumulate(g[..., na:, :])

    return _make(np.concatenate([a.data, b.data], axis=-2), (a, b), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the second-to-last axis."""

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[..., start:stop, :] = g
            a._accumulate(full)

    return _make(np.ascontiguousarray(a.data[..., start:stop, :]), (a,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather: result[..., :] = table[ids[...], :].

    Realizes token embedding (and any other row-indexed gather, such as
    position lookups). Gradient scatter-adds into the table rows.
    """
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )

    def bwd(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table._accumulate(acc)

    return _make(table.data[ids], (table,), bwd)


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch axes.

    Supported: ``(..., m, k) @ (..., k, n)`` where the leading axes either
    match or are absent on one side (shared weight). Batch axes stay batch
    axes (no flattening into BLAS rows), which keeps every sample's slice
    an independent, identically-shaped GEMM call: permuting the batch then
    never changes per-sample bits.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    a_d, b_d = a.data, b.data
    out_data = np.matmul(a_d, b_d)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b_d, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b_d.ndim == 2 and a_d.ndim > 2:
                # shared weight: flatten the reduction (order is fixed by
                # the single call, so the result is deterministic)
                k = a_d.shape[-1]
                gb = a_d.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a_d, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bwd)


def matvec(w: Tensor, v: Tensor) -> Tensor:
    """``W[m, k] @ v[k] -> [m]`` composed from matmul/reshape primitives."""
    k = v.shape[-1]
    return reshape(matmul(w, reshape(v, (k, 1))), (w.shape[0],))


# ---------------------------------------------------------------------------
# normalizations and probability primitives


def softmax(x: Tensor) -> Tensor:
    """Stabilized softmax over the last axis.

    Max-subtraction is mandatory. The denominator is a sequential (cumsum)
    reduction: positions masked to -inf contribute exact zeros wherever
    they sit, so a row's value is bit-independent of how much masked tail
    follows it. That property is what makes causal attention rows stable
    under suffix growth.
    """
    m = np.max(x.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # all -inf row guard
    e = np.exp(x.data - m)
    denom = np.cumsum(e, axis=-1)[..., -1:]
    y = e / denom

    def bwd(g):
        if x.requires_grad:
            inner = np.sum(g * y, axis=-1, keepdims=True)
            x._accumulate(y * (g - inner))

    return _make(y, (x,), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis: y = x / rms(x) * gain."""
    n = x.shape[-1]
    x_d, g_d = x.data, gain.data
    r = 1.0 / np.sqrt(np.mean(x_d * x_d, axis=-1, keepdims=True) + eps)
    y = x_d * r * g_d

    def bwd(g):
        if x.requires_grad:
            inner = np.sum(g * g_d * x_d, axis=-1, keepdims=True)
            x._accumulate(g * g_d * r - x_d * (r**3) * inner / n)
        if gain.requires_grad:
            gg = g * x_d * r
            gain._accumulate(gg.reshape(-1, n).sum(axis=0))

    return _make(y, (x, gain), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Standard layer normalization over the last axis."""
    n = x.shape[-1]
    g_d = gain.data
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * g_d + bias.data

    def bwd(g):
        if x.requires_grad:
            dxhat = g * g_d
            s1 = np.sum(dxhat, axis=-1, keepdims=True)
            s2 = np.sum(dxhat * xhat, axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - s1 / n - xhat * s2 / n))
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))

    return _make(y, (x, gain, bias), bwd)


class EmptyMaskError(ValueError):
    """Raised when a masked loss has no supervised positions at all."""


def cross_entropy_masked(logits: Tensor, targets, mask, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood over unmasked positions (mean or sum).

    ``logits`` has shape [..., V]; ``targets`` and ``mask`` have the
    leading shape. Masked positions contribute exactly zero to the value
    and to the gradient, whatever their logits hold; an all-masked call is
    an error (distinct from a zero loss).
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ValueError(
            f"cross_entropy shape mismatch: logits {logits.shape}, "
            f"targets {targets.shape}, mask {mask.shape}"
        )
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise EmptyMaskError("cross_entropy_masked: every position is masked")
    V = logits.shape[-1]
    safe_targets = np.where(mask, targets, 0)
    if safe_targets.min() < 0 or safe_targets.max() >= V:
        raise IndexError("target id outside [0, vocab)")
    denom = n_valid if reduction == "mean" else 1

    m = np.max(logits.data, axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.sum(np.exp(z), axis=-1)) + m[..., 0]
    picked = np.take_along_axis(logits.data, safe_targets[..., None], axis=-1)[..., 0]
    nll = np.where(mask, lse - picked, 0.0)
    out_data = np.array(nll.sum() / denom)

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True)))
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, safe_targets[..., None], 1.0, axis=-1)
            grad = (p - onehot) * mask[..., None] * (float(g) / denom)
            logits._accumulate(grad)

    return _make(out_data, (logits,), bwd)
