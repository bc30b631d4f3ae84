"""Small float64 tensor engine with reverse-mode differentiation.

Only the operations a BERT-style encoder and its distillation losses need are
provided. Every op checks its inputs for zero-size dimensions and its output
for non-finite values, so numerical blow-ups surface where they happen rather
than several layers later.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "NumericsError",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "add_constant",
    "matmul",
    "transpose",
    "reshape",
    "sum_all",
    "mean_all",
    "sum_axis",
    "mean_axis",
    "softmax",
    "log_softmax",
    "layernorm",
    "gelu",
    "embedding",
    "gather_rows",
    "head_split",
    "repeat_axis",
    "cross_entropy",
    "mse",
    "kl_divergence",
    "backward",
    "topological_order",
]


class NumericsError(Exception):
    """Base class for engine errors."""


class ShapeError(NumericsError, ValueError):
    """Operand shapes are incompatible or degenerate."""


class NonFiniteError(NumericsError, FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``_parents`` and ``_backward`` record how the tensor was produced; the
    collection of those records reachable from a loss is the tape walked by
    :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError(f"zero-size tensor of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; the free functions are the real API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        bad = int(arr.size - np.isfinite(arr).sum())
        raise NonFiniteError(f"{op}: produced {bad} non-finite value(s) (NaN/Inf)")


def _check_inputs(op: str, *ts: Tensor) -> None:
    for t in ts:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op}: expected Tensor, got {type(t).__name__}")
        if t.data.size == 0:
            raise ShapeError(f"{op}: zero-size operand {t.shape}")


def _make(out: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(out, op)
    res = Tensor.__new__(Tensor)
    res.data = out
    res.grad = None
    res.requires_grad = any(p.requires_grad for p in parents)
    res._op = op
    if res.requires_grad:
        res._parents = parents
        res._backward = backward_fn
    else:
        res._parents = ()
        res._backward = None
    return res


def _trailing_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """True when ``b`` is a row-wise operand of ``a`` (bias-add style)."""
    if a.shape == b.shape:
        return False
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal or bias-compatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("add", a, b)
    _trailing_broadcast("add", a, b)
    bshape = b.shape
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, bshape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("sub", a, b)
    _trailing_broadcast("sub", a, b)
    bshape = b.shape
    return _make(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, bshape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("mul", a, b)
    _trailing_broadcast("mul", a, b)
    ad, bd, bshape = a.data, b.data, b.shape
    return _make(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, bshape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    _check_inputs("scale", a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_constant(a: Tensor, const: np.ndarray) -> Tensor:
    """``a + const`` where ``const`` is a non-differentiable array.

    Numpy broadcasting is allowed here; it is used for attention padding biases.
    """
    _check_inputs("add_constant", a)
    out = a.data + const
    if out.shape != a.shape:
        raise ShapeError(f"add_constant: constant {np.shape(const)} would change shape {a.shape}")
    return _make(out, (a,), lambda g: (g,), "add_constant")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    _check_inputs("gelu", x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` is either a plain matrix shared
    across the batch or has the same leading axes as ``a``.
    """
    _check_inputs("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2

    def _bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), _bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    _check_inputs("transpose", a)
    if a.ndim < 2:
        raise ShapeError("transpose: need at least 2 axes")
    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    _check_inputs("reshape", a)
    old = a.shape
    out = a.data.reshape(tuple(shape))
    if out.size == 0:
        raise ShapeError(f"reshape: zero-size target {tuple(shape)}")
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def sum_all(a: Tensor) -> Tensor:
    _check_inputs("sum_all", a)
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_all")


def mean_all(a: Tensor) -> Tensor:
    _check_inputs("mean_all", a)
    shape, n = a.shape, a.data.size
    return _make(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean_all")


def sum_axis(a: Tensor, axis: int) -> Tensor:
    _check_inputs("sum_axis", a)
    axis = axis % a.ndim
    shape = a.shape
    return _make(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
        "sum_axis",
    )


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    return scale(sum_axis(a, axis), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_inputs("softmax", x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), _bw, "softmax")


def _log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_inputs("log_softmax", x)
    out = _log_softmax_np(x.data, axis)
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layernorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-12,
    live: np.ndarray | None = None,
) -> Tensor:
    """Layer normalization over the last axis.

    ``live`` is an optional 0/1 vector over the normalized axis. Statistics
    are taken over live entries only and dead entries normalize to zero, so a
    zero-masked layer behaves exactly like one with those entries deleted.
    """
    _check_inputs("layernorm", x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma/beta must be ({d},), got {gamma.shape}, {beta.shape}")
    m = np.ones(d) if live is None else np.asarray(live, dtype=np.float64)
    n = m.sum()
    if n <= 0:
        raise ShapeError("layernorm: no live entries")
    xd = x.data
    mu = (xd * m).sum(axis=-1, keepdims=True) / n
    xc = (xd - mu) * m
    var = (xc * xc).sum(axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def _bw(g):
        gx_hat = g * gd * m
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx * m, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), _bw, "layernorm")


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    _check_inputs("embedding", table)
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ShapeError("embedding: empty id array")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding: ids must be integers")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    shape = table.shape

    def _bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), _bw, "embedding")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor."""
    _check_inputs("gather_rows", a)
    if a.ndim != 2:
        raise ShapeError("gather_rows: expected a 2-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("gather_rows: empty index")
    shape = a.shape

    def _bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), _bw, "gather_rows")


def head_split(x: Tensor, assignment: np.ndarray, num_heads: int) -> Tensor:
    """Spread ``[..., S, D]`` into ``[..., H, S, D]`` keeping only each head's columns.

    ``assignment[j]`` names the head owning column ``j``. Columns of other
    heads are zero in each slice, so summing over the head axis recovers
    ``x``. Heads may own unequal (or zero) numbers of columns.
    """
    _check_inputs("head_split", x)
    assignment = np.asarray(assignment).astype(np.int64)
    if assignment.shape != (x.shape[-1],):
        raise ShapeError(f"head_split: assignment {assignment.shape} vs width {x.shape[-1]}")
    sel = (assignment[None, :] == np.arange(num_heads)[:, None]).astype(np.float64)  # H x D
    sel = sel[:, None, :]  # H x 1 x D
    xd = np.expand_dims(x.data, -3)  # ... x 1 x S x D
    return _make(xd * sel, (x,), lambda g: ((g * sel).sum(axis=-3),), "head_split")


def repeat_axis(a: Tensor, axis: int, n: int) -> Tensor:
    """Tile a size-1 ``axis`` of ``a`` to size ``n``."""
    _check_inputs("repeat_axis", a)
    axis = axis % a.ndim
    if a.shape[axis] != 1:
        raise ShapeError(f"repeat_axis: axis {axis} has size {a.shape[axis]}, expected 1")
    shape = a.shape[:axis] + (n,) + a.shape[axis + 1:]
    data = np.broadcast_to(a.data, shape).copy()
    return _make(data, (a,), lambda g: (g.sum(axis=axis, keepdims=True),), "repeat_axis")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of 2-D ``logits`` rows against integer ``targets``."""
    _check_inputs("cross_entropy", logits)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy: logits must be 2-D")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but targets {targets.shape}")
    logp = _log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def _bw(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (float(g) / n),)

    return _make(np.array(loss), (logits,), _bw, "cross_entropy")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of ``(a - b)**2``."""
    _check_inputs("mse", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def _bw(g):
        d = diff * (2.0 * float(g) / n)
        return d, -d

    return _make(np.array((diff * diff).mean()), (a, b), _bw, "mse")


def kl_divergence(p_logits: Tensor, q_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-mean ``KL(softmax(p/T) || softmax(q/T))`` scaled by ``T**2``.

    Both arguments are 2-D logits; the first one weights the log-ratio.
    """
    _check_inputs("kl_divergence", p_logits, q_logits)
    if p_logits.shape != q_logits.shape or p_logits.ndim != 2:
        raise ShapeError(f"kl_divergence: need equal 2-D shapes, got {p_logits.shape}, {q_logits.shape}")
    if temperature <= 0:
        raise ValueError("kl_divergence: temperature must be positive")
    t = float(temperature)
    logp = _log_softmax_np(p_logits.data / t)
    logq = _log_softmax_np(q_logits.data / t)
    p, q = np.exp(logp), np.exp(logq)
    a = logp - logq
    rows_kl = (p * a).sum(axis=-1)
    n = p.shape[0]
    value = rows_kl.mean() * t * t

    def _bw(g):
        c = float(g) * t / n  # t*t from the scaling, 1/t from the logits
        gp = p * (a - rows_kl[:, None]) * c
        gq = (q - p) * c
        return gp, gq

    # exact zero for identical inputs; clipping guards -1e-17 round-off
    return _make(np.array(max(value, 0.0)), (p_logits, q_logits), _bw, "kl_divergence")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate across calls until :meth:`Tensor.zero_grad`.
    """
    if root.data.size != 1 or root.ndim != 0:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise NumericsError("backward: root does not depend on any trainable tensor")
    order = topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
