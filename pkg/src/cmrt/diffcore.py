"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside an active :class:`Graph` are recorded in
execution order.  Outside a graph, ops simply compute values, which keeps
decoding and evaluation cheap.

    >>> w = Tensor(np.ones((3, 2)), requires_grad=True)
    >>> with Graph() as g:
    ...     loss = sum_all(matmul(Tensor(np.ones((1, 3))), w))
    >>> backward(g, loss)
    >>> w.grad.tolist()
    [[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "GradCheckReport",
    "backward",
    "grad_check",
    "forward",
    "no_grad_value",
    "matmul",
    "add",
    "mul",
    "scale",
    "concat",
    "slice_",
    "reshape",
    "transpose",
    "mean",
    "sum_all",
    "softmax",
    "log_softmax",
    "cosine_similarity",
    "cosine_matrix",
    "layer_norm",
    "gelu",
    "embedding",
    "cross_entropy",
    "kl_from_log_probs",
    "OPS",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to the op."""

    def __init__(self, op: str, *dims):
        self.op = op
        self.dims = dims
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(d)) for d in dims)}")


class NonFiniteError(FloatingPointError):
    """An op produced (or was handed) NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite values")


class Tensor:
    """A float64 array plus an optional accumulated gradient."""

    __slots__ = ("values", "requires_grad", "grad", "name", "_node", "_graph")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: int | None = None
        self._graph: Graph | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.values = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._node = None
        t._graph = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def detach(self) -> "Tensor":
        """Same values, cut from any graph; gradients stop here."""
        return Tensor._wrap(self.values, False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    fn: Callable[..., np.ndarray]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active() -> "Graph | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Graph:
    """Ordered record of the ops run while this graph is active.

    Nodes are appended as ops execute, so the list is a topological order by
    construction.  A graph belongs to the thread that entered it.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)

    def leaves(self) -> list[Tensor]:
        """Distinct requires_grad inputs that were not produced by this graph."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._graph is not self and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def replay(self, overrides: dict[int, np.ndarray], upto: int | None = None) -> np.ndarray:
        """Recompute node values with some leaf values replaced.

        ``overrides`` maps ``id(leaf)`` to a replacement array.  Returns the
        value of node ``upto`` (default: last node).
        """
        upto = len(self.nodes) - 1 if upto is None else upto
        vals: dict[int, np.ndarray] = {}
        for i, node in enumerate(self.nodes[: upto + 1]):
            args = []
            for t in node.inputs:
                if t._graph is self and t._node is not None:
                    args.append(vals[t._node])
                else:
                    args.append(overrides.get(id(t), t.values))
            vals[i] = node.fn(*args)
        return vals[upto]


def _all_finite(a: np.ndarray) -> bool:
    # A sum is NaN/Inf whenever an entry is; only on overflow do we pay for the full scan.
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(a.sum()):
            return True
    return bool(np.isfinite(a).all())


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, fn, vjp) -> Tensor:
    if not _all_finite(out):
        raise NonFiniteError(op)
    graph = _active()
    req = graph is not None and any(t.requires_grad for t in inputs)
    res = Tensor._wrap(out, req)
    if req:
        res._node = len(graph.nodes)
        res._graph = graph
        graph.nodes.append(_Node(op, inputs, res, fn, vjp))
    return res


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def no_grad_value(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops


def _matmul(x, y):
    if y.ndim == 2 and x.ndim > 2:
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(*x.shape[:-1], y.shape[1])
    return x @ y


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, equal-batch stacks, or a stack times a matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values
    flat = b.ndim == 2 and av.ndim > 2

    def vjp(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bv.T).reshape(av.shape)
            if b.requires_grad:
                gb = av.reshape(-1, av.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = g @ np.swapaxes(bv, -1, -2)
        if b.requires_grad:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), _matmul(av, bv), _matmul, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast into ``a`` (bias rows, masks)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    if shape != a.shape:
        raise ShapeError("add", a.shape, b.shape)
    sb = b.shape

    def vjp(g):
        return g, _unbroadcast(g, sb) if b.requires_grad else None

    return _record("add", (a, b), a.values + b.values, np.add, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may broadcast into ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    if shape != a.shape:
        raise ShapeError("mul", a.shape, b.shape)
    av, bv = a.values, b.values

    def vjp(g):
        ga = g * bv if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), av * bv, np.multiply, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.values * c, lambda x: x * c, lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat")
    nd = tensors[0].ndim
    ax = axis % nd if nd else 0
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *(u.shape for u in tensors))
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def fn(*vals):
        return np.concatenate(vals, axis=ax)

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", tensors, fn(*(t.values for t in tensors)), fn, vjp)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (view) indexing: ints, slices with steps, Ellipsis."""
    a = _as_tensor(a)
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not (isinstance(ix, (int, slice, np.integer)) or ix is Ellipsis):
            raise TypeError("slice_: only basic indexing is supported")
    try:
        out = a.values[index]
    except IndexError:
        raise ShapeError("slice", a.shape) from None
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record("slice", (a,), np.array(out), lambda x: np.array(x[index]), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _record("reshape", (a,), out, lambda x: x.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.values.transpose(axes), lambda x: x.transpose(axes),
                   lambda g: (g.transpose(inv),))


def mean(a: Tensor, axis: int) -> Tensor:
    """Mean-pool over one axis."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim or a.shape[axis] == 0:
        raise ShapeError("mean", a.shape)
    n = a.shape[axis]
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _record("mean", (a,), a.values.mean(axis=axis), lambda x: x.mean(axis=axis), vjp)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.values.sum()), lambda x: np.asarray(x.sum()),
                   lambda g: (np.full(shape, float(g)),))


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax", a.shape)
    p = _softmax(a.values)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), p, _softmax, vjp)


def log_softmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("log_softmax", a.shape)
    out = _log_softmax(a.values)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (a,), out, _log_softmax, vjp)


def _cos(x, y):
    return (x * y).sum(-1) / (np.linalg.norm(x, axis=-1) * np.linalg.norm(y, axis=-1))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine along the last axis of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim == 0:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    av, bv = a.values, b.values
    na = np.linalg.norm(av, axis=-1, keepdims=True)
    nb = np.linalg.norm(bv, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        an, bn = av / na, bv / nb
    out = (an * bn).sum(-1)

    def vjp(g):
        g = g[..., None]
        c = out[..., None]
        ga = g * (bn - c * an) / na if a.requires_grad else None
        gb = g * (an - c * bn) / nb if b.requires_grad else None
        return ga, gb

    return _record("cosine_similarity", (a, b), out, _cos, vjp)


def _cosmat(x, y):
    xn = x / np.linalg.norm(x, axis=-1, keepdims=True)
    yn = y / np.linalg.norm(y, axis=-1, keepdims=True)
    return xn @ yn.T


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine between rows of ``a`` (n x d) and rows of ``b`` (m x d)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_matrix", a.shape, b.shape)
    na = np.linalg.norm(a.values, axis=-1, keepdims=True)
    nb = np.linalg.norm(b.values, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        an, bn = a.values / na, b.values / nb
    out = an @ bn.T

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            gan = g @ bn
            ga = (gan - an * (gan * an).sum(-1, keepdims=True)) / na
        if b.requires_grad:
            gbn = g.T @ an
            gb = (gbn - bn * (gbn * bn).sum(-1, keepdims=True)) / nb
        return ga, gb

    return _record("cosine_matrix", (a, b), out, _cosmat, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    xv = x.values
    mu = xv.mean(-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.values

    def fn(xx, gg, bb):
        c = xx - xx.mean(-1, keepdims=True)
        return c / np.sqrt((c * c).mean(-1, keepdims=True) + eps) * gg + bb

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gv
            gx = inv * (gh - gh.mean(-1, keepdims=True) - xhat * (gh * xhat).mean(-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(0) if gain.requires_grad else None
        gb = g.reshape(-1, d).sum(0) if bias.requires_grad else None
        return gx, gg, gb

    return _record("layer_norm", (x, gain, bias), xhat * gv + bias.values, fn, vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.values
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _record("gelu", (a,), 0.5 * x * (1.0 + t), _gelu, vjp)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _record("embedding", (table,), table.values[ids], lambda t: t[ids], vjp)


def _mask_or_ones(mask, shape):
    if mask is None:
        return np.ones(shape)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != shape:
        raise ShapeError("mask", m.shape, shape)
    return m


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over unmasked positions.

    ``logits`` is (..., V); ``targets`` and ``mask`` have the leading shape.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    m = _mask_or_ones(mask, targets.shape)
    n = m.sum()
    if n <= 0:
        raise ShapeError("cross_entropy", targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise IndexError("cross_entropy: target id out of range")

    def fn(z):
        lp = _log_softmax(z)
        nll = -np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
        return np.asarray((nll * m).sum() / n)

    lp = _log_softmax(logits.values)
    nll = -np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray((nll * m).sum() / n)

    def vjp(g):
        p = np.exp(lp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (m / n * float(g))[..., None],)

    return _record("cross_entropy", (logits,), out, fn, vjp)


def kl_from_log_probs(logp: Tensor, logq: Tensor, mask=None) -> Tensor:
    """Mean over unmasked positions of KL(P || Q), inputs are log-distributions on the last axis."""
    logp, logq = _as_tensor(logp), _as_tensor(logq)
    if logp.shape != logq.shape or logp.ndim == 0:
        raise ShapeError("kl_from_log_probs", logp.shape, logq.shape)
    m = _mask_or_ones(mask, logp.shape[:-1])
    n = m.sum()
    if n <= 0:
        raise ShapeError("kl_from_log_probs", logp.shape)
    pv, qv = logp.values, logq.values
    p = np.exp(pv)
    diff = pv - qv

    def fn(a, b):
        return np.asarray(((np.exp(a) * (a - b)).sum(-1) * m).sum() / n)

    def vjp(g):
        w = (m / n * float(g))[..., None]
        gp = w * p * (diff + 1.0) if logp.requires_grad else None
        gq = -w * p if logq.requires_grad else None
        return gp, gq

    return _record("kl_from_log_probs", (logp, logq), fn(pv, qv), fn, vjp)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scalar-mul": scale,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "mean-pool": mean,
    "sum": sum_all,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "cosine-similarity": cosine_similarity,
    "cosine-matrix": cosine_matrix,
    "layer-norm": layer_norm,
    "gelu": gelu,
    "embedding-lookup": embedding,
    "cross-entropy-with-logits": cross_entropy,
    "kl-from-log-probs": kl_from_log_probs,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Run a catalog op by name."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return op(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# differentiation


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    Gradients add onto whatever is already stored, so call ``zero_grad`` on
    the leaves between independent steps.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._graph is not graph or loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.values) if loss.grad is None else loss.grad + 1.0
        return
    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.values)}
    nodes = graph.nodes
    for idx in range(loss._node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._graph is graph and t._node is not None:
                prev = grads.get(t._node)
                grads[t._node] = gi if prev is None else prev + gi
            else:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    failed: list[str]

    @property
    def passed(self) -> bool:
        return not self.failed

    def __str__(self) -> str:
        lines = [f"{k}: max rel err {v:.3e} {'FAIL' if k in self.failed else 'ok'}"
                 for k, v in self.errors.items()]
        return "\n".join(lines)


def grad_check(
    graph: Graph,
    leaves: Sequence[Tensor] | None = None,
    step: float = 1e-5,
    tol: float = 1e-4,
    *,
    loss: Tensor | None = None,
    analytic: dict[int, np.ndarray] | None = None,
    max_coords: int | None = None,
    floor: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The graph is replayed with perturbed leaf values, so no model code is
    re-run.  Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps vanishing gradients from producing 0/0.  ``max_coords``
    caps the number of sampled coordinates per leaf.  ``analytic`` may supply
    gradients keyed by ``id(leaf)`` (used for negative controls); otherwise
    a fresh backward pass provides them.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    if loss is None:
        loss = graph.nodes[-1].output
    leaves = list(graph.leaves() if leaves is None else leaves)
    if analytic is None:
        saved = [t.grad for t in leaves]
        for t in leaves:
            t.grad = None
        backward(graph, loss)
        analytic = {id(t): (np.zeros(t.shape) if t.grad is None else t.grad) for t in leaves}
        for t, s in zip(leaves, saved):
            t.grad = s
    rng = np.random.default_rng(seed)
    upto = loss._node
    errors: dict[str, float] = {}
    failed: list[str] = []
    for k, leaf in enumerate(leaves):
        name = leaf.name or f"leaf{k}"
        base = leaf.values
        n = base.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        worst = 0.0
        a_flat = np.asarray(analytic[id(leaf)]).reshape(-1)
        for c in coords:
            pert = base.copy().reshape(-1)
            pert[c] += step
            fp = float(graph.replay({id(leaf): pert.reshape(base.shape)}, upto))
            pert[c] -= 2 * step
            fm = float(graph.replay({id(leaf): pert.reshape(base.shape)}, upto))
            num = (fp - fm) / (2 * step)
            a = float(a_flat[c])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        errors[name] = worst
        if worst > tol:
            failed.append(name)
    return GradCheckReport(errors, tol, failed)
