"""Dense tensors with reverse-mode differentiation.

Only the operations the forecaster needs are provided. Every op builds a new
:class:`Value` whose ``backward_fn`` accumulates into its parents' ``grad``
buffers; :func:`backward` runs those recipes in reverse topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Value",
    "GradReport",
    "const",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "linear",
    "relu",
    "gelu",
    "activation",
    "dropout",
    "transpose",
    "reshape",
    "concat",
    "slice_",
    "broadcast_to",
    "reduce_sum",
    "reduce_mean",
    "softmax_lastdim",
    "layer_norm",
    "embedding",
    "backward",
    "grad_check",
    "dump_graph",
]


class Value:
    """A node in a differentiable computation graph.

    ``data`` and ``grad`` always have the same shape. Leaves get a zeroed
    ``grad`` at construction and keep accumulating across backward passes
    until :meth:`zero_grad`; interior nodes have their ``grad`` rebuilt by
    every :func:`backward`. Repeated uses of a node sum their contributions.
    """

    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "name", "requires_grad")

    def __init__(
        self,
        data,
        parents: Sequence["Value"] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
        name: str | None = None,
        requires_grad: bool | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if not self.parents else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def const(data, dtype=None) -> Value:
    """Wrap an array as a leaf that never receives gradient."""
    if isinstance(data, Value):
        return data
    return Value(np.asarray(data, dtype=dtype), requires_grad=False)


def _lift(x, like: Value | None = None) -> Value:
    if isinstance(x, Value):
        return x
    dtype = like.dtype if like is not None else None
    return const(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(v: Value, g: np.ndarray) -> None:
    """Add ``g`` into ``v.grad``.

    Interior nodes may end up holding a view of a child's gradient, so their
    buffers are never updated in place. Leaves own theirs.
    """
    if v.grad is None:
        v.grad = g
    elif v.parents:
        v.grad = v.grad + g
    else:
        v.grad += g


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Value:
    a = _lift(a, b if isinstance(b, Value) else None)
    b = _lift(b, a)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return Value(out_data, (a, b), backward_fn, "add")


def neg(a) -> Value:
    return scale(a, -1.0)


def sub(a, b) -> Value:
    a = _lift(a, b if isinstance(b, Value) else None)
    b = _lift(b, a)
    return add(a, neg(b))


def mul(a, b) -> Value:
    a = _lift(a, b if isinstance(b, Value) else None)
    b = _lift(b, a)
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return Value(out_data, (a, b), backward_fn, "mul")


def scale(a: Value, c: float) -> Value:
    c = float(c)

    def backward_fn(g):
        _accum(a, c * g)

    return Value(a.data * c, (a,), backward_fn, "scale")


# While a gradient check runs, relu appends its on/off pattern here so the
# checker can tell when a finite-difference step crossed a kink.
_kink_log: list | None = None


def relu(a: Value) -> Value:
    mask = a.data > 0
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask))

    def backward_fn(g):
        _accum(a, g * mask)

    return Value(a.data * mask, (a,), backward_fn, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Value) -> Value:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(a, g * d)

    return Value(out, (a,), backward_fn, "gelu")


def activation(a: Value, name: str) -> Value:
    if name == "relu":
        return relu(a)
    if name == "gelu":
        return gelu(a)
    raise ContractError(f"unknown activation {name!r}; expected 'relu' or 'gelu'")


def dropout(a: Value, p: float, rng: np.random.Generator | None) -> Value:
    """Inverted dropout. Identity when ``p == 0`` or no generator is given."""
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return mul(a, const(keep))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Value:
    """Batched matrix product ``[.., m, k] @ [.., k, n]``.

    Leading extents must be equal, or ``b`` must be a plain 2-D matrix that is
    shared across every leading index of ``a``.
    """
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner extents differ, {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    shared_rhs = b.ndim == 2
    if not shared_rhs and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if shared_rhs:
                k, n = b.shape
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Value(out, (a, b), backward_fn, "matmul")


def linear(x: Value, w: Value, b: Value | None = None) -> Value:
    """Affine map over the last axis: ``x @ w + b`` with ``w`` of shape [in, out]."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape} ({w.name})")
    k, n = w.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(x.shape[:-1] + (n,))
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(g):
        g2 = g.reshape(-1, n)
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return Value(out, parents, backward_fn, "linear")


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


def transpose(a: Value, i: int, j: int) -> Value:
    i = _check_axis(i, a.ndim, "transpose")
    j = _check_axis(j, a.ndim, "transpose")

    def backward_fn(g):
        _accum(a, np.swapaxes(g, i, j))

    return Value(np.swapaxes(a.data, i, j), (a,), backward_fn, "transpose")


def reshape(a: Value, shape: Sequence[int]) -> Value:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc

    def backward_fn(g):
        _accum(a, g.reshape(a.shape))

    return Value(out, (a,), backward_fn, "reshape")


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    values = [_lift(v) for v in values]
    if not values:
        raise ShapeError("concat of an empty sequence")
    ndim = values[0].ndim
    ax = _check_axis(axis, ndim, "concat")
    ref = values[0].shape
    for v in values[1:]:
        if v.ndim != ndim or any(v.shape[d] != ref[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat on axis {ax}: extents differ, {ref} vs {v.shape}")
    out = np.concatenate([v.data for v in values], axis=ax)
    bounds = np.cumsum([0] + [v.shape[ax] for v in values])

    def backward_fn(g):
        for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
            if v.requires_grad:
                idx = [slice(None)] * ndim
                idx[ax] = slice(lo, hi)
                _accum(v, g[tuple(idx)])

    return Value(out, values, backward_fn, "concat")


def slice_(a: Value, key) -> Value:
    """Basic (view) indexing: ints, slices, Ellipsis. No fancy indexing."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (isinstance(k, (int, np.integer, slice)) or k is Ellipsis):
            raise ContractError("slice_ supports basic indexing only; use embedding() for gathers")
    out = a.data[key]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    return Value(np.array(out), (a,), backward_fn, "slice")


def broadcast_to(a: Value, shape: Sequence[int]) -> Value:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.shape))

    return Value(out, (a,), backward_fn, "broadcast")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_check_axis(ax, ndim, "reduce") for ax in axis))


def reduce_sum(a: Value, axis=None, keepdims: bool = False) -> Value:
    axes = _axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.shape))

    return Value(out, (a,), backward_fn, "sum")


def reduce_mean(a: Value, axis=None, keepdims: bool = False) -> Value:
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(reduce_sum(a, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# fused layers
# ---------------------------------------------------------------------------


def softmax_lastdim(x: Value) -> Value:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Value(y, (x,), backward_fn, "softmax")


def layer_norm(x: Value, gamma: Value, beta: Value, eps: float = 1e-5) -> Value:
    """Normalize each last-axis slice (population variance), then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: width {d} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward_fn(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accum(
                x,
                rstd
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                ),
            )

    return Value(out, (x, gamma, beta), backward_fn, "layer_norm")


def embedding(table: Value, idx) -> Value:
    """Gather rows of ``table`` ([rows, width]) at integer ``idx`` of any shape."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ContractError("embedding indices must be integers")
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        label = table.name or "embedding table"
        raise IndexError(
            f"index out of range for {label}: got [{idx.min()}, {idx.max()}], table has {rows} rows"
        )
    out = table.data[idx]

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return Value(out, (table,), backward_fn, "embedding")


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _toposort(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into every reachable node's ``grad``."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = _toposort(root)
    for node in order:
        if node.parents:
            node.grad = None
    _accum(root, np.ones_like(root.data))
    for node in reversed(order):
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        if node.backward_fn is not None and node.requires_grad:
            node.backward_fn(node.grad)


def dump_graph(root: Value) -> str:
    """Text edge list ``id op shape <- parent ids`` for eyeballing a graph."""
    order = _toposort(root) if root.requires_grad else [root]
    ids = {id(v): i for i, v in enumerate(order)}
    lines = []
    for v in order:
        src = " ".join(str(ids.get(id(p), "const")) for p in v.parents)
        label = f" [{v.name}]" if v.name else ""
        lines.append(f"{ids[id(v)]} {v.op}{label} {list(v.shape)} <- {src}".rstrip())
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    errors: dict[str, float]
    tol: float
    non_finite: list[str] = field(default_factory=list)
    kink_retries: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.non_finite and all(e <= self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self) -> list[str]:
        bad = [n for n, e in self.errors.items() if not e <= self.tol]
        return sorted(set(bad) | set(self.non_finite))

    def to_rows(self) -> list[tuple[str, float, bool]]:
        return [(n, e, e <= self.tol and n not in self.non_finite) for n, e in self.errors.items()]

    def __str__(self):
        width = max((len(n) for n in self.errors), default=4)
        lines = [f"{'parameter':<{width}}  max_rel_err  ok"]
        for name, err, ok in self.to_rows():
            lines.append(f"{name:<{width}}  {err:11.3e}  {'yes' if ok else 'NO'}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'} at tol {self.tol:g}")
        return "\n".join(lines)


def relative_error(a: np.ndarray, n: np.ndarray, floor=1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps zero gradients from
    turning rounding noise into large ratios."""
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def fd_noise_floor(f0: float, h: float, dtype=np.float64) -> float:
    """Magnitude below which a central difference is dominated by rounding.

    Rounding in ``f`` is about ``eps * |f|``; dividing by the step gives the
    noise of one difference quotient. The factor 1e4 keeps the floor well clear
    of that noise while staying far below any gradient worth checking.
    """
    return max(1e-8, 1e4 * float(np.finfo(dtype).eps) * max(1.0, abs(f0)) / h)


def grad_check(
    f: Callable[[], Value],
    params: Mapping[str, Value],
    tol: float = 1e-4,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
    kink_retries: int = 3,
    stencil: int = 3,
) -> GradReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild the graph from ``params`` on every call. The step for
    each element is ``h * max(1, |x|)``; when the two evaluations see
    different relu on/off patterns the difference straddles a kink and is
    retried with a step ten times smaller (up to ``kink_retries`` times).
    ``stencil=5`` uses the fourth-order five-point central formula, for
    points where curvature makes the three-point truncation error visible.
    Element errors are relative, with
    the denominator floored at :func:`fd_noise_floor` so that gradients that
    are identically zero (a key bias under softmax, say) are compared in
    absolute terms.
    """
    if stencil not in (3, 5):
        raise ContractError(f"stencil must be 3 or 5, got {stencil}")
    names = list(names) if names is not None else list(params)
    for v in params.values():
        v.zero_grad()
    root = f()
    backward(root)
    f0 = root.item()
    analytic = {n: params[n].grad.copy() for n in names}

    errors: dict[str, float] = {}
    non_finite: list[str] = []
    retried: dict[str, int] = {}
    for name in names:
        p = params[name]
        a = analytic[name]
        if not np.all(np.isfinite(a)):
            non_finite.append(name)
            errors[name] = math.inf
            continue
        numeric = np.zeros_like(a)
        floors = np.empty(a.shape)
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            for attempt in range(kink_retries + 1):
                offsets = (1, -1) if stencil == 3 else (2, 1, -1, -2)
                vals, logs = [], []
                for k in offsets:
                    flat[i] = orig + k * step
                    v, log = _eval_logged(f)
                    vals.append(v)
                    logs.append(log)
                flat[i] = orig
                if all(_same_pattern(logs[0], lg) for lg in logs[1:]) or attempt == kink_retries:
                    break
                retried[name] = retried.get(name, 0) + 1
                step /= 10.0
            if stencil == 3:
                numeric.reshape(-1)[i] = (vals[0] - vals[1]) / (2.0 * step)
            else:
                numeric.reshape(-1)[i] = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * step)
            floors.reshape(-1)[i] = fd_noise_floor(f0, step / max(1.0, abs(orig)), root.dtype)
        errors[name] = float(relative_error(a, numeric, floors).max()) if a.size else 0.0
    return GradReport(errors=errors, tol=tol, non_finite=non_finite, kink_retries=retried)


def _eval_logged(f: Callable[[], Value]) -> tuple[float, list]:
    global _kink_log
    _kink_log = []
    try:
        value = f().item()
        return value, _kink_log
    finally:
        _kink_log = None


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
