"""Dense numpy-backed tensors with a small reverse-mode gradient tape.

Ops are plain functions. When a :class:`GradTape` is active on the current
thread and any input requires a gradient, the op records a node holding its
vector-Jacobian product; :func:`backward` walks those nodes in reverse
topological order and accumulates gradients into the leaves.

Broadcasting is deliberately narrow: binary ops accept identical shapes,
a vector added to every row of a higher-rank tensor (the bias pattern), or a
plain Python number used as a constant.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradTape", "ShapeError", "NumericError", "CycleError",
    "set_default_dtype", "get_default_dtype", "constant", "custom_op",
    "matmul", "linear", "add", "sub", "mul", "neg", "tanh", "sigmoid",
    "ewise", "softmax", "log_softmax", "masked_softmax", "sum", "sumsq",
    "take_rows", "pick", "select", "stack", "concat", "expand",
    "weighted_sum", "reshape", "transpose", "backward", "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class CycleError(RuntimeError):
    """The recorded graph is not a DAG."""


_DEFAULT_DTYPE = np.float64
_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {what}")


class _Node:
    __slots__ = ("op", "inputs", "vjp", "tape")

    def __init__(self, op, inputs, vjp, tape):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.tape = tape


class Tensor:
    """Immutable n-d array of floats, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _copy: bool = True):
        arr = np.array(data, dtype=_DEFAULT_DTYPE, copy=_copy) if _copy else data
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        _require_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the functional forms are canonical.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class GradTape:
    """Records differentiable ops executed on this thread while active.

    Usage::

        with GradTape() as tape:
            loss = ...
        grads = backward(tape, loss, wrt=params)
    """

    def __init__(self):
        self.n_records = 0
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False


def _active_tape() -> Optional[GradTape]:
    return getattr(_local, "tape", None)


def custom_op(op: str, out: np.ndarray, inputs: Sequence[Tensor],
              vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``out`` as the result of ``op`` applied to ``inputs``.

    ``vjp`` maps the output cotangent to one cotangent per input (None where
    an input needs no gradient). This is the single entry point every op in
    the module goes through, and it is public so that callers can register
    extra differentiable primitives.
    """
    out = np.asarray(out)
    if out.dtype != _DEFAULT_DTYPE:
        out = out.astype(_DEFAULT_DTYPE)
    _require_finite(out, op)
    result = Tensor(out, _copy=False)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = _Node(op, tuple(inputs), vjp, tape)
        tape.n_records += 1
    return result


def _as_operand(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(float(x))
    raise TypeError(f"unsupported operand type {type(x).__name__}")


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return "b_bias"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return "a_bias"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{side}_scalar":
        return np.asarray(g.sum())
    if kind == f"{side}_bias":
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return custom_op("matmul", A @ B, (a, b), vjp)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Apply ``w`` to the last axis of ``x``: ``x @ w.T``.

    ``w`` is an ``[out, in]`` matrix, or an ``[in]`` vector, in which case
    the last axis is contracted away.
    """
    k = x.shape[-1] if x.ndim else None
    if w.ndim == 2 and w.shape[1] == k:
        X, W = x.data, w.data
        out = X @ W.T

        def vjp(g):
            gx = g @ W if x.requires_grad else None
            gw = (g.reshape(-1, W.shape[0]).T @ X.reshape(-1, k)) if w.requires_grad else None
            return gx, gw

        return custom_op("linear", out, (x, w), vjp)
    if w.ndim == 1 and w.shape[0] == k:
        X, W = x.data, w.data
        out = X @ W

        def vjp(g):
            gx = g[..., None] * W if x.requires_grad else None
            gw = X.reshape(-1, k).T @ g.reshape(-1) if w.requires_grad else None
            return gx, gw

        return custom_op("linear", out, (x, w), vjp)
    raise ShapeError(f"linear: weight {w.shape} does not apply to input {x.shape}")


def add(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    kind = _broadcast_kind(a, b, "add")

    def vjp(g):
        return (_reduce_to(g, kind, "a") if a.requires_grad else None,
                _reduce_to(g, kind, "b") if b.requires_grad else None)

    return custom_op("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    kind = _broadcast_kind(a, b, "sub")

    def vjp(g):
        return (_reduce_to(g, kind, "a") if a.requires_grad else None,
                _reduce_to(-g, kind, "b") if b.requires_grad else None)

    return custom_op("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    kind = _broadcast_kind(a, b, "mul")
    A, B = a.data, b.data

    def vjp(g):
        return (_reduce_to(g * B, kind, "a") if a.requires_grad else None,
                _reduce_to(g * A, kind, "b") if b.requires_grad else None)

    return custom_op("mul", A * B, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return custom_op("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return custom_op("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return custom_op("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


_EWISE = {"add": add, "sub": sub, "mul": mul, "tanh": tanh, "sigmoid": sigmoid}


def ewise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``sub``, ``mul``, ``tanh``, ``sigmoid``)."""
    try:
        fn = _EWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def _check_last_axis(x: Tensor, op: str) -> None:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"{op}: needs a non-empty last axis, got shape {x.shape}")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    _check_last_axis(x, "softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op("softmax", y, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    _check_last_axis(x, "log_softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return custom_op("log_softmax", y, (x,), vjp)


def masked_softmax(x: Tensor, mask) -> Tensor:
    """Softmax over the last axis where ``mask == 0`` entries get exactly zero mass."""
    _check_last_axis(x, "masked_softmax")
    keep = np.asarray(mask) > 0
    if keep.shape != x.shape:
        raise ShapeError(f"masked_softmax: mask {keep.shape} does not match {x.shape}")
    if not keep.any(axis=-1).all():
        raise ValueError("masked_softmax: every row needs at least one unmasked entry")
    z = np.where(keep, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op("masked_softmax", y, (x,), vjp)


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        out = np.asarray(x.data.sum())

        def vjp(g):
            return (np.full(shape, g, dtype=x.data.dtype),)
    else:
        out = x.data.sum(axis=axis)

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return custom_op("sum", out, (x,), vjp)


def sumsq(x: Tensor) -> Tensor:
    """Sum of squared entries, as a scalar."""
    X = x.data
    return custom_op("sumsq", np.asarray((X * X).sum()), (x,), lambda g: (2.0 * g * X,))


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-d ``table``; result shape is ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-d, got {table.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"take_rows: id out of range [0, {n}) in {ids.min()}..{ids.max()}")
    shape = table.shape

    def vjp(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return custom_op("take_rows", table.data[ids], (table,), vjp)


def pick(x: Tensor, ids) -> Tensor:
    """``out[b] = x[b, ids[b]]`` for a 2-d ``x``."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.ndim != 2 or ids.shape != (x.shape[0],):
        raise ShapeError(f"pick: ids {ids.shape} do not index rows of {x.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[1]):
        raise IndexError("pick: id out of range")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows, ids] = g
        return (gx,)

    return custom_op("pick", x.data[rows, ids], (x,), vjp)


def select(x: Tensor, index: int, axis: int = 1) -> Tensor:
    """Take a single slice ``index`` along ``axis`` (the axis is dropped)."""
    shape = x.shape
    out = np.take(x.data, index, axis=axis)

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return custom_op("select", out, (x,), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack: nothing to stack")
    first = tensors[0].shape
    for t in tensors:
        if t.shape != first:
            raise ShapeError(f"stack: shape {t.shape} differs from {first}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if t.requires_grad else None for i, t in enumerate(tensors))

    return custom_op("stack", out, tensors, vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op("concat", out, tensors, vjp)


def expand(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` of shape ``[B, d]`` into ``[B, n, d]``."""
    if x.ndim != 2:
        raise ShapeError(f"expand: expected 2-d input, got {x.shape}")
    out = np.repeat(x.data[:, None, :], n, axis=1)
    return custom_op("expand", out, (x,), lambda g: (g.sum(axis=1),))


def weighted_sum(w: Tensor, h: Tensor) -> Tensor:
    """``out[b] = sum_i w[b, i] * h[b, i]`` for ``w: [B, N]`` and ``h: [B, N, D]``."""
    if w.ndim != 2 or h.ndim != 3 or w.shape != h.shape[:2]:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs annotations {h.shape}")
    W, H = w.data, h.data
    out = np.einsum("bn,bnd->bd", W, H)

    def vjp(g):
        gw = np.einsum("bd,bnd->bn", g, H) if w.requires_grad else None
        gh = W[:, :, None] * g[:, None, :] if h.requires_grad else None
        return gw, gh

    return custom_op("weighted_sum", out, (w, h), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return custom_op("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d input, got {x.shape}")
    return custom_op("transpose", x.data.T, (x,), lambda g: (g.T,))


def _topological(loss: Tensor, tape: GradTape) -> list:
    # Iterative DFS; ACTIVE hit on a fresh push means a back edge.
    ACTIVE, DONE = 1, 2
    state: dict = {}
    order = []
    stack_ = [(loss, False)]
    while stack_:
        t, expanded = stack_.pop()
        key = id(t)
        if expanded:
            state[key] = DONE
            order.append(t)
            continue
        st = state.get(key)
        if st == DONE:
            continue
        if st == ACTIVE:
            raise CycleError(f"cycle through {t!r}")
        state[key] = ACTIVE
        stack_.append((t, True))
        node = t._node
        if node is not None:
            if node.tape is not tape:
                raise ValueError(f"{t!r} was recorded on a different tape")
            for inp in node.inputs:
                if inp.requires_grad and state.get(id(inp)) != DONE:
                    stack_.append((inp, False))
    order.reverse()
    return order


def backward(tape: GradTape, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
    """Gradients of scalar ``loss`` with respect to leaf tensors.

    Returns a dict keyed by leaf tensor. Leaves listed in ``wrt`` that the
    loss does not depend on map to exact zeros. Gradients from every use of
    a tensor are summed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict = {}
    leaves: dict = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape, dtype=loss.data.dtype)
        for t in _topological(loss, tape):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            if node is None:
                leaves[id(t)] = (t, g)
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi.reshape(inp.shape) if prev is None else prev + gi.reshape(inp.shape)
    result = {t: g for t, g in leaves.values()}
    if wrt is not None:
        wanted = {}
        for t in wrt:
            g = result.get(t)
            wanted[t] = g if g is not None else np.zeros(t.shape, dtype=t.data.dtype)
        return wanted
    return result


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` maps a list of tensors (same shapes as ``params``) to a scalar
    tensor. The error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves = [Tensor(p.data, requires_grad=True) for p in params]
    with GradTape() as tape:
        loss = f(leaves)
    _require_finite(loss.data, "objective")
    analytic = backward(tape, loss, wrt=leaves)

    worst = 0.0
    base = [p.data for p in params]
    for k, arr in enumerate(base):
        ga = analytic[leaves[k]].reshape(-1)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            def at(delta):
                probe = flat.copy()
                probe[i] += delta
                args = [Tensor(b) for b in base]
                args[k] = Tensor(probe.reshape(arr.shape))
                val = f(args).data
                _require_finite(val, "objective")
                return float(val.reshape(-1)[0])

            numeric = (at(eps) - at(-eps)) / (2.0 * eps)
            a = float(ga[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
