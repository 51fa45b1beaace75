"""Reverse-mode automatic differentiation over dense numpy arrays.

Define-by-run engine: every operation returns a `Tensor` that remembers its
parents and a vector-Jacobian closure. `backward(loss)` walks the recorded
graph once in reverse topological order and accumulates gradients into the
leaves that were created with `requires_grad=True`.

Numeric contract:
  * float32 is the working precision, float64 is the test precision; binary
    ops refuse to mix the two so precision never changes silently.
  * every completed operation checks its output for NaN/Inf and raises
    `NumericOverflowError` on the first non-finite value.
  * gradients of parameters that do not influence the loss are zero arrays,
    not missing entries.
"""

from __future__ import annotations

import functools
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class NumericOverflowError(FloatingPointError):
    """An operation produced a NaN or Inf value."""


def _op(fn):
    """Run an op under silenced numpy warnings; the finite check in `_node`
    turns any non-finite result into a typed NumericOverflowError instead."""

    @functools.wraps(fn)
    def wrapped(*args, **kwargs):
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)

    return wrapped


def _checked(data: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericOverflowError(f"non-finite value produced by {context}")
    return data


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    # keep numpy from broadcasting over Tensor objects; `ndarray <op> Tensor`
    # must fall through to the reflected operator and stay in the graph
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # ---- operator sugar (each delegates to a module-level op) ----

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _coerce(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: tuple[int, ...]) -> "Tensor":
        return transpose(self, axes)


def tensor(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _require_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp, context: str) -> Tensor:
    _checked(data, context)
    if any(p.requires_grad or p._vjp is not None for p in parents):
        return Tensor(data, _parents=parents, _vjp=vjp)
    return Tensor(data)


# ---- elementwise / arithmetic ----


@_op
def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp, "add")


@_op
def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "sub")
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), vjp, "sub")


@_op
def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), vjp, "mul")


@_op
def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, (a,), vjp, "log")


@_op
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp, "exp")


@_op
def clip_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient is blocked where the floor binds."""
    out = np.maximum(a.data, a.data.dtype.type(floor))
    passed = a.data > floor

    def vjp(g):
        return (g * passed,)

    return _node(out, (a,), vjp, "clip_min")


@_op
def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * k * x * x)
        return (g * d.astype(x.dtype),)

    return _node(out.astype(x.dtype), (a,), vjp, "gelu")


# ---- shape ----


@_op
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), vjp, "reshape")


@_op
def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _node(out, (a,), vjp, "transpose")


# ---- contractions / lookups ----


@_op
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matrix product; batch dims must match exactly."""
    _require_same_dtype(a, b, "matmul")
    if a.data.ndim == 3 and b.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ValueError("matmul: mismatched batch dimensions")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


@_op
def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embed: ids must be integers")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(out, (table,), vjp, "embed")


@_op
def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0."""
    idx = np.asarray(idx)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(out, (a,), vjp, "take_rows")


@_op
def take_per_row(a: Tensor, cols: np.ndarray) -> Tensor:
    """Gather a[i, cols[i]] (cols 1-D) or a[i, cols[i, j]] (cols 2-D)."""
    cols = np.asarray(cols)
    n = a.data.shape[0]
    if cols.ndim == 1:
        rows = np.arange(n)
    elif cols.ndim == 2:
        rows = np.arange(n)[:, None]
    else:
        raise ValueError("take_per_row: cols must be 1-D or 2-D")
    out = a.data[rows, cols]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _node(out, (a,), vjp, "take_per_row")


# ---- reductions ----


@_op
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _node(np.asarray(out), (a,), vjp, "sum")


@_op
def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _node(np.asarray(out), (a,), vjp, "mean")


# ---- normalization / attention pieces ----


@_op
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically safe softmax via max subtraction along `axis`."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out.astype(a.data.dtype, copy=False), (a,), vjp, "softmax")


@_op
def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out.astype(a.data.dtype, copy=False), (a,), vjp, "log_softmax")


@_op
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _require_same_dtype(x, gain, "layer_norm")
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx.astype(x.data.dtype, copy=False), dgain, dbias

    return _node(out.astype(x.data.dtype, copy=False), (x, gain, bias), vjp, "layer_norm")


# ---- backward pass ----


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; returns nodes with parents before children."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


@_op
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every requires_grad leaf.

    The loss must be a single scalar. Each graph node is visited exactly once;
    repeated calls add into existing `.grad` arrays (fixed-order accumulation).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            _checked(pg, "backward")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grads_for(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward and return a gradient per named parameter.

    Parameters the loss never touched get explicit zero arrays.
    """
    zero_grads(params.values())
    backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


# ---- numeric oracle ----


def gradient_check(
    make_loss: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float | None = None,
    max_entries: int = 24,
    seed: int = 0,
) -> float:
    """Compare autodiff gradients against central finite differences.

    Returns the worst relative error over a random sample of parameter
    entries. `make_loss` must rebuild the loss from the current parameter
    values on every call.
    """
    analytic = grads_for(make_loss(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        h = eps if eps is not None else (1e-5 if flat.dtype == np.float64 else 1e-2)
        n = flat.size
        picks = rng.choice(n, size=min(max_entries, n), replace=False)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + h
            up = make_loss().item()
            flat[i] = keep - h
            down = make_loss().item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
    return worst
