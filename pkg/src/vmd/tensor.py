"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Only the operations the VMD networks and losses need are provided. Binary
elementwise ops accept same-shape operands or a scalar on either side; any
other broadcasting is rejected with :class:`ShapeError`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional

import numpy as np

LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12

_node_ids = itertools.count()
_grad_mode = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphStateError(RuntimeError):
    """Backward was requested on a graph that was already consumed."""


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording them (thread-local switch)."""
    prev = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


class Node:
    """A recorded operation.

    ``backward_fn`` maps the upstream gradient to a tuple with one entry per
    input (``None`` where no gradient flows).
    """

    __slots__ = ("id", "op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False

    def __repr__(self) -> str:
        return f"Node({self.op}#{self.id})"


class Tensor:
    """Dense float64 array with optional gradient storage.

    Leaf gradients accumulate across graphs until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def backward(self) -> int:
        """Backpropagate from this scalar; returns the number of nodes visited."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self.node is None:
            if not self.requires_grad:
                raise GraphStateError("loss is not attached to a recorded graph")
            self._accumulate(np.ones_like(self.data))
            return 0
        nodes = graph_nodes(self)
        if any(n.consumed for n in nodes):
            raise GraphStateError("backward() already ran on this graph")

        pending: dict[int, np.ndarray] = {self.node.id: np.ones_like(self.data)}
        visited = 0
        for node in reversed(nodes):
            node.consumed = True
            g = pending.pop(node.id, None)
            visited += 1
            if g is None:
                continue
            for inp, gin in zip(node.inputs, node.backward_fn(g)):
                if gin is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp._accumulate(gin)
                elif inp.node.id in pending:
                    pending[inp.node.id] = pending[inp.node.id] + gin
                else:
                    pending[inp.node.id] = gin
        return visited

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64).reshape(self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g


def graph_nodes(root: Tensor) -> list[Node]:
    """All nodes reachable from ``root``, in construction order."""
    if root.node is None:
        return []
    seen: dict[int, Node] = {}
    stack = [root.node]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        for inp in node.inputs:
            if inp.node is not None and inp.node.id not in seen:
                stack.append(inp.node)
    return [seen[k] for k in sorted(seen)]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.node = Node(op, inputs, backward_fn)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _check_binary(op: str, a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(b):
        return a.shape
    if _is_scalar(a):
        return b.shape
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operands receive the summed gradient
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


# -- binary elementwise --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    return _record(
        "add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    return _record(
        "sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
    )


def div(a, b) -> Tensor:
    """a / b with |b| floored at 1e-12 (sign kept)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("div", a, b)
    sign = np.where(b.data < 0, -1.0, 1.0)
    floored = np.abs(b.data) < LOG_FLOOR
    den = np.where(floored, sign * LOG_FLOOR, b.data)
    out = a.data / den

    def backward(g):
        ga = _reduce_to(g / den, a)
        gb = np.where(floored, 0.0, -g * out / den)
        return ga, _reduce_to(gb, b)

    return _record("div", out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


# -- unary elementwise ---------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log with the input clamped to >= 1e-12."""
    a = as_tensor(a)
    clipped = np.maximum(a.data, LOG_FLOOR)
    active = a.data >= LOG_FLOOR
    return _record(
        "log", np.log(clipped), (a,), lambda g: (np.where(active, g / clipped, 0.0),)
    )


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _record("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def clamp(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is inside."""
    a = as_tensor(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (a.data >= lo_) & (a.data <= hi_)
    return _record(
        "clamp", np.clip(a.data, lo_, hi_), (a,), lambda g: (np.where(inside, g, 0.0),)
    )


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return _record(
        "matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
    )


def linear(x, weight, bias) -> Tensor:
    """x @ weight + bias with the bias row added to every row of x."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    return _record(
        "linear",
        x.data @ weight.data + bias.data,
        (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
    )


# -- reductions --------------------------------------------------------------------


def _check_axis(op: str, a: Tensor, axis: Optional[int]) -> None:
    if a.size == 0:
        raise ShapeError(f"{op}: cannot reduce an empty tensor")
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")


def tsum(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    _check_axis("sum", a, axis)
    if axis is None:
        return _record(
            "sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),)
        )
    return _record(
        "sum",
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape),),
    )


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    _check_axis("mean", a, axis)
    n = a.size if axis is None else a.shape[axis]
    if axis is None:
        return _record(
            "mean",
            np.asarray(a.data.mean()),
            (a,),
            lambda g: (np.broadcast_to(g / n, a.shape),),
        )
    return _record(
        "mean",
        a.data.mean(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), a.shape),),
    )


# -- shape manipulation --------------------------------------------------------------


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", np.array(out), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(
        "reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


# -- composite ops with fused gradients --------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    a = as_tensor(a)
    _check_axis("softmax", a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), backward)


def _unit_rows(x: np.ndarray):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    floored = norm < NORM_FLOOR
    den = np.maximum(norm, NORM_FLOOR)
    return x / den, den, floored


def _unit_rows_backward(g_unit, unit, den, floored):
    # derivative of x/max(|x|, floor) applied to the upstream gradient
    proj = (g_unit * unit).sum(axis=-1, keepdims=True)
    return np.where(floored, g_unit / den, (g_unit - proj * unit) / den)


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity along the last axis; norms floored at 1e-12.

    For 1-D inputs the result is a 0-d scalar.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError("cosine_similarity needs at least one feature dimension")
    ua, da, fa = _unit_rows(a.data)
    ub, db, fb = _unit_rows(b.data)
    out = (ua * ub).sum(axis=-1)

    def backward(g):
        g = np.expand_dims(g, -1)
        return (
            _unit_rows_backward(g * ub, ua, da, fa),
            _unit_rows_backward(g * ua, ub, db, fb),
        )

    return _record("cosine_similarity", out, (a, b), backward)


def pairwise_cosine(a, b) -> Tensor:
    """Matrix of cosine similarities between rows of ``a`` [n,d] and ``b`` [m,d]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_cosine: shapes {a.shape} and {b.shape} incompatible")
    ua, da, fa = _unit_rows(a.data)
    ub, db, fb = _unit_rows(b.data)
    out = ua @ ub.T

    def backward(g):
        return (
            _unit_rows_backward(g @ ub, ua, da, fa),
            _unit_rows_backward(g.T @ ua, ub, db, fb),
        )

    return _record("pairwise_cosine", out, (a, b), backward)


# -- verification ----------------------------------------------------------------------


def gradient_check(
    f: Callable[..., Tensor], *inputs: Tensor, eps: float = 1e-5
) -> float:
    """Compare recorded gradients of scalar ``f(*inputs)`` with central differences.

    Returns max over all elements of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    The input tensors must have ``requires_grad=True``; their ``grad`` fields
    are overwritten.
    """
    if not eps > 0:
        raise ValueError(f"gradient_check: eps must be positive, got {eps}")
    if not inputs:
        raise ValueError("gradient_check: no inputs given")
    for x in inputs:
        x.zero_grad()
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"gradient_check: f must be scalar-valued, got shape {out.shape}")
    if out.node is not None:
        out.backward()

    worst = 0.0
    for x in inputs:
        g_ad = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        g_fd = np.empty(flat.size)
        with no_grad():
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = f(*inputs).item()
                flat[k] = orig - eps
                fm = f(*inputs).item()
                flat[k] = orig
                g_fd[k] = (fp - fm) / (2.0 * eps)
        g_ad = g_ad.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
        worst = max(worst, float(np.max(np.abs(g_ad - g_fd) / denom)))
    return worst
