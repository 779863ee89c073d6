"""Dense float64 tensors with tape-based reverse-mode autodiff.

Ops record themselves on the innermost active :class:`Tape` whenever any
input requires a gradient. Outside a tape, ops evaluate eagerly and record
nothing, which is how frozen-feature precomputation and evaluation run.

Broadcasting is limited to a right-aligned suffix: ``x[..., n] + b[n]`` is
allowed, arbitrary numpy broadcasting is not.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "tape", "backward", "DimensionError", "ContractError",
    "as_tensor", "matmul", "add", "sub", "mul", "scale", "neg", "exp", "log",
    "sqrt", "clamp_min", "relu", "sum", "mean", "amax", "softmax",
    "log_softmax", "layer_norm", "gelu", "embedding", "take_rows",
    "transpose", "reshape", "concat", "getitem", "l2_normalize",
    "cosine_similarity",
]

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition on how an operation is used was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, key: getitem(self, key)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _scalar_err(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

class _Node:
    __slots__ = ("index", "inputs", "output", "backward_fn", "tape")

    def __init__(self, index, inputs, output, backward_fn, tape):
        self.index = index
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended as ops execute, so list order is already a topological
    order. The tape is not consumed by :meth:`backward`; calling it twice
    accumulates into leaf ``.grad`` buffers.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, inputs: tuple[Tensor, ...], output: Tensor,
               backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        node = _Node(len(self.nodes), inputs, output, backward_fn, self)
        self.nodes.append(node)
        output.tape_node = node

    def detach(self) -> None:
        for n in self.nodes:
            n.output.tape_node = None
            n.tape = None

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        node = loss.tape_node
        if node is None or node.tape is not self:
            raise ContractError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for n in reversed(self.nodes[: node.index + 1]):
            g = grads.pop(id(n.output), None)
            if g is None:
                continue
            in_grads = n.backward_fn(g)
            for t, gi in zip(n.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.tape_node is not None and t.tape_node.tape is self:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=DTYPE, copy=True)
                else:
                    t.grad = t.grad + gi


_state = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


@contextmanager
def tape() -> Iterator[Tape]:
    """Activate a fresh tape for the enclosed block.

    On exit the recorded outputs are detached from the tape, so
    :func:`backward` must run inside the block. Detaching breaks the
    tensor/node reference cycles and lets activations be freed at once.
    """
    t = Tape()
    stack = _tape_stack()
    stack.append(t)
    try:
        yield t
    finally:
        stack.pop()
        t.detach()


def backward(loss: Tensor) -> None:
    node = loss.tape_node
    if node is None:
        raise ContractError("loss is not attached to a tape (was it computed inside `with tape():`?)")
    node.tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tape_node = None
    out.name = None
    stack = _tape_stack()
    out.requires_grad = needs and bool(stack)
    if out.requires_grad:
        stack[-1].record(inputs, out, backward_fn)
    return out


# --------------------------------------------------------------------------
# elementwise and broadcasting helpers
# --------------------------------------------------------------------------

def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (b, a) if len(b) <= len(a) else (a, b)
    if len(short) == 0 or long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} are not suffix-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        _check_suffix(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data > lo
    return _make(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,))


def relu(x: Tensor) -> Tensor:
    return clamp_min(x, 0.0)


# --------------------------------------------------------------------------
# linear algebra and shape ops
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or with matching leading batch extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in xs]} along axis {axis}") from exc
    return _make(data, xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(x: Tensor, key) -> Tensor:
    src = x.shape

    def bw(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.array(x.data[key], dtype=DTYPE), (x,), bw)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather along axis 0; ``idx`` may have any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    src = x.shape

    def bw(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + src[1:]))
        return (out,)

    return _make(x.data[idx], (x,), bw)


class VocabularyError(KeyError):
    pass


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise VocabularyError(f"token id {int(bad)} outside vocabulary of size {table.shape[0]}")
    return take_rows(table, ids)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximiser."""
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    src = x.shape

    def bw(g):
        out = np.zeros(src, dtype=DTYPE)
        np.put_along_axis(out, arg, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make(np.take_along_axis(x.data, arg, axis=axis).squeeze(axis), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("softmax received non-finite input")
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# --------------------------------------------------------------------------
# network primitives
# --------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.reshape(-1, xd.shape[-1]).sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _make(y, (x,), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = xd / denom
    clamped = norm <= eps

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(clamped, g / eps, (g - y * proj) / denom),)

    return _make(y, (x,), bw)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    return sum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)
