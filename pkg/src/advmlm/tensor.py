"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a node to an implicit graph: the
output tensor keeps references to its inputs and a closure mapping the
output cotangent to input cotangents.  Nodes carry a monotonically
increasing sequence number, so ``backward`` can visit them in strict
reverse creation order without an explicit topological sort.

Scalars default to float32; call :func:`set_default_dtype` (or use the
:func:`default_dtype` context manager) to switch to float64 for
finite-difference checks.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "ContractViolation",
    "NumericFault",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "check_finite",
    "concat",
    "stack",
    "where",
    "maximum",
    "softmax",
    "log_softmax",
    "masked_softmax",
    "layer_norm",
    "gelu",
    "embedding",
    "gru_sequence",
    "one_hot",
    "straight_through",
]


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class NumericFault(FloatingPointError):
    """A NaN/Inf or an invalid domain value was detected."""


_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_counter = itertools.count()


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractViolation(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results never require grad."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._seq = next(_counter)
        self.op = "leaf"

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._seq = next(_counter)
        out.op = "const"
        return out

    # ---------------------------------------------------------------- basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=20)}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    # ------------------------------------------------------------- autodiff
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation(f"backward on non-scalar tensor of shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ContractViolation("seed gradient shape mismatch")
        if not self.requires_grad:
            raise ContractViolation("tensor does not require grad")

        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in sorted(nodes, key=lambda n: n._seq, reverse=True):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ----------------------------------------------------------- operators
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __gt__(self, other):
        return compare("gt", self, other)

    def __ge__(self, other):
        return compare("ge", self, other)

    def __lt__(self, other):
        return compare("lt", self, other)

    def __le__(self, other):
        return compare("le", self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    return out


# ---------------------------------------------------------------- helpers
def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor._wrap(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def check_finite(t: Tensor | np.ndarray, where: str = "tensor") -> None:
    """Check barrier: raise :class:`NumericFault` if ``t`` (or its grad) holds NaN/Inf."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NumericFault(f"non-finite values in {where}")
    if isinstance(t, Tensor) and t.grad is not None and not np.all(np.isfinite(t.grad)):
        raise NumericFault(f"non-finite gradient in {where}")


# ------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    if _grad_enabled and (a.requires_grad or b.requires_grad) and np.any(bd == 0):
        raise NumericFault("division by zero under grad")
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if _grad_enabled and a.requires_grad and np.any(ad <= 0):
        raise NumericFault("log of non-positive value under grad")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _node(out, (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = kernels.sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _node(a.data * keep, (a,), lambda g: (g * keep,), "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * dinner),)

    return _node(out.astype(x.dtype, copy=False), (a,), backward, "gelu")


def maximum(a: Tensor, c: float) -> Tensor:
    """``max(a, c)`` against a constant; gradient passes where ``a > c``."""
    a = _lift(a)
    keep = a.data > c
    out = np.where(keep, a.data, np.asarray(c, dtype=a.dtype))
    return _node(out, (a,), lambda g: (g * keep,), "maximum")


def compare(kind: str, a, b) -> Tensor:
    """Elementwise comparison producing a constant 0/1 tensor."""
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b)
    fn = {"gt": np.greater, "ge": np.greater_equal, "lt": np.less, "le": np.less_equal, "eq": np.equal}[kind]
    return Tensor._wrap(fn(a.data, b.data).astype(a.dtype))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` is true, else ``b``. ``cond`` is a constant."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        zero = np.zeros_like(g)
        return (
            _unbroadcast(np.where(cond, g, zero), sa) if a.requires_grad else None,
            _unbroadcast(np.where(cond, zero, g), sb) if b.requires_grad else None,
        )

    out = np.broadcast_to(np.where(cond, a.data, b.data), shape)
    return _node(np.ascontiguousarray(out), (a, b), backward, "where")


# ------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _node(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / max(count, 1))


# ---------------------------------------------------------------- shaping
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"cannot reshape {old} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    shape = a.shape
    out = a.data[index]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractViolation(str(exc)) from None
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, backward, "stack")


# ----------------------------------------------------------------- linalg
def matmul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ContractViolation(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------- softmax
def softmax(x: Tensor, dim: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=dim, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=dim, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=dim, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=dim, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=dim, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=dim, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def masked_softmax(x: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0.

    Rows with no unmasked entry come out all-zero.
    """
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    out = kernels.masked_softmax_forward(x.data, np.broadcast_to(mask, x.shape))

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), backward, "masked_softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with affine parameters."""
    xhat, rstd = kernels.layer_norm_forward(x.data, eps)
    out = xhat * weight.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gw = (g * xhat).sum(axis=lead) if weight.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = kernels.layer_norm_backward(g * weight.data, xhat, rstd) if x.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, weight, bias), backward, "layer_norm")


# -------------------------------------------------------------- embedding
def embedding(ids, table: Tensor) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _node(table.data[ids], (table,), backward, "embedding")


def one_hot(ids, depth: int, dtype=None) -> Tensor:
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (depth,), dtype=dtype or _default_dtype)
    np.put_along_axis(out, ids[..., None], 1, axis=-1)
    return Tensor._wrap(out)


# -------------------------------------------------------------------- gru
def gru_sequence(gi: Tensor, w_hh: Tensor, b_hh: Tensor, mask, reverse: bool = False) -> Tensor:
    """Run the GRU recurrence over pre-projected inputs ``gi`` of shape [B, S, 3H].

    Gate order inside ``gi``/``w_hh`` is (reset, update, candidate).  At
    positions where ``mask`` is 0 the state is carried unchanged and the
    output is zero.
    """
    mask = np.asarray(mask, dtype=gi.dtype)
    if gi.ndim != 3 or gi.shape[-1] != w_hh.shape[0] or w_hh.shape[0] != 3 * w_hh.shape[1]:
        raise ContractViolation("gru_sequence shape mismatch")
    if mask.shape != gi.shape[:2]:
        raise ContractViolation("mask must have shape [batch, seq]")
    out, saved = kernels.gru_forward(gi.data, w_hh.data, b_hh.data, mask, reverse)

    def backward(g):
        dgi, dw, db = kernels.gru_backward(np.ascontiguousarray(g), w_hh.data, mask, saved, reverse)
        return dgi, dw, db

    return _node(out, (gi, w_hh, b_hh), backward, "gru_sequence")


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward value ``hard`` exactly; backward routes the cotangent to ``soft``.

    Equivalent to ``hard + soft - detach(soft)`` without the rounding that
    expression picks up in floating point.  ``soft`` may broadcast against
    ``hard``; its gradient is summed over the broadcast axes.
    """
    hard = np.asarray(hard.data if isinstance(hard, Tensor) else hard, dtype=soft.dtype)
    np.broadcast_shapes(hard.shape, soft.shape)
    shape = soft.shape
    return _node(hard.copy(), (soft,), lambda g: (_unbroadcast(g, shape),), "straight_through")
