"""Numpy-backed tensors with define-by-run reverse-mode differentiation.

Every differentiable operation records a node (parents + backward rule +
sequence number) on its output. :func:`backward` walks the nodes reachable
from a scalar loss in exact reverse execution order and then releases them,
so a graph can be differentiated once.

Shapes are aligned explicitly: elementwise operations require identical
shapes, and the only broadcast allowed is multiplication by a scalar
(:func:`scale`).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphStateError, NumericError

DEFAULT_DTYPE = np.float64

_seq = itertools.count()
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


_relu_probe: list | None = None


@contextlib.contextmanager
def record_relu_masks():
    """Collect the activation mask of every relu evaluated inside the block.

    Finite-difference checks use this to tell whether a perturbation moved
    any pre-activation across the kink at zero.
    """
    global _relu_probe
    prev = _relu_probe
    _relu_probe = masks = []
    try:
        yield masks
    finally:
        _relu_probe = prev


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._seq: int | None = None
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._seq is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.size != 1:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def relu(self):
        return relu(self)


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``decay_exempt`` marks normalization affines and logit parameters that
    AdamW must not shrink. ``name`` is filled in by the owning module.
    """

    def __init__(self, data, name: str = "", decay_exempt: bool = False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.decay_exempt = decay_exempt

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data.dtype
    return DEFAULT_DTYPE


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op; record a node if any parent needs grad.

    ``backward_fn`` maps the output gradient to one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    Tensor.__init__(out, data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        for p in parents:
            if p._consumed:
                raise GraphStateError("cannot build on a tensor whose graph was already consumed")
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s) -> Tensor:
    """Multiply by a python scalar or a single-element tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise DimensionError(f"scale: factor must have one element, got shape {s.shape}")
        sv = s.data.reshape(-1)[0]
        xd = x.data

        def backward(g):
            gs = np.asarray(np.sum(g * xd), dtype=s.dtype).reshape(s.shape)
            return g * sv, gs

        return make_op(xd * sv, (x, s), backward)
    sv = float(s)
    return make_op(x.data * x.dtype.type(sv), (x,), lambda g: (g * sv,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_probe is not None:
        _relu_probe.append(mask)
    return make_op(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),))


# -- layout --------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}")
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, index: int) -> Tensor:
    """Element ``index`` of a 1-D tensor, as a shape-(1,) tensor."""
    if x.ndim != 1:
        raise DimensionError(f"take: expected a 1-D tensor, got shape {x.shape}")
    n = x.shape[0]
    if not -n <= index < n:
        raise DimensionError(f"take: index {index} out of range for length {n}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g.reshape(-1)[0]
        return (gx,)

    return make_op(x.data[index:index + 1].copy(), (x,), backward)


# -- reductions & products -------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape((1,) * x.ndim)
    return make_op(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).astype(g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of (B, P, Q) and (B, Q, R) operands."""
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"matmul: expected (b,p,q) and (b,q,r), got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return make_op(ad @ bd, (a, b), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax: input contains non-finite values")
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return make_op(out, (x,), backward)


# -- differentiation ---------------------------------------------------------

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Back-propagate from a single-element ``loss``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``. Returns a
    mapping from each tensor in ``params`` (default: every reached leaf) to
    the gradient computed by this call; unreachable params map to zeros.
    The graph is consumed: calling again raises :class:`GraphStateError`.
    """
    if loss.size != 1:
        raise DimensionError(f"backward: loss must have a single element, got shape {loss.shape}")
    if loss._consumed:
        raise GraphStateError("backward: graph already consumed by a previous backward call")

    grads_out: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss
        grads_out[id(loss)] = np.ones_like(loss.data)
    elif loss.requires_grad:
        nodes = _collect(loss)
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent.is_leaf:
                    leaves[key] = parent
                    grads_out[key] = grads_out[key] + pg if key in grads_out else np.array(pg, dtype=parent.dtype)
                else:
                    pending[key] = pending[key] + pg if key in pending else pg
        for node in nodes:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True

    for key, leaf in leaves.items():
        leaf.grad = grads_out[key] if leaf.grad is None else leaf.grad + grads_out[key]

    if params is None:
        return {leaves[k]: grads_out[k] for k in leaves}
    return {p: grads_out.get(id(p), np.zeros_like(p.data)) for p in params}


def _collect(root: Tensor) -> list[Tensor]:
    """Interior nodes reachable from ``root``, in reverse execution order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.is_leaf or id(t) in seen:
            continue
        if t._consumed:
            raise GraphStateError("backward: reached a node whose graph was already consumed")
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)
