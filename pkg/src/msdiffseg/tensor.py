"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every tensor is immutable once built. Operations on tensors that require
gradients record their inputs and a backward rule on the result; calling
:func:`backward` on a scalar walks that graph in reverse topological order.
Integer tensors (class-id masks) are supported for storage and indexing but
never take part in differentiation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericalError

DTYPE = np.float64

_node_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None:
            if arr.dtype.kind in "iub":
                arr = arr.astype(np.int64)
            else:
                arr = arr.astype(DTYPE)
        if requires_grad and arr.dtype.kind != "f":
            raise ContractError("only floating tensors can require gradients")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # construction helpers

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership of arr without copying
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.node_id = None
        t.op = "leaf"
        t._parents = ()
        t._backward = None
        return t

    @staticmethod
    def zeros(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    # views

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return self.data.reshape(-1)[0].item()

    def tolist(self):
        return self.data.tolist()

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    def __len__(self):
        return self.shape[0]

    # operators

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced a non-finite value")


def _result(arr, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op output and record it on the graph if any input needs grads."""
    arr = np.asarray(arr, dtype=DTYPE)
    if not arr.flags.owndata:
        arr = arr.copy()
    _check_finite(arr, op)
    out = Tensor._wrap(arr)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_node_ids)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericalError("division by zero")
    return _result(
        ad / bd,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    return _result(
        x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),), "pow"
    )


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NumericalError("log of a non-positive value")
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    x = a.data
    keep = x >= lo
    return _result(np.maximum(x, lo), (a,), lambda g: (g * keep,), "clamp_min")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    return _result(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


# reductions and shape manipulation


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(a.shape[i] for i in axes)
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _result(y, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    basic = all(
        isinstance(i, (slice, int, type(None), type(Ellipsis)))
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise IndexError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat_axis(a, b, axis: int = 0) -> Tensor:
    """Join two tensors along ``axis``; ``a``'s slices come first."""
    return concat([a, b], axis)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = _norm_axis(axis, ref.ndim)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            i != axis and m != n for i, (m, n) in enumerate(zip(ref.shape, t.shape))
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {ref.shape} and {t.shape} disagree"
            )
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat"
    )


def split_axis(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = _norm_axis(axis, a.ndim)
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to extent {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(index)))
        start += n
    return out


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Softmax over ``axis``, stabilised by subtracting the slice maximum."""
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


# image ops


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix, half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


_resize_cache: dict[tuple[int, int], np.ndarray] = {}


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    m = _resize_cache.get(key)
    if m is None:
        m = _resize_matrix(n_in, n_out)
        m.flags.writeable = False
        _resize_cache[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects c×h×w, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target extent {out_h}×{out_w} must be at least 1×1")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return _result(x.data.copy(), (x,), lambda g: (g,), "resize")
    ry, rx = resize_matrix(h, out_h), resize_matrix(w, out_w)
    y = np.einsum("oh,chw,pw->cop", ry, x.data, rx, optimize=True)

    def backward(g):
        return (np.einsum("oh,cop,pw->chw", ry, g, rx, optimize=True),)

    return _result(y, (x,), backward, "resize")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a c×h×w input with a cout×cin×kh×kw kernel."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects c×h×w and 4-d kernel, got {x.shape}, {kernel.shape}")
    cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"kernel {kernel.shape} does not match input channels {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel extents must be odd, got {kh}×{kw}")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(
            f"conv2d output extent not integral for input {h}×{w}, kernel {kh}×{kw}, "
            f"stride {stride}, padding {padding}"
        )
    oh, ow = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # cols: cin × oh × ow × kh × kw (strided view, no copy)
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    k = kernel.data
    y = np.einsum("cyxij,ocij->oyx", cols, k, optimize=True)

    def backward(g):
        gk = np.einsum("oyx,cyxij->ocij", g, cols, optimize=True)
        gxp = np.zeros_like(xp)
        # per-offset scatter of the output gradient
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.einsum(
                    "oc,oyx->cyx", k[:, :, i, j], g
                )
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gk)

    return _result(y, (x, kernel), backward, "conv2d")


# differentiation


@dataclass
class Node:
    op: str
    node_id: int
    input_ids: tuple[int | None, ...]
    tensor: Tensor = field(repr=False)


@dataclass
class Tape:
    """Graph nodes reachable from a root, inputs before consumers."""

    nodes: list[Node]

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if t.node_id in seen:
                continue
            seen.add(t.node_id)
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        nodes = [
            Node(t.op, t.node_id, tuple(p.node_id for p in t._parents), t) for t in order
        ]
        return cls(nodes)

    def leaves(self) -> list[Tensor]:
        return [n.tensor for n in self.nodes if not n.tensor._parents]


def backward(root: Tensor) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar root.

    Returns a map from node id to gradient for every leaf that requires
    gradients and is reachable from ``root``.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root is not on the tape (no input requires gradients)")
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape, dtype=DTYPE)}
    out: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        t = node.tensor
        g = grads.pop(t.node_id, None)
        if g is None:
            continue
        if not t._parents:
            out[t.node_id] = Tensor._wrap(np.array(g, dtype=DTYPE))
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.node_id)
            grads[p.node_id] = pg if prev is None else prev + pg
    return out


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[Tensor]:
    """Gradients of ``root`` w.r.t. each tensor in ``wrt`` (zeros if unreached)."""
    got = backward(root)
    out = []
    for t in wrt:
        g = got.get(t.node_id) if t.requires_grad else None
        out.append(Tensor.zeros(t.shape) if g is None else g)
    return out


def fd_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``. ``coords``
    restricts the comparison to a subset of flat indices.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(x.data, dtype=DTYPE)
    leaf = Tensor(base, requires_grad=True)
    (analytic,) = grad(f(leaf), [leaf])
    a_flat = analytic.data.reshape(-1)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        up, down = flat.copy(), flat.copy()
        up[i] += eps
        down[i] -= eps
        fu = f(Tensor(up.reshape(base.shape))).item()
        fd = f(Tensor(down.reshape(base.shape))).item()
        if not (math.isfinite(fu) and math.isfinite(fd)):
            raise NumericalError("function is not finite near the probe point")
        num = (fu - fd) / (2 * eps)
        a = a_flat[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
