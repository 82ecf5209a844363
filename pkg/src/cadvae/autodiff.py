"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op builds a fresh node holding its output and a closure that maps the
output gradient to input gradients. ``backward`` walks the graph once in
reverse topological order. No broadcasting is supported except the row-wise
bias addition in :func:`add_bias` (and the per-channel bias inside the
convolution ops).
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, DomainError, NumericError, UsageError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None,
                 _owned=False):
        if _owned:
            arr = np.asarray(data, dtype=DTYPE)
        else:
            # private copy so callers cannot mutate graph values
            arr = np.array(data, dtype=DTYPE, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self):
        backward(self)

    # operator sugar; all same-shape only
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(negate(self), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data, _owned=True)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn,
                  _owned=True)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-k bias vector to every row of an n x k matrix."""
    if a.ndim != 2 or b.ndim != 1 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {b.shape} to rows of {a.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0) if b.requires_grad else None))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    # skip the product for a side that needs no gradient (frozen weights, inputs)
    return _make(ad @ bd, (a, b), lambda g: (
        g @ bd.T if a.requires_grad else None,
        ad.T @ g if b.requires_grad else None,
    ))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; the gradient is passed only where the input was inside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# unary maps


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def map_unary(kind: str, a: Tensor) -> Tensor:
    x = a.data
    if kind == "relu":
        y = np.maximum(x, 0.0)
        mask = x > 0
        return _make(y, (a,), lambda g: (g * mask,))
    if kind == "sigmoid":
        y = _sigmoid(x)
        return _make(y, (a,), lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(x)
        return _make(y, (a,), lambda g: (g * (1.0 - y * y),))
    if kind == "exp":
        y = np.exp(x)
        return _make(y, (a,), lambda g: (g * y,))
    if kind == "log":
        if np.any(x <= 0):
            raise DomainError(f"log of non-positive value (min {x.min()!r})")
        return _make(np.log(x), (a,), lambda g: (g / x,))
    if kind == "negate":
        return _make(-x, (a,), lambda g: (-g,))
    if kind == "softplus":
        return _make(_softplus(x), (a,), lambda g: (g * _sigmoid(x),))
    raise ValueError(f"unknown unary kind {kind!r}")


def relu(a):
    return map_unary("relu", a)


def sigmoid(a):
    return map_unary("sigmoid", a)


def tanh(a):
    return map_unary("tanh", a)


def exp(a):
    return map_unary("exp", a)


def log(a):
    return map_unary("log", a)


def negate(a):
    return map_unary("negate", a)


def softplus(a):
    return map_unary("softplus", a)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def reduce(kind: str, a: Tensor, axis=None) -> Tensor:
    axis = _check_axis(a, axis)
    shape = a.shape
    if kind == "sum":
        y = a.data.sum(axis=axis)
        scale = 1.0
    elif kind == "mean":
        y = a.data.mean(axis=axis)
        scale = 1.0 / (a.data.size if axis is None else shape[axis])
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape),)

    return _make(y, (a,), bw)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return reduce("sum", a, axis)


def mean(a: Tensor, axis=None) -> Tensor:
    return reduce("mean", a, axis)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _make(y, (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis=-1) -> Tensor:
    if not parts:
        raise DimensionError("concat of an empty list")
    ref = parts[0]
    axis = _check_axis(ref, axis)
    for p in parts[1:]:
        if p.ndim != ref.ndim or any(
            p.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    y = np.concatenate([p.data for p in parts], axis=axis)

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(y, tuple(parts), bw)


def split(a: Tensor, sizes: Sequence[int], axis=-1) -> list:
    axis = _check_axis(a, axis)
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes) or np.sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not sum to extent {a.shape[axis]}")
    outs = []
    lo = 0
    for s in sizes:
        outs.append(slice_axis(a, lo, lo + s, axis))
        lo += s
    return outs


def slice_axis(a: Tensor, lo: int, hi: int, axis=-1) -> Tensor:
    axis = _check_axis(a, axis)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(lo, hi)
    idx = tuple(idx)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), bw)


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1:
        raise DimensionError("take_rows expects a 1-d index array")
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise DimensionError(f"row index out of range for {a.shape[0]} rows")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def pick(a: Tensor, labels) -> Tensor:
    """Return ``a[i, labels[i]]`` for each row i of an n x c matrix."""
    labels = np.asarray(labels, dtype=np.intp)
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise DimensionError(f"pick: labels {labels.shape} do not match rows of {a.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[rows, labels] = g
        return (full,)

    return _make(a.data[rows, labels], (a,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data, requires_grad=False, name=a.name, _owned=True)


# ---------------------------------------------------------------------------
# softmax family (last axis of a matrix)


def _check_logits(a: Tensor, op):
    if a.ndim != 2:
        raise DimensionError(f"{op} expects an n x c matrix, got {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError(f"{op}: non-finite logits")


def softmax(a: Tensor) -> Tensor:
    _check_logits(a, "softmax")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    _check_logits(a, "log_softmax")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# convolutions (NCHW); weights are (out_ch, in_ch, kh, kw) for conv2d and
# (in_ch, out_ch, kh, kw) for conv_transpose2d


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, pad=0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: input {x.shape}, weight {w.shape}, bias {b.shape}")
    n, _, h, wd = x.shape
    f, c, kh, kw = w.shape
    oh = kernels.out_size(h, kh, stride, pad)
    ow = kernels.out_size(wd, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd}")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T + b.data).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    xshape = x.shape

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gflat.T @ cols).reshape(w.shape)
        gb = gflat.sum(axis=0)
        gx = kernels.col2im(gflat @ wmat, xshape, kh, kw, stride, pad) if x.requires_grad else None
        return (gx, gw, gb)

    return _make(np.ascontiguousarray(out), (x, w, b), bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride=1, pad=0, out_hw=None) -> Tensor:
    """Adjoint of :func:`conv2d`; ``out_hw`` pins the spatial output size."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"conv_transpose2d: input {x.shape}, weight {w.shape}, bias {b.shape}")
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    if out_hw is None:
        out_hw = ((h - 1) * stride - 2 * pad + kh, (wd - 1) * stride - 2 * pad + kw)
    oh, ow = out_hw
    if (kernels.out_size(oh, kh, stride, pad), kernels.out_size(ow, kw, stride, pad)) != (h, wd):
        raise DimensionError(f"conv_transpose2d: output {out_hw} inconsistent with input {h}x{wd}")
    yshape = (n, cout, oh, ow)
    wmat = w.data.reshape(cin, -1)
    xflat = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    out = kernels.col2im(xflat @ wmat, yshape, kh, kw, stride, pad)
    out = out + b.data.reshape(1, cout, 1, 1)

    def bw(g):
        gcols = kernels.im2col(g, kh, kw, stride, pad)
        gx = (gcols @ wmat.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        gw = (xflat.T @ gcols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        return (np.ascontiguousarray(gx), gw, gb)

    return _make(out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor t.

    Gradients add onto whatever is already in ``grad``, so a parameter that
    appears several times in the graph, or across several losses, receives
    the sum. Each graph can be differentiated once.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("backward already called on this graph")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._consumed:
            raise UsageError("backward reached a graph that was already differentiated")
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._parents:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._consumed = True
            node._backward = None


# ---------------------------------------------------------------------------
# parameter collections


class ParamSet:
    """Named, fixed-shape collection of trainable tensors.

    Parameters are immutable tensors; an optimizer step swaps in new leaf
    tensors through :meth:`assign`, never writing into existing arrays.
    """

    def __init__(self, entries=None, frozen=False):
        self._entries = OrderedDict()
        self.frozen = frozen
        for name, value in (entries or {}).items():
            self._entries[name] = self._leaf(name, value)

    def _leaf(self, name, value):
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
        return Tensor(data, requires_grad=not self.frozen, name=name)

    def __getitem__(self, name) -> Tensor:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def add(self, name, value):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._entries[name] = self._leaf(name, value)

    def assign(self, name, data):
        old = self._entries[name]
        data = np.asarray(data, dtype=DTYPE)
        if data.shape != old.shape:
            raise DimensionError(f"{name}: shape is fixed at {old.shape}, got {data.shape}")
        self._entries[name] = self._leaf(name, data)

    def frozen_view(self) -> "ParamSet":
        """Value-identical copy whose tensors never receive gradients."""
        view = ParamSet(frozen=True)
        for name, t in self._entries.items():
            view._entries[name] = stop_gradient(t)
        return view

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def grad(self, name):
        t = self._entries[name]
        return np.zeros(t.shape) if t.grad is None else t.grad

    def grad_norm(self):
        return float(np.sqrt(np.sum([np.sum(self.grad(n) ** 2) for n in self._entries])))

    def num_params(self):
        return int(np.sum([t.data.size for t in self._entries.values()]))

    def state(self):
        return OrderedDict((n, t.data) for n, t in self._entries.items())


def params_of(sets: Iterable[ParamSet]):
    for ps in sets:
        yield from ps.items()
