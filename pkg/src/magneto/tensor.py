"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable computation in the package goes through
:func:`apply_primitive`, which evaluates one primitive with numpy and records
how to push gradients back to its operands.  :func:`backward` walks the
recorded graph in reverse topological order and returns a
:class:`GradientTable` keyed by tensor name.

Precision is a process-wide mode (``float32`` for training, ``float64`` for
gradient checking) selected with :func:`precision`.  All operands of a single
primitive must share the active dtype.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, UnsupportedPrimitiveError, VocabularyError

__all__ = [
    "Tensor",
    "GradientTable",
    "apply_primitive",
    "backward",
    "precision",
    "get_dtype",
    "trace_kinks",
    "PRIMITIVES",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}
_active_dtype = np.float32
_name_counter = itertools.count()
# When not None, relu/clip append their input sign patterns here.
_kink_trace: Optional[list] = None


@contextmanager
def precision(name: str):
    """Switch the graph-wide float precision for the duration of the block."""
    global _active_dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}; expected float32 or float64")
    previous = _active_dtype
    _active_dtype = _DTYPES[name]
    try:
        yield
    finally:
        _active_dtype = previous


def get_dtype():
    return _active_dtype


@contextmanager
def trace_kinks():
    """Collect the sign pattern of every relu/clip input evaluated in the block."""
    global _kink_trace
    previous = _kink_trace
    _kink_trace = []
    try:
        yield _kink_trace
    finally:
        _kink_trace = previous


class Tensor:
    """Immutable n-dimensional array node in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "name", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=_active_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name if name is not None else f"tensor{next(_name_counter)}"
        self.op: Optional[str] = None
        self.parents: tuple = ()
        self._backward: Optional[Callable] = None

    @classmethod
    def wrap(cls, data: np.ndarray, requires_grad: bool = False, name: Optional[str] = None) -> "Tensor":
        """Leaf tensor around ``data`` without casting to the active precision."""
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = bool(requires_grad)
        t.name = name if name is not None else f"tensor{next(_name_counter)}"
        t.op = None
        t.parents = ()
        t._backward = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor({self.name}, shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; every operator lowers to apply_primitive
    def __add__(self, other):
        return apply_primitive("add", [self, _as_tensor(other)])

    def __radd__(self, other):
        return apply_primitive("add", [_as_tensor(other), self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, _as_tensor(other)])

    def __rsub__(self, other):
        return apply_primitive("sub", [_as_tensor(other), self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, _as_tensor(other)])

    def __rmul__(self, other):
        return apply_primitive("mul", [_as_tensor(other), self])

    def __truediv__(self, other):
        return apply_primitive("div", [self, _as_tensor(other)])

    def __neg__(self):
        return apply_primitive("mul", [self, _as_tensor(-1.0)])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class GradientTable(dict):
    """Mapping from tensor name to gradient array; missing names mean zero."""

    def of(self, tensor: Tensor):
        g = self.get(tensor.name)
        return np.zeros_like(tensor.data) if g is None else g


# ---------------------------------------------------------------------------
# primitive implementations
#
# Each returns (output ndarray, backward) where backward(g) yields one gradient
# (or None) per operand.
# ---------------------------------------------------------------------------


def _unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _prim_add(ops, attrs):
    a, b = ops
    _broadcast_shape("add", a, b)
    return a.data + b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _prim_sub(ops, attrs):
    a, b = ops
    _broadcast_shape("sub", a, b)
    return a.data - b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _prim_mul(ops, attrs):
    a, b = ops
    _broadcast_shape("mul", a, b)
    return a.data * b.data, lambda g: (
        _unbroadcast(g * b.data, a.shape),
        _unbroadcast(g * a.data, b.shape),
    )


def _prim_div(ops, attrs):
    a, b = ops
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return out, lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * out / b.data, b.shape),
    )


def _prim_matmul(ops, attrs):
    a, b = ops
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, back


def _record_kink(x):
    if _kink_trace is not None:
        _kink_trace.append(np.sign(x).astype(np.int8))


def _prim_relu(ops, attrs):
    (x,) = ops
    _record_kink(x.data)
    pos = x.data > 0
    return np.where(pos, x.data, 0).astype(x.dtype), lambda g: (g * pos,)


def _prim_sigmoid(ops, attrs):
    (x,) = ops
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return s, lambda g: (g * s * (1 - s),)


def _prim_log(ops, attrs):
    (x,) = ops
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return out, lambda g: (g / x.data,)


def _prim_clip(ops, attrs):
    (x,) = ops
    lo, hi = attrs["min"], attrs["max"]
    _record_kink(x.data - lo)
    _record_kink(hi - x.data)
    inside = (x.data >= lo) & (x.data <= hi)
    return np.clip(x.data, lo, hi).astype(x.dtype), lambda g: (g * inside,)


def _axis(attrs, ndim):
    axis = attrs.get("axis", -1)
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _prim_softmax(ops, attrs):
    (x,) = ops
    axis = _axis(attrs, x.ndim)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return s, back


def _prim_layer_norm(ops, attrs):
    (x,) = ops
    eps = attrs.get("eps", 1e-5)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - xhat * gxm),)

    return xhat.astype(x.dtype), back


def _prim_dropout(ops, attrs):
    (x,) = ops
    rate = attrs.get("rate", 0.0)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate {rate} outside [0, 1)")
    rng = attrs["rng"]
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x.data * keep, lambda g: (g * keep,)


def _prim_embedding_lookup(ops, attrs):
    (table,) = ops
    ids = np.asarray(attrs["ids"])
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding_lookup: ids must be integers")
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(
            f"embedding_lookup: ids must lie in [0, {table.shape[0]}), got range "
            f"[{ids.min()}, {ids.max()}]"
        )
    padding_idx = attrs.get("padding_idx")

    def back(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        if padding_idx is not None:
            grad[padding_idx] = 0
        return (grad,)

    return table.data[ids], back


def _prim_concat(ops, attrs):
    ref = ops[0]
    axis = _axis(attrs, ref.ndim)
    for t in ops[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise DimensionError(
                f"concat(axis={axis}): shapes {[o.shape for o in ops]} do not conform"
            )
    out = np.concatenate([t.data for t in ops], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ops])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return out, back


def _prim_reshape(ops, attrs):
    (x,) = ops
    shape = tuple(attrs["shape"])
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return out, lambda g: (g.reshape(x.shape),)


def _prim_transpose(ops, attrs):
    (x,) = ops
    axes = attrs.get("axes")
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),)


def _prim_reduce_sum(ops, attrs):
    (x,) = ops
    axis = _axis(attrs, x.ndim) if "axis" in attrs else None
    keepdims = attrs.get("keepdims", False)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return out, back


def _prim_reduce_mean(ops, attrs):
    (x,) = ops
    axis = _axis(attrs, x.ndim) if "axis" in attrs else None
    keepdims = attrs.get("keepdims", False)
    count = x.data.size if axis is None else x.shape[axis]
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype),)

    return out, back


def _prim_masked_fill(ops, attrs):
    (x,) = ops
    mask = np.asarray(attrs["mask"], dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise DimensionError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}") from None
    value = attrs.get("value", 0.0)
    out = np.where(mask, x.dtype.type(value), x.data)
    keep = ~mask
    return out, lambda g: (_unbroadcast(np.where(keep, g, 0), x.shape),)


def _prim_conv2d(ops, attrs):
    x, w = ops
    stride = attrs.get("stride", 1)
    pad = attrs.get("padding", 0)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and weight {w.shape} do not conform")
    bs, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: kernel {w.shape[2:]} larger than padded input {(hp, wp)}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    # windows: (bs, cin, oh, ow, kh, kw)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(bs * oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(bs, oh, ow, cout).transpose(0, 3, 1, 2)

    def back(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(bs * oh * ow, cout)
        gw = (gflat.T @ cols).reshape(w.shape)
        gcols = (gflat @ wmat).reshape(bs, oh, ow, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw

    return np.ascontiguousarray(out), back


def _prim_batch_norm(ops, attrs):
    """Normalize over every axis except axis 1 (channels); no affine part."""
    (x,) = ops
    eps = attrs.get("eps", 1e-5)
    mode = attrs.get("mode", "train")
    if x.ndim < 2:
        raise DimensionError(f"batch_norm: input must have a channel axis, got {x.shape}")
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    if mode == "eval":
        mean = np.asarray(attrs["running_mean"]).reshape(bshape)
        var = np.asarray(attrs["running_var"]).reshape(bshape)
        rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        return ((x.data - mean) * rstd).astype(x.dtype), lambda g: (g * rstd,)
    if mode != "train":
        raise ContractError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    count = x.data.size // x.shape[1]
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd

    def back(g):
        gm = g.sum(axis=axes, keepdims=True) / count
        gxm = (g * xhat).sum(axis=axes, keepdims=True) / count
        return (rstd * (g - gm - xhat * gxm),)

    return xhat.astype(x.dtype), back


PRIMITIVES: Dict[str, Callable] = {
    "matmul": _prim_matmul,
    "add": _prim_add,
    "sub": _prim_sub,
    "mul": _prim_mul,
    "div": _prim_div,
    "relu": _prim_relu,
    "sigmoid": _prim_sigmoid,
    "log": _prim_log,
    "clip": _prim_clip,
    "softmax": _prim_softmax,
    "layer_norm": _prim_layer_norm,
    "dropout": _prim_dropout,
    "embedding_lookup": _prim_embedding_lookup,
    "concat": _prim_concat,
    "reshape": _prim_reshape,
    "transpose": _prim_transpose,
    "reduce_sum": _prim_reduce_sum,
    "reduce_mean": _prim_reduce_mean,
    "masked_fill": _prim_masked_fill,
    "conv2d": _prim_conv2d,
    "batch_norm": _prim_batch_norm,
}

_ARITY = {
    "matmul": 2, "add": 2, "sub": 2, "mul": 2, "div": 2, "conv2d": 2,
}


def apply_primitive(kind: str, operands: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Evaluate primitive ``kind`` on ``operands`` and record its provenance."""
    attrs = attrs or {}
    impl = PRIMITIVES.get(kind)
    if impl is None:
        raise UnsupportedPrimitiveError(f"unsupported primitive {kind!r}")
    operands = list(operands)
    expected = _ARITY.get(kind, None if kind == "concat" else 1)
    if expected is not None and len(operands) != expected:
        raise ContractError(f"{kind}: expected {expected} operand(s), got {len(operands)}")
    if not operands:
        raise ContractError(f"{kind}: no operands")
    dtypes = {t.dtype for t in operands}
    if len(dtypes) != 1:
        raise ContractError(f"{kind}: mixed precisions {sorted(map(str, dtypes))} in one graph")

    if kind == "dropout" and (not attrs.get("training", False) or attrs.get("rate", 0.0) == 0.0):
        return operands[0]

    data, back = impl(operands, attrs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=operands[0].dtype)
    out.requires_grad = any(t.requires_grad for t in operands)
    out.name = f"{kind}{next(_name_counter)}"
    out.op = kind
    out.parents = ()
    out._backward = None
    if out.requires_grad:
        out.parents = tuple(operands)
        out._backward = back
    return out


def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> GradientTable:
    """Gradients of scalar ``loss`` with respect to every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must have exactly one element, got shape {loss.shape}")
    table = GradientTable()
    if not loss.requires_grad:
        return table
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.name in table:
                table[node.name] = table[node.name] + g
            else:
                table[node.name] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.dtype)
    return table


# ---------------------------------------------------------------------------
# thin functional wrappers used by the building blocks
# ---------------------------------------------------------------------------


def relu(x):
    return apply_primitive("relu", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def log(x):
    return apply_primitive("log", [x])


def clip(x, lo, hi):
    return apply_primitive("clip", [x], {"min": lo, "max": hi})


def softmax(x, axis=-1):
    return apply_primitive("softmax", [x], {"axis": axis})


def layer_norm(x, eps=1e-5):
    return apply_primitive("layer_norm", [x], {"eps": eps})


def dropout(x, rate, training, rng=None):
    return apply_primitive("dropout", [x], {"rate": rate, "training": training, "rng": rng})


def embedding_lookup(table, ids, padding_idx=None):
    return apply_primitive("embedding_lookup", [table], {"ids": ids, "padding_idx": padding_idx})


def concat(tensors: Iterable[Tensor], axis=-1):
    return apply_primitive("concat", list(tensors), {"axis": axis})


def reshape(x, shape):
    return apply_primitive("reshape", [x], {"shape": shape})


def transpose(x, axes=None):
    return apply_primitive("transpose", [x], {"axes": axes})


def reduce_sum(x, axis=None, keepdims=False):
    attrs = {"keepdims": keepdims}
    if axis is not None:
        attrs["axis"] = axis
    return apply_primitive("reduce_sum", [x], attrs)


def reduce_mean(x, axis=None, keepdims=False):
    attrs = {"keepdims": keepdims}
    if axis is not None:
        attrs["axis"] = axis
    return apply_primitive("reduce_mean", [x], attrs)


def masked_fill(x, mask, value=0.0):
    return apply_primitive("masked_fill", [x], {"mask": mask, "value": value})


def conv2d(x, w, stride=1, padding=0):
    return apply_primitive("conv2d", [x, w], {"stride": stride, "padding": padding})


def batch_norm(x, mode, running_mean=None, running_var=None, eps=1e-5):
    return apply_primitive(
        "batch_norm",
        [x],
        {"mode": mode, "eps": eps, "running_mean": running_mean, "running_var": running_var},
    )


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))

