"""Dense tensors with reverse-mode automatic differentiation.

Arrays are numpy-backed and stored in the engine precision (``float32`` by
default; :func:`precision` switches to ``float64`` for sharper gradient checks).
Broadcasting is limited to a scalar against a tensor. Anything else must be
aligned explicitly with :func:`broadcast_to`.

Spatial tensors are channels-last: a feature map is ``(X, Y, Z, C)``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from . import _kernels

_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


def get_dtype():
    return _DTYPE


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the engine precision; tensors created inside use it."""
    previous = 32 if _DTYPE == np.float32 else 64
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_DTYPE, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._retain = False
        self.name = name

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def retain_grad(self):
        """Keep the gradient of this non-leaf tensor after :func:`backward`."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``backward_fn(grad_out)`` must return one gradient array (or ``None``) per
    parent, each with the parent's shape.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _DTYPE else data.astype(_DTYPE)
    out.grad = None
    out._retain = False
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topological(root: Tensor):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``root``.

    Gradients accumulate across calls; non-leaf tensors keep theirs only after
    :meth:`Tensor.retain_grad`.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------- elementwise

def _is_scalar(x):
    return not isinstance(x, Tensor) or x.data.ndim == 0


def _binary_operands(a, b, opname):
    a_t, b_t = as_tensor(a), as_tensor(b)
    if a_t.shape != b_t.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{opname}: shapes {a_t.shape} and {b_t.shape} differ "
                         "(only scalar broadcasting is implicit)")
    return a_t, b_t


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return apply_op(a.data + b.data, (a, b),
                    lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "subtract")
    return apply_op(a.data - b.data, (a, b),
                    lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "multiply")
    return apply_op(a.data * b.data, (a, b),
                    lambda g: (_reduce_to(g * b.data, a.shape) if a.requires_grad else None,
                               _reduce_to(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "divide")
    out = a.data / b.data

    def back(g):
        ga = _reduce_to(g / b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(out, (a, b), back)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return apply_op(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log of a non-positive value")
    return apply_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return apply_op(out, (x,), lambda g: (g * 0.5 / out,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    if isinstance(p, Tensor):
        raise TypeError("power exponent must be a number")
    if p == 2:
        return apply_op(x.data * x.data, (x,), lambda g: (g * 2 * x.data,))
    return apply_op(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def square(x) -> Tensor:
    return power(x, 2)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return apply_op(out, (x,), lambda g: (g * out * (1 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return apply_op(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return apply_op(x.data * factor, (x,), lambda g: (g * factor,))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return apply_op(out.astype(x.data.dtype), (x,), back)


# --------------------------------------------------------------- shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return apply_op(out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return apply_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                    lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
                     for i, t in enumerate(tensors))

    return apply_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def split(x, sizes: Sequence[int], axis: int = -1):
    x = as_tensor(x)
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {x.shape[ax]} of {x.shape}")
    outs, start = [], 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[ax] = slice(start, start + size)
        outs.append(getitem(x, tuple(index)))
        start += size
    return outs


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def back(g):
        full = np.zeros_like(x.data)
        if isinstance(index, np.ndarray) or (isinstance(index, tuple) and any(isinstance(i, np.ndarray) for i in index)):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return apply_op(np.ascontiguousarray(out), (x,), back)


def pad(x, widths) -> Tensor:
    """Zero padding; ``widths`` is one ``(before, after)`` pair per axis."""
    x = as_tensor(x)
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != x.ndim:
        raise ShapeError(f"pad: {len(widths)} width pairs for a {x.ndim}-d tensor")
    if all(w == (0, 0) for w in widths):
        return x
    index = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return apply_op(np.pad(x.data, widths), (x,), lambda g: (np.ascontiguousarray(g[index]),))


def roll(x, shifts, axes) -> Tensor:
    x = as_tensor(x)
    shifts, axes = tuple(shifts), tuple(axes)
    if not any(shifts):
        return x
    neg = tuple(-s for s in shifts)
    return apply_op(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, neg, axes),))


def broadcast_to(x, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums expanded axes."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    expanded = tuple(range(lead)) + tuple(lead + i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1)

    def back(g):
        return (g.sum(axis=expanded, keepdims=True).reshape(x.shape) if expanded else g,)

    return apply_op(np.ascontiguousarray(out), (x,), back)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (used for bias tables)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
        raise IndexError(f"take: index out of range for extent {x.shape[axis]}")
    ax = axis % x.ndim

    def back(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + indices.ndim)), tuple(range(indices.ndim)))
        gm = gm.reshape((indices.size,) + moved.shape[1:])
        np.add.at(moved, indices.ravel(), gm)
        return (full,)

    return apply_op(np.take(x.data, indices, axis=ax), (x,), back)


# ------------------------------------------------------------- reductions

def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.data.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op(out, (x,), back)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


def _reduce_extreme(x, pick) -> Tensor:
    x = as_tensor(x)
    flat = x.data.reshape(-1)
    idx = int(pick(flat))  # first occurrence on ties

    def back(g):
        gx = np.zeros(x.size, dtype=x.data.dtype)
        gx[idx] = g
        return (gx.reshape(x.shape),)

    return apply_op(np.asarray(flat[idx]), (x,), back)


def reduce_max(x) -> Tensor:
    """Global maximum; the gradient goes to the first maximizing element."""
    return _reduce_extreme(x, np.argmax)


def reduce_min(x) -> Tensor:
    return _reduce_extreme(x, np.argmin)


# ----------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched product ``(..., m, k) @ (..., k, n)`` with equal leading extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents of {a.shape} and {b.shape} differ")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} differ")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return apply_op(a.data @ b.data, (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; ``weight`` is ``(in, out)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: features {x.shape} do not match weight {weight.shape}")
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    if bias is not None and parents[2].shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {parents[2].shape} does not match weight {weight.shape}")
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        out += parents[2].data
    out_shape = x.shape[:-1] + (weight.shape[1],)

    def back(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return apply_op(out.reshape(out_shape), parents, back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op(out, (x,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs channels {C}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return apply_op(out, (x, gain, bias), back)


# ----------------------------------------------------------------- convolution

_SLAB_ELEMENTS = 1 << 24


def _conv_geometry(shape, k, stride, padding):
    outs = []
    for n in shape:
        o = (n + 2 * padding - k) // stride + 1
        if n + 2 * padding < k:
            raise ShapeError(f"conv3d: kernel {k} larger than padded extent {n + 2 * padding}")
        outs.append(o)
    return tuple(outs)


def conv3d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 3D convolution (im2col lowering in slabs along the first axis).

    ``x`` is ``(X, Y, Z, Cin)``, ``weight`` is ``(k, k, k, Cin, Cout)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 5:
        raise ShapeError(f"conv3d: expected (X,Y,Z,C) input and 5-d kernel, got {x.shape}, {weight.shape}")
    k, cin, cout = weight.shape[0], weight.shape[3], weight.shape[4]
    if weight.shape[:3] != (k, k, k) or x.shape[3] != cin:
        raise ShapeError(f"conv3d: kernel {weight.shape} does not match input {x.shape}")
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv3d: bias {bias.shape} vs {cout} output channels")
        parents.append(bias)
    Xo, Yo, Zo = _conv_geometry(x.shape[:3], k, stride, padding)
    wmat = weight.data.reshape(k * k * k * cin, cout)

    if k == 1 and stride == 1 and padding == 0:
        flat = x.data.reshape(-1, cin)
        out = flat @ wmat
        if bias is not None:
            out += bias.data

        def back1(g):
            g2 = g.reshape(-1, cout)
            gx = (g2 @ wmat.T).reshape(x.shape) if x.requires_grad else None
            gw = (flat.T @ g2).reshape(weight.shape) if weight.requires_grad else None
            return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

        return apply_op(out.reshape(Xo, Yo, Zo, cout), parents, back1)

    p = padding
    xp = np.pad(x.data, ((p, p), (p, p), (p, p), (0, 0))) if p else x.data
    xp = np.ascontiguousarray(xp)
    row_len = k * k * k * cin
    step = max(1, _SLAB_ELEMENTS // max(1, Yo * Zo * row_len))
    slabs = [(s, min(Xo, s + step)) for s in range(0, Xo, step)]
    out = np.empty((Xo, Yo, Zo, cout), dtype=x.data.dtype)
    for x0, x1 in slabs:
        col = np.empty(((x1 - x0) * Yo * Zo, row_len), dtype=x.data.dtype)
        _kernels.im2col(xp, k, stride, x0, x1, Yo, Zo, col)
        out[x0:x1] = (col @ wmat).reshape(x1 - x0, Yo, Zo, cout)
    if bias is not None:
        out += bias.data

    def back(g):
        g = np.ascontiguousarray(g)
        gw = np.zeros_like(wmat) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for x0, x1 in slabs:
            g2 = g[x0:x1].reshape(-1, cout)
            if gw is not None:
                col = np.empty(((x1 - x0) * Yo * Zo, row_len), dtype=xp.dtype)
                _kernels.im2col(xp, k, stride, x0, x1, Yo, Zo, col)
                gw += col.T @ g2
            if gxp is not None:
                gcol = np.ascontiguousarray(g2 @ wmat.T)
                _kernels.col2im(gcol, k, stride, x0, x1, Yo, Zo, gxp)
        gx = None
        if gxp is not None:
            gx = gxp[p:p + x.shape[0], p:p + x.shape[1], p:p + x.shape[2]] if p else gxp
            gx = np.ascontiguousarray(gx)
        gw = gw.reshape(weight.shape) if gw is not None else None
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, cout).sum(axis=0)

    return apply_op(out, parents, back)


# ----------------------------------------------------------------- spatial filters

def _box_sum_array(a, radius):
    """Sum over a (2r+1)^3 cube cropped at the borders, along the first 3 axes."""
    out = a
    for axis in range(3):
        n = out.shape[axis]
        c = np.cumsum(out, axis=axis, dtype=out.dtype)
        zero_shape = list(out.shape)
        zero_shape[axis] = 1
        c = np.concatenate([np.zeros(zero_shape, dtype=out.dtype), c], axis=axis)
        hi = np.minimum(np.arange(n) + radius + 1, n)
        lo = np.maximum(np.arange(n) - radius, 0)
        out = np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)
    return out


def box_sum(x, radius: int) -> Tensor:
    """Cube sum of side ``2*radius+1`` over the three leading axes, cropped at borders.

    The cropped box operator is symmetric, so the backward pass is the same filter.
    """
    x = as_tensor(x)
    return apply_op(_box_sum_array(x.data, radius), (x,), lambda g: (_box_sum_array(g, radius),))


def box_count(shape, radius: int) -> np.ndarray:
    """Number of voxels inside each cropped cube for a grid of ``shape``."""
    counts = np.ones(tuple(shape[:3]), dtype=_DTYPE)
    return _box_sum_array(counts, radius)


def _upsample_axis(a, axis):
    n = a.shape[axis]
    prev = np.take(a, np.maximum(np.arange(n) - 1, 0), axis=axis)
    nxt = np.take(a, np.minimum(np.arange(n) + 1, n - 1), axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _upsample_axis_adjoint(g, axis):
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    even = np.take(g, 0, axis=axis + 1)
    odd = np.take(g, 1, axis=axis + 1)
    out = 0.75 * (even + odd)
    idx = np.arange(n)
    np.add.at(np.moveaxis(out, axis, 0), np.maximum(idx - 1, 0), np.moveaxis(0.25 * even, axis, 0))
    np.add.at(np.moveaxis(out, axis, 0), np.minimum(idx + 1, n - 1), np.moveaxis(0.25 * odd, axis, 0))
    return out


def upsample_trilinear2x(x) -> Tensor:
    """Factor-2 trilinear upsampling of ``(X, Y, Z, C)`` (half-pixel centers, edge clamp)."""
    x = as_tensor(x)
    out = x.data
    for axis in range(3):
        out = _upsample_axis(out, axis)

    def back(g):
        for axis in (2, 1, 0):
            g = _upsample_axis_adjoint(g, axis)
        return (np.ascontiguousarray(g),)

    return apply_op(np.ascontiguousarray(out), (x,), back)


# ----------------------------------------------------------------- gradient checking

def grad_check(f: Callable[[Tensor], Tensor], x, eps: Optional[float] = None) -> float:
    """Max over coordinates of ``|analytic - central| / (|analytic| + |central| + 1e-8)``.

    ``f`` maps a tensor to a scalar tensor. ``eps`` defaults to 1e-3 in 32-bit
    mode and 1e-6 in 64-bit mode.
    """
    if eps is None:
        eps = 1e-3 if _DTYPE == np.float32 else 1e-6
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=_DTYPE)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    central = np.zeros(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(Tensor(base)).item()
        flat[i] = keep - eps
        lo = f(Tensor(base)).item()
        flat[i] = keep
        central[i] = (hi - lo) / (2 * eps)
    a = analytic.reshape(-1).astype(np.float64)
    return float(np.max(np.abs(a - central) / (np.abs(a) + np.abs(central) + 1e-8)))
