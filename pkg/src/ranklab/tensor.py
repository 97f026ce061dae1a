"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op records its inputs and a closure mapping the output
gradient to input gradients. ``backward`` sorts the recorded graph
topologically (the sorted node list is the tape) and walks it once in
reverse, accumulating into the ``grad`` of each leaf that requires it.

Conventions:

* subgradient of ``relu``/``hinge`` at exactly 0 is 0;
* distance-like ops (``norm``, ``pairwise_distance``) use subgradient 0
  where the distance is exactly 0;
* ``backward`` refuses to overwrite a populated leaf gradient, so training
  loops must call ``zero_grad`` between steps.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateInputError, DimensionError, GradientError


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An ndarray of float64 plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_spent")
    __array_ufunc__ = None  # ndarray <op> Tensor dispatches to the Tensor's reflected op

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._spent = False

    # --- introspection -------------------------------------------------
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
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    # --- graph construction ---------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op):
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data, op=op)
        return Tensor(data, True, tuple(parents), backward, op)

    def backward(self):
        backward(self)

    # --- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None):
        return tmax(self, axis)

    def min(self, axis=None):
        return -tmax(-self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def topological_order(root):
    """Nodes reachable from ``root`` that require grad, inputs first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward() needs a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise GradientError("backward() already ran on this graph")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    stale = [n for n in order if n.is_leaf and n.grad is not None]
    if stale:
        raise GradientError(f"{len(stale)} leaf gradient(s) already populated; call zero_grad() first")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    loss._spent = True


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


# --- elementwise -------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def _bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)
    return Tensor._make(out, (a, b), _bw, "div")


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    ad = a.data
    return Tensor._make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a):
    """Square root; the gradient at exactly 0 is taken as 0 (not inf)."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def _bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)
    return Tensor._make(out, (a,), _bw, "sqrt")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def hinge(a):
    """``[a]_+ = max(0, a)`` with subgradient 0 at the kink."""
    return relu(a)


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    mask = np.ones_like(x, dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    return Tensor._make(out, (a,), lambda g: (g * mask,), "clamp")


def sign(a):
    """Forward-only: the result never carries gradient."""
    return Tensor(np.sign(as_tensor(a).data), op="sign")


# --- reductions and shape ---------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return Tensor._make(out, (a,), _bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis=None):
    """Max reduction; gradient goes to the first maximal element only."""
    a = as_tensor(a)
    x = a.data
    if axis is None:
        flat = int(np.argmax(x))
        out = x.reshape(-1)[flat]

        def _bw(g):
            gx = np.zeros_like(x)
            gx.reshape(-1)[flat] = g
            return (gx,)
        return Tensor._make(out, (a,), _bw, "max")
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    out = np.take_along_axis(x, idx, axis=axis).squeeze(axis)

    def _bw(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)
    return Tensor._make(out, (a,), _bw, "max")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def take(a, index):
    """Basic or fancy indexing; gradients scatter-add back to the source."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    out = a.data[index]
    shape = a.shape

    def _bw(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)
    return Tensor._make(np.array(out, copy=True), (a,), _bw, "take")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# --- linear algebra ---------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv2d(x, k, stride=1):
    """Valid (unpadded) cross-correlation.

    ``x`` is ``(C, H, W)`` or batched ``(N, C, H, W)``; ``k`` is
    ``(F, C, kh, kw)``. Output spatial size is ``(H - kh) // stride + 1``.
    """
    x, k = as_tensor(x), as_tensor(k)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects (N,)C,H,W input and F,C,kh,kw kernel, got {x.shape}, {k.shape}")
    n, c, h, w = xd.shape
    f, kc, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    kd = k.data
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # im2col rows are (n, i, j) output positions, columns are (c, di, dj)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kmat = kd.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def _bw(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = (gmat.T @ cols).reshape(kd.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
            gx = np.zeros_like(xd)
            hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + hi:stride, j:j + wi:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if single:
                gx = gx[0]
        return gx, gk
    return Tensor._make(np.ascontiguousarray(out[0] if single else out), (x, k), _bw, "conv2d")


def maxpool2d(x, size=2):
    """Non-overlapping max pooling over the last two axes (trailing rows/cols dropped)."""
    x = as_tensor(x)
    xd = x.data
    h, w = xd.shape[-2:]
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"maxpool2d window {size} larger than input {h}x{w}")
    lead = xd.shape[:-2]
    crop = xd[..., :ho * size, :wo * size]
    win = crop.reshape(*lead, ho, size, wo, size).swapaxes(-3, -2).reshape(*lead, ho, wo, size * size)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gc = gw.reshape(*lead, ho, wo, size, size).swapaxes(-3, -2).reshape(*lead, ho * size, wo * size)
        gx = np.zeros_like(xd)
        gx[..., :ho * size, :wo * size] = gc
        return (gx,)
    return Tensor._make(out, (x,), _bw, "maxpool2d")


def l2_normalize(v, axis=-1):
    """Project onto the unit sphere along ``axis``; zero vectors are rejected."""
    v = as_tensor(v)
    vd = v.data
    nrm = np.sqrt((vd * vd).sum(axis=axis, keepdims=True))
    if np.any(nrm == 0):
        raise DegenerateInputError("l2_normalize of a zero vector")
    y = vd / nrm

    def _bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / nrm,)
    return Tensor._make(y, (v,), _bw, "l2_normalize")


def norm(x, axis=-1):
    """Euclidean norm along ``axis`` (subgradient 0 at the origin)."""
    x = as_tensor(x)
    xd = x.data
    out = np.sqrt((xd * xd).sum(axis=axis))

    def _bw(g):
        o = np.expand_dims(out, axis)
        scale = np.where(o > 0, np.expand_dims(g, axis) / np.where(o > 0, o, 1.0), 0.0)
        return (xd * scale,)
    return Tensor._make(out, (x,), _bw, "norm")


def pairwise_distance(a, b):
    """Euclidean distance matrix between rows of ``a`` (N, D) and ``b`` (M, D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_distance expects (N,D) and (M,D), got {a.shape}, {b.shape}")
    ad, bd = a.data, b.data
    sq = (ad * ad).sum(1)[:, None] + (bd * bd).sum(1)[None, :] - 2.0 * ad @ bd.T
    out = np.sqrt(np.maximum(sq, 0.0))

    def _bw(g):
        w = np.where(out > 0, g / np.where(out > 0, out, 1.0), 0.0)
        ga = ad * w.sum(1)[:, None] - w @ bd if a.requires_grad else None
        gb = bd * w.sum(0)[:, None] - w.T @ ad if b.requires_grad else None
        return ga, gb
    return Tensor._make(out, (a, b), _bw, "pairwise_distance")


def row_distance(a, b):
    """Distance between matching rows: ``||a_i - b_i||``."""
    return norm(sub(a, b), axis=-1)
