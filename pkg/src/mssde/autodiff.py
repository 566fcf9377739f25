"""Reverse-mode automatic differentiation on dense float64 arrays.

A dynamic tape: every operation records its inputs and a backward closure.
Calling ``backward()`` on a scalar loss walks the tape in reverse topological
order and accumulates exact gradients into every reachable leaf.

Sized for small convolutional/MLP models (~10^6 parameters, CPU only).
All arithmetic is float64; reductions use numpy's fixed deterministic order.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation's input shapes are inconsistent; names the op."""


class GradientError(RuntimeError):
    """Raised on invalid backward calls (non-scalar loss, detached graph)."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (fast inference path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(x):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, _op=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name
        self.op = _op

    # -- basic protocol -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op})"

    def __len__(self):
        return len(self.data)

    # -- backward pass ------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise GradientError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("loss does not depend on any differentiable leaf")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def _accum(self, grad):
        # accumulation is out-of-place so stored grads are never mutated
        self.grad = grad if self.grad is None else self.grad + grad

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_(other, -1.0))
        return mul(self, 1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return mul(pow_(self, -1.0), other)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return sum_(self, axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def transpose(self, axes=None):
        return transpose(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _make(data, parents, backward, op):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    out.requires_grad = req
    if req:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
        out.op = op
    return out


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# -- elementwise and linear primitives ---------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd, "add")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd, "mul")


def pow_(a, p):
    a = _wrap(a)
    p = float(p)
    data = a.data**p

    def bwd(g):
        a._accum(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), bwd, "pow")


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)

    def bwd(g):
        a._accum(g * data)

    return _make(data, (a,), bwd, "exp")


def log(a):
    a = _wrap(a)
    data = np.log(a.data)

    def bwd(g):
        a._accum(g / a.data)

    return _make(data, (a,), bwd, "log")


def sqrt(a):
    a = _wrap(a)
    data = np.sqrt(a.data)

    def bwd(g):
        a._accum(g * 0.5 / data)

    return _make(data, (a,), bwd, "sqrt")


def softplus(a):
    """log(1 + exp(x)), numerically stable; maps reals to positives."""
    a = _wrap(a)
    data = np.logaddexp(0.0, a.data)

    def bwd(g):
        a._accum(g * _sigmoid(a.data))

    return _make(data, (a,), bwd, "softplus")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def leaky_relu(a, slope=0.01):
    a = _wrap(a)
    data = np.where(a.data >= 0, a.data, slope * a.data)

    def bwd(g):
        a._accum(g * np.where(a.data >= 0, 1.0, slope))

    return _make(data, (a,), bwd, "leaky_relu")


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), bwd, "sum")


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.ndim == 1 and b.ndim == 1:
            if a.requires_grad:
                a._accum(g * b.data)
            if b.requires_grad:
                b._accum(g * a.data)
            return
        ga = gb = None
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(g, a.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
        elif a.ndim == 1:
            ga = g @ b.data.swapaxes(-1, -2)
            gb = np.multiply.outer(a.data, g)
        else:
            ga = g @ b.data.swapaxes(-1, -2)
            gb = a.data.swapaxes(-1, -2) @ g
        if a.requires_grad:
            a._accum(_unbroadcast(np.asarray(ga), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.asarray(gb), b.shape))

    return _make(data, (a, b), bwd, "matmul")


def reshape(a, shape):
    a = _wrap(a)
    data = a.data.reshape(shape)

    def bwd(g):
        a._accum(g.reshape(a.shape))

    return _make(data, (a,), bwd, "reshape")


def transpose(a, axes=None):
    a = _wrap(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        a._accum(g.transpose(inv))

    return _make(data, (a,), bwd, "transpose")


def getitem(a, idx):
    a = _wrap(a)
    data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(data, (a,), bwd, "getitem")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(data, tuple(tensors), bwd, "concat")


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), bwd, "stack")


# -- convolution primitives ---------------------------------------------------
#
# Layout is channels-first with a mandatory batch axis: [B, C, n] in 1D and
# [B, C, H, W] in 2D. Transposed convolutions are the *exact adjoints* of the
# corresponding convolutions (same kernel, stride, padding mode), so
# <conv(x), y> == <x, conv_t(y)> holds to machine precision by construction.


def _conv_indices_1d(n, k, stride, mode):
    pad = (k - 1) // 2
    if mode == "circular":
        if n % stride != 0:
            raise ShapeError(f"conv1d: circular padding needs stride {stride} | length {n}")
        n_out = n // stride
        j = np.arange(n_out)[:, None] * stride
        idx = (j + np.arange(k)[None, :] - pad) % n
        return idx, n_out, 0
    elif mode == "zero":
        n_out = (n + 2 * pad - k) // stride + 1
        j = np.arange(n_out)[:, None] * stride
        idx = j + np.arange(k)[None, :]  # indexes the padded signal
        return idx, n_out, pad
    raise ValueError(f"unknown padding mode {mode!r}")


def _scatter_last(shape_last, idx, updates):
    """Scatter-add `updates[..., j, k]` into a zeroed last axis of size `shape_last`."""
    lead = updates.shape[: updates.ndim - idx.ndim]
    out = np.zeros(lead + (shape_last,))
    moved = np.moveaxis(updates.reshape(lead + (idx.size,)), -1, 0)
    tgt = np.moveaxis(out, -1, 0)
    np.add.at(tgt, idx.ravel(), moved)
    return out


def conv1d(x, w, bias=None, stride=1, mode="circular"):
    """Multi-channel 1D convolution. x: [B,C_in,n], w: [C_out,C_in,K]."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: x {x.shape} vs w {w.shape}")
    n, k = x.shape[2], w.shape[2]
    idx, n_out, pad = _conv_indices_1d(n, k, stride, mode)
    xin = x.data if mode == "circular" else np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    col = xin[:, :, idx]  # [B, C_in, n_out, K]
    data = np.einsum("ock,bcjk->boj", w.data, col, optimize=True)
    b = _wrap(bias) if bias is not None else None
    if b is not None:
        data = data + b.data[None, :, None]

    def bwd(g):
        if w.requires_grad:
            w._accum(np.einsum("boj,bcjk->ock", g, col, optimize=True))
        if x.requires_grad:
            dcol = np.einsum("ock,boj->bcjk", w.data, g, optimize=True)
            dxp = _scatter_last(xin.shape[2], idx, dcol)
            x._accum(dxp if mode == "circular" else dxp[:, :, pad : pad + n])
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, bwd, "conv1d")


def conv_transpose1d(y, w, n, bias=None, stride=1, mode="circular"):
    """Exact adjoint of conv1d(..., stride, mode) mapping [B,C_out,n_out] -> [B,C_in,n]."""
    y, w = _wrap(y), _wrap(w)
    k = w.shape[2]
    idx, n_out, pad = _conv_indices_1d(n, k, stride, mode)
    if y.shape[2] != n_out or y.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose1d: y {y.shape} incompatible with n={n}, w {w.shape}")
    n_in = n if mode == "circular" else n + 2 * pad
    dcol = np.einsum("ock,boj->bcjk", w.data, y.data, optimize=True)
    full = _scatter_last(n_in, idx, dcol)
    data = full if mode == "circular" else full[:, :, pad : pad + n]
    b = _wrap(bias) if bias is not None else None
    if b is not None:
        data = data + b.data[None, :, None]

    def bwd(g):
        gin = g if mode == "circular" else np.pad(g, ((0, 0), (0, 0), (pad, pad)))
        gcol = gin[:, :, idx]
        if y.requires_grad:
            y._accum(np.einsum("ock,bcjk->boj", w.data, gcol, optimize=True))
        if w.requires_grad:
            w._accum(np.einsum("boj,bcjk->ock", y.data, gcol, optimize=True))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2)))

    parents = (y, w) if b is None else (y, w, b)
    return _make(data, parents, bwd, "conv_transpose1d")


def _conv_setup_2d(hw, w_shape, stride, mode):
    h, wd = hw
    kh, kw = w_shape[2], w_shape[3]
    ih, ho, ph = _conv_indices_1d(h, kh, stride, mode)
    iw, wo, pw = _conv_indices_1d(wd, kw, stride, mode)
    hp, wp = h + 2 * ph, wd + 2 * pw
    # combined linear index into the (padded) flattened spatial plane
    lin = (ih[:, None, :, None] * (wp if mode == "zero" else wd)) + iw[None, :, None, :]
    return ih, iw, lin, ho, wo, ph, pw, hp, wp


def conv2d(x, w, bias=None, stride=1, mode="circular"):
    """2D convolution. x: [B,C_in,H,W], w: [C_out,C_in,KH,KW]."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape} vs w {w.shape}")
    h, wd = x.shape[2], x.shape[3]
    ih, iw, lin, ho, wo, ph, pw, hp, wp = _conv_setup_2d((h, wd), w.shape, stride, mode)
    if mode == "zero":
        xin = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))).reshape(x.shape[0], x.shape[1], -1)
        plane = hp * wp
    else:
        xin = x.data.reshape(x.shape[0], x.shape[1], -1)
        plane = h * wd
    col = xin[:, :, lin]  # [B, C_in, Ho, Wo, KH, KW]
    data = np.einsum("ockl,bchwkl->bohw", w.data, col, optimize=True)
    b = _wrap(bias) if bias is not None else None
    if b is not None:
        data = data + b.data[None, :, None, None]

    def bwd(g):
        if w.requires_grad:
            w._accum(np.einsum("bohw,bchwkl->ockl", g, col, optimize=True))
        if x.requires_grad:
            dcol = np.einsum("ockl,bohw->bchwkl", w.data, g, optimize=True)
            dflat = _scatter_last(plane, lin, dcol)
            if mode == "zero":
                dpad = dflat.reshape(x.shape[0], x.shape[1], hp, wp)
                x._accum(dpad[:, :, ph : ph + h, pw : pw + wd])
            else:
                x._accum(dflat.reshape(x.shape))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, bwd, "conv2d")


def conv_transpose2d(y, w, hw, bias=None, stride=1, mode="circular"):
    """Exact adjoint of conv2d mapping [B,C_out,Ho,Wo] -> [B,C_in,H,W]."""
    y, w = _wrap(y), _wrap(w)
    h, wd = hw
    ih, iw, lin, ho, wo, ph, pw, hp, wp = _conv_setup_2d((h, wd), w.shape, stride, mode)
    if y.shape[2] != ho or y.shape[3] != wo or y.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: y {y.shape} incompatible with hw={hw}, w {w.shape}")
    plane = hp * wp if mode == "zero" else h * wd
    dcol = np.einsum("ockl,bohw->bchwkl", w.data, y.data, optimize=True)
    dflat = _scatter_last(plane, lin, dcol)
    if mode == "zero":
        data = dflat.reshape(y.shape[0], w.shape[1], hp, wp)[:, :, ph : ph + h, pw : pw + wd]
    else:
        data = dflat.reshape(y.shape[0], w.shape[1], h, wd)
    b = _wrap(bias) if bias is not None else None
    if b is not None:
        data = data + b.data[None, :, None, None]

    def bwd(g):
        if mode == "zero":
            gin = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))).reshape(g.shape[0], g.shape[1], -1)
        else:
            gin = g.reshape(g.shape[0], g.shape[1], -1)
        gcol = gin[:, :, lin]
        if y.requires_grad:
            y._accum(np.einsum("ockl,bchwkl->bohw", w.data, gcol, optimize=True))
        if w.requires_grad:
            w._accum(np.einsum("bohw,bchwkl->ockl", y.data, gcol, optimize=True))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))

    parents = (y, w) if b is None else (y, w, b)
    return _make(data, parents, bwd, "conv_transpose2d")
