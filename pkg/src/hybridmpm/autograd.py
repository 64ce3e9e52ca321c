"""A small reverse-mode gradient engine covering the layers of the pressure
surrogate: 3D convolution, stride-2 transposed convolution, pointwise
nonlinearities, slicing and the robust regression losses.

Arrays keep whatever float dtype they were created with, so the same graph
can be evaluated in float32 for training and float64 for finite-difference
checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # 0-d arithmetic yields numpy scalars; keep their precision
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, name={self.name})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse sweep over the graph ending at this tensor."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, rg, parents if rg else (), backward if rg else None)


def parameter(data, name=None):
    return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _wrap(a), _wrap(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def leaky_relu(x, slope=0.1):
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.data.dtype)

    def backward(g):
        x._accumulate(g * scale)

    return _make(x.data * scale, (x,), backward)


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), backward)


def tanh(x):
    out = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return _make(out, (x,), backward)


def getitem(x, key):
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        x._accumulate(full)

    return _make(np.ascontiguousarray(x.data[key]), (x,), backward)


def reshape(x, shape):
    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def stack(tensors, axis=0):
    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def total(x):
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


# ---------------------------------------------------------------- convolution

def _im2col(xp, stride, out_shape):
    """(B, C, Dp, Hp, Wp) padded input -> (C*27, B*N) columns for a 3^3 kernel."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, : out_shape[0], : out_shape[1], : out_shape[2]]
    return np.ascontiguousarray(win.transpose(1, 5, 6, 7, 0, 2, 3, 4)).reshape(c * 27, -1)


def conv_out_size(n, stride):
    return (n - 1) // stride + 1


def conv3d(x, w, b=None, stride=1):
    """3x3x3 convolution with one cell of zero padding per side.

    x: (B, C, D, H, W); w: (O, C, 3, 3, 3); b: (O,) or None.
    """
    bsz, c, d, h, wd = x.data.shape
    o = w.data.shape[0]
    if w.data.shape[1] != c:
        raise ValueError(f"conv3d: input has {c} channels, kernel expects {w.data.shape[1]}")
    if stride == 1:
        return _conv3d_flat(x, w, b)
    out_shape = tuple(conv_out_size(n, stride) for n in (d, h, wd))
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, out_shape)
    wm = w.data.reshape(o, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(o, bsz, *out_shape).transpose(1, 0, 2, 3, 4)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(o, -1)
        if w.requires_grad:
            w._accumulate((gm @ cols.T).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(gm.sum(axis=1))
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape(c, 3, 3, 3, bsz, *out_shape)
            dxp = np.zeros_like(xp)
            s = stride
            for ka in range(3):
                for kb in range(3):
                    for kc in range(3):
                        dxp[:, :, ka: ka + s * out_shape[0]: s,
                            kb: kb + s * out_shape[1]: s,
                            kc: kc + s * out_shape[2]: s] += dcols[:, ka, kb, kc].transpose(1, 0, 2, 3, 4)
            x._accumulate(dxp[:, :, 1:-1, 1:-1, 1:-1])

    return _make(np.ascontiguousarray(out), parents, backward)


def _conv3d_flat(x, w, b):
    """Stride-1 path: every kernel tap is a fixed offset into the flattened
    padded volume, so each tap is one matmul over a contiguous window."""
    bsz, c, d, h, wd = x.data.shape
    o = w.data.shape[0]
    dp, hp, wp = d + 2, h + 2, wd + 2
    xp = np.zeros((c, bsz, dp, hp, wp), dtype=x.data.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x.data.transpose(1, 0, 2, 3, 4)
    xf = xp.reshape(c, -1)
    lo = hp * wp + wp + 1
    span = xf.shape[1] - 2 * lo
    offsets = [(ka - 1) * hp * wp + (kb - 1) * wp + (kc - 1)
               for ka in range(3) for kb in range(3) for kc in range(3)]
    taps = np.ascontiguousarray(w.data.reshape(o, c, 27).transpose(2, 0, 1))
    acc = np.zeros((o, span), dtype=x.data.dtype)
    for t, off in enumerate(offsets):
        acc += taps[t] @ xf[:, lo + off: lo + off + span]
    full = np.zeros((o, xf.shape[1]), dtype=x.data.dtype)
    full[:, lo: lo + span] = acc
    out = full.reshape(o, bsz, dp, hp, wp)[:, :, 1:-1, 1:-1, 1:-1].transpose(1, 0, 2, 3, 4)
    if b is not None:
        out = out + b.data[None, :, None, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gp = np.zeros((o, bsz, dp, hp, wp), dtype=g.dtype)
        gp[:, :, 1:-1, 1:-1, 1:-1] = g.transpose(1, 0, 2, 3, 4)
        gf = gp.reshape(o, -1)[:, lo: lo + span]
        if w.requires_grad:
            gw = np.empty((27, o, c), dtype=g.dtype)
            for t, off in enumerate(offsets):
                gw[t] = gf @ xf[:, lo + off: lo + off + span].T
            w._accumulate(gw.transpose(1, 2, 0).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            gx = np.zeros_like(xf)
            for t, off in enumerate(offsets):
                gx[:, lo + off: lo + off + span] += taps[t].T @ gf
            gx = gx.reshape(c, bsz, dp, hp, wp)[:, :, 1:-1, 1:-1, 1:-1]
            x._accumulate(gx.transpose(1, 0, 2, 3, 4))

    return _make(np.ascontiguousarray(out), parents, backward)


def conv_transpose3d(x, w, b=None):
    """Stride-2, kernel-2 transposed convolution (exact x2 upsampling).

    x: (B, C, D, H, W); w: (C, O, 2, 2, 2) -> (B, O, 2D, 2H, 2W).
    """
    bsz, c, d, h, wd = x.data.shape
    o = w.data.shape[1]
    if w.data.shape[0] != c:
        raise ValueError(f"conv_transpose3d: input has {c} channels, kernel expects {w.data.shape[0]}")
    wm = w.data.reshape(c, o * 8)
    xm = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4)).reshape(c, -1)
    y = (wm.T @ xm).reshape(o, 2, 2, 2, bsz, d, h, wd)
    out = y.transpose(4, 0, 5, 1, 6, 2, 7, 3).reshape(bsz, o, 2 * d, 2 * h, 2 * wd)
    if b is not None:
        out = out + b.data[None, :, None, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.reshape(bsz, o, d, 2, h, 2, wd, 2).transpose(1, 3, 5, 7, 0, 2, 4, 6)
        gm = np.ascontiguousarray(gm).reshape(o * 8, -1)
        if w.requires_grad:
            w._accumulate((xm @ gm.T).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            x._accumulate((wm @ gm).reshape(c, bsz, d, h, wd).transpose(1, 0, 2, 3, 4))

    return _make(np.ascontiguousarray(out), parents, backward)


# ---------------------------------------------------------------- losses

def spatial_diff(x, axis):
    """Forward difference along a spatial axis; the far face holds a zero."""
    xd = x.data
    out = np.zeros_like(xd)
    lo = [slice(None)] * xd.ndim
    hi = [slice(None)] * xd.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    lo, hi = tuple(lo), tuple(hi)
    out[lo] = xd[hi] - xd[lo]

    def backward(g):
        gx = np.zeros_like(xd)
        gx[hi] += g[lo]
        gx[lo] -= g[lo]
        x._accumulate(gx)

    return _make(out, (x,), backward)


def _pointwise_loss(pred, target, kind, delta):
    pred = _wrap(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    r = pred.data - t
    n = r.size
    a = np.abs(r)
    if kind == "huber":
        quad = a <= delta
        val = np.where(quad, 0.5 * r * r, delta * a - 0.5 * delta * delta).sum() / n
        dr = np.where(quad, r, delta * np.sign(r)) / n
    elif kind == "mse":
        val = 0.5 * (r * r).sum() / n
        dr = r / n
    elif kind == "mae":
        val = a.sum() / n
        dr = np.sign(r) / n
    else:
        raise ValueError(f"unknown loss {kind!r}")
    tgt = target if isinstance(target, Tensor) else None
    parents = (pred,) if tgt is None else (pred, tgt)

    def backward(g):
        if pred.requires_grad:
            pred._accumulate(g * dr)
        if tgt is not None and tgt.requires_grad:
            tgt._accumulate(-g * dr)

    return _make(np.asarray(val, dtype=pred.data.dtype), parents, backward)


def huber(pred, target, delta=1.0):
    """Mean elementwise Huber loss; ``target`` may be a Tensor or an array."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if np.shape(getattr(target, "data", target)) != pred.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {np.shape(getattr(target, 'data', target))}")
    return _pointwise_loss(pred, target, "huber", delta)


def pointwise_loss(pred, target, kind="huber", delta=1.0):
    if np.shape(getattr(target, "data", target)) != pred.shape:
        raise ValueError("shape mismatch")
    return _pointwise_loss(pred, target, kind, delta)
