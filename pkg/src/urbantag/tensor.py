"""Dense tensors with reverse-mode automatic differentiation on numpy.

Every primitive records itself on an implicit tape (parent links plus a
backward closure). ``backward`` on a scalar walks the tape once in reverse
topological order and accumulates gradients into every tensor that
requires them. No primitive mutates its inputs; reductions are plain
sequential numpy reductions, so results are reproducible bit for bit.

Training math runs in float32; the gradient-check suite builds the same
graphs in float64 (the dtype of the data arrays is simply preserved).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._bwd = None

    # -- bookkeeping ------------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Backpropagate from a scalar: visit each tape node exactly once."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar tensor")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                self._acc_into(node, g)
            if node._bwd is not None:
                for parent, pg in node._bwd(g):
                    if pg is None or not (
                        parent.requires_grad or parent._bwd is not None
                    ):
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    @staticmethod
    def _acc_into(node, g):
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take_slice(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def parameter(array):
    return Tensor(np.asarray(array), requires_grad=True)


def _needs_grad(t):
    return t.requires_grad or t._bwd is not None


def _make(data, parents, bwd):
    """Build an output node, attaching the tape edge only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._bwd = bwd
    return out


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g, a.data.shape)),
            (b, _unbroadcast(g, b.data.shape)),
        )

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ((a, ga), (b, gb))

    return _make(data, (a, b), bwd)


def relu(x):
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def bwd(g):
        return ((x, g * (x.data > 0)),)

    return _make(data, (x,), bwd)


def sigmoid(x):
    x = as_tensor(x)
    data = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return ((x, g * data * (1.0 - data)),)

    return _make(data, (x,), bwd)


def tanh(x):
    x = as_tensor(x)
    data = np.tanh(x.data)

    def bwd(g):
        return ((x, g * (1.0 - data * data)),)

    return _make(data, (x,), bwd)


def sin(x):
    x = as_tensor(x)
    data = np.sin(x.data)

    def bwd(g):
        return ((x, g * np.cos(x.data)),)

    return _make(data, (x,), bwd)


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def bwd(g):
        return ((x, g * data),)

    return _make(data, (x,), bwd)


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)

    def bwd(g):
        return ((x, g / x.data),)

    return _make(data, (x,), bwd)


def sqrt(x):
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def bwd(g):
        return ((x, g * 0.5 / data),)

    return _make(data, (x,), bwd)


def clip(x, lo, hi):
    """Clamp values; gradient passes through strictly inside the bounds."""
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)

    def bwd(g):
        return ((x, g * ((x.data > lo) & (x.data < hi))),)

    return _make(data, (x,), bwd)


def softmax(x, axis):
    x = as_tensor(x)
    if x.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((x, (g - dot) * data),)

    return _make(data, (x,), bwd)


# -- reductions and shape ops ------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return ((x, np.broadcast_to(g, x.data.shape).copy()),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.data.shape).copy()),)

    return _make(data, (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in np.atleast_1d(axis)]
    )
    s = tsum(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / float(count))


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        return ((x, g.reshape(x.data.shape)),)

    return _make(data, (x,), bwd)


def transpose(x, axes=None):
    x = as_tensor(x)
    data = x.data.transpose(axes)

    def bwd(g):
        inv = None if axes is None else np.argsort(axes)
        return ((x, g.transpose(inv)),)

    return _make(data, (x,), bwd)


def take_slice(x, idx):
    """Basic (slice/int) indexing; each input cell is read at most once."""
    x = as_tensor(x)
    data = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        return ((x, gx),)

    return _make(data, (x,), bwd)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            outs.append((t, g[tuple(sl)]))
        return tuple(outs)

    return _make(data, tuple(tensors), bwd)


def matmul(a, b):
    """Matrix product with numpy batch broadcasting on leading axes.

    Both operands must be at least 2-D; project with (d, 1) matrices
    instead of bare vectors.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    data = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ((a, ga), (b, gb))

    return _make(data, (a, b), bwd)


# -- structured ops -----------------------------------------------------------


def conv2d(x, w, padding="same"):
    """2-D cross-correlation, stride 1.

    ``x`` is (N, C, H, W), ``w`` is (O, C, kh, kw). Forward runs as a single
    GEMM on an im2col patch matrix; the input gradient is accumulated per
    kernel offset to avoid a scatter.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, c, h, ww = x.data.shape
    o, c2, kh, kw = w.data.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs odd kernel sizes")
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d input smaller than kernel")
    # (N, C, Ho, Wo, kh, kw) view -> (N*Ho*Wo, C*kh*kw) copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw
    )
    data = (cols @ w.data.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gw = None
        if _needs_grad(w):
            gw = (cols.T @ g2).T.reshape(o, c, kh, kw)
        gx = None
        if _needs_grad(x):
            # input grad = full correlation of g with the flipped kernel
            fh, fw = kh - 1 - ph, kw - 1 - pw
            gp = np.pad(g, ((0, 0), (0, 0), (fh, fh), (fw, fw)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gcols = np.ascontiguousarray(gwin.transpose(0, 2, 3, 1, 4, 5)).reshape(
                n * h * ww, o * kh * kw
            )
            wflip = (
                w.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(o * kh * kw, c)
            )
            gx = (gcols @ wflip).reshape(n, h, ww, c).transpose(0, 3, 1, 2)
        return ((x, gx), (w, gw))

    return _make(data, (x, w), bwd)


def max_pool2d(x, pool):
    """Non-overlapping max pooling; spatial dims must divide the pool size.

    Ties inside a window route the gradient to a single (first) winner.
    """
    x = as_tensor(x)
    pt, pf = pool
    n, c, h, w = x.data.shape
    if h % pt or w % pf:
        raise ValueError(f"pool {pool} does not divide spatial dims {(h, w)}")
    ho, wo = h // pt, w // pf
    xr = x.data.reshape(n, c, ho, pt, wo, pf).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, ho, wo, pt * pf)
    idx = xr.argmax(axis=-1)
    data = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gr = np.zeros((n, c, ho, wo, pt * pf), dtype=g.dtype)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        gx = gr.reshape(n, c, ho, wo, pt, pf).transpose(0, 1, 2, 4, 3, 5)
        return ((x, gx.reshape(n, c, h, w)),)

    return _make(data, (x,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gh = g * gamma.data
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return ((x, gx), (gamma, ggamma), (beta, gbeta))

    return _make(data, (x, gamma, beta), bwd)


def embedding_lookup(table, ids):
    """Gather rows of ``table`` (V, D) at integer ``ids``; scatter-add grad."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return ((table, gt),)

    return _make(data, (table,), bwd)
