"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

Everything downstream (warped volumes, network activations, composited
images) is built on the Tensor class here. Values live in contiguous numpy
buffers, float32 by default; gradient-check tests run the same ops in
float64. Ops record closures on their outputs and Tensor.backward() replays
them in reverse topological order, accumulating gradients additively across
fan-out.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


# ---------------------------------------------------------------------------
# FLOP accounting (used by the benchmark harness to cross-check the analytic
# layer cost model; counts convolution multiply-adds and bias adds only).

class FlopCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0
        self.enabled = False

    def add(self, n):
        if self.enabled:
            with self._lock:
                self._count += int(n)

    def reset(self):
        with self._lock:
            self._count = 0

    @property
    def count(self):
        return self._count


flops = FlopCounter()

_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (inference/benchmark path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """n-dimensional array with optional gradient accumulation.

    `data` is always a contiguous numpy array. `grad`, once populated by
    backward(), has the same shape and dtype as `data`. Tensors are
    immutable after creation except through recorded ops; a single backward
    pass is single-writer.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    # -- basic introspection ------------------------------------------------

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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() on tensor of shape {self.shape}")

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            # copy: g may be broadcast-readonly or shared with another parent
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        """Populate grads of everything this scalar depends on."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        GradTape(self).run()

    # -- operator sugar -----------------------------------------------------

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

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def permute(self, *axes):
        return permute(self, *axes)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return tensor_abs(self)


class GradTape:
    """Reverse-topological schedule of the ops reachable from a root tensor.

    Built lazily at backward() time from the parent links the ops recorded;
    running it visits every node exactly once, parents after children, so
    fan-out gradients accumulate additively before being propagated further.
    """

    def __init__(self, root):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root):
        order, visited = [], set()
        stack = [(root, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def run(self):
        self.root.grad = np.ones_like(self.root.data)
        for node in reversed(self.nodes):
            if node._grad_fn is not None:
                node._grad_fn(node.grad)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, grad_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data + b.data

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), grad_fn)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data - b.data

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), grad_fn)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), grad_fn)


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data / b.data

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

    return _make(out_data, (a, b), grad_fn)


def tensor_abs(x):
    out_data = np.abs(x.data)

    def grad_fn(g):
        x._accumulate(g * np.sign(x.data))

    return _make(out_data, (x,), grad_fn)


def relu(x):
    """max(x, 0); subgradient at 0 is 0."""
    out_data = np.maximum(x.data, 0)

    def grad_fn(g):
        x._accumulate(g * (x.data > 0))

    return _make(out_data, (x,), grad_fn)


def sigmoid(x):
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out_data[~pos] = e / (1.0 + e)

    def grad_fn(g):
        x._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), grad_fn)


def softmax(x, axis):
    """Numerically stable softmax along `axis`; rejects NaN input."""
    xd = x.data
    if np.isnan(xd).any():
        raise FloatingPointError("softmax input contains NaN")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return _make(out_data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        x._accumulate(np.broadcast_to(gg, x.shape))

    return _make(np.asarray(out_data), (x,), grad_fn)


def tensor_mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    out_data = x.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gg = g / n
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        x._accumulate(np.broadcast_to(gg, x.shape))

    return _make(np.asarray(out_data), (x,), grad_fn)


# ---------------------------------------------------------------------------
# shape ops (reshape/permute never change the multiset of element values)


def reshape(x, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old_shape = x.shape
    out_data = x.data.reshape(shape)

    def grad_fn(g):
        x._accumulate(g.reshape(old_shape))

    return _make(out_data, (x,), grad_fn)


def permute(x, *axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = np.argsort(axes)
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def grad_fn(g):
        x._accumulate(g.transpose(inv))

    return _make(out_data, (x,), grad_fn)


def broadcast_to(x, shape):
    shape = tuple(shape)
    out_data = np.ascontiguousarray(np.broadcast_to(x.data, shape))

    def grad_fn(g):
        x._accumulate(_unbroadcast(g, x.shape))

    return _make(out_data, (x,), grad_fn)


def getitem(x, key):
    """Basic (slice/int) indexing with gradient scatter into the source."""
    out_data = np.ascontiguousarray(x.data[key])

    def grad_fn(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[key] += g

    return _make(out_data, (x,), grad_fn)


def concat(tensors, axis=0):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(p)

    return _make(out_data, tuple(tensors), grad_fn)


def stack(tensors, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# ---------------------------------------------------------------------------
# convolution


def _shift(sl, offset):
    return slice(sl.start + offset, sl.stop + offset, sl.step)


def conv2d(x, weight, bias=None, stride=1, padding=None):
    """2-D cross-correlation with square odd kernels.

    x: [C_in,H,W] or [N,C_in,H,W]; weight: [C_out,C_in,k,k]; bias: [C_out].
    padding defaults to (k-1)//2 (same padding); stride must be 1 or 2.
    Output size along each spatial axis is (H + 2p - k)//stride + 1.

    Computed as k*k full-plane GEMMs accumulated at shifted offsets, which
    needs no patch gathering (an im2col matrix thrashes the cache at the
    channel counts the single-group configuration reaches).
    """
    squeeze = x.ndim == 3
    x4 = reshape(x, (1,) + x.shape) if squeeze else x
    n, c_in, h, w = x4.shape
    c_out, c_in_w, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got {kh}x{kw}")
    if c_in != c_in_w:
        raise ShapeError(f"conv2d input has {c_in} channels, weight expects {c_in_w}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    k = kh
    p = (k - 1) // 2 if padding is None else int(padding)
    if not 0 <= p <= (k - 1) // 2:
        raise ShapeError(f"padding must be in [0, {(k-1)//2}], got {p}")

    xd = x4.data
    if p:
        xp = np.zeros((c_in, n, h + 2 * p, w + 2 * p), dtype=xd.dtype)
        xp[:, :, p:p + h, p:p + w] = xd.transpose(1, 0, 2, 3)
    else:
        xp = np.ascontiguousarray(xd.transpose(1, 0, 2, 3))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    sl_h = slice(0, stride * (ho - 1) + 1, stride)
    sl_w = slice(0, stride * (wo - 1) + 1, stride)

    xp2 = xp.reshape(c_in, n * hp * wp)
    w_taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))  # [k,k,C_out,C_in]
    acc = np.zeros((c_out, n, ho, wo), dtype=xd.dtype)
    part = np.empty((c_out, n * hp * wp), dtype=xd.dtype)
    for ki in range(k):
        for kj in range(k):
            np.matmul(w_taps[ki, kj], xp2, out=part)
            acc += part.reshape(c_out, n, hp, wp)[:, :, _shift(sl_h, ki), _shift(sl_w, kj)]
    flops.add(2 * c_out * c_in * k * k * n * ho * wo)
    if bias is not None:
        acc += bias.data[:, None, None, None]
        flops.add(c_out * n * ho * wo)
    out_data = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    parents = (x4, weight) if bias is None else (x4, weight, bias)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, n * ho * wo)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for ki in range(k):
                for kj in range(k):
                    taps = np.ascontiguousarray(
                        xp[:, :, _shift(sl_h, ki), _shift(sl_w, kj)]).reshape(c_in, -1)
                    dw[:, :, ki, kj] = g2 @ taps.T
            weight._accumulate(dw)
        if x4.requires_grad:
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    back = (w_taps[ki, kj].T @ g2).reshape(c_in, n, ho, wo)
                    dxp[:, :, _shift(sl_h, ki), _shift(sl_w, kj)] += back
            dx = dxp[:, :, p:hp - p or None, p:wp - p or None]
            x4._accumulate(np.ascontiguousarray(dx.transpose(1, 0, 2, 3)))

    out = _make(out_data, parents, grad_fn)
    return reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# 2x upsampling


def _up2_indices(n, dtype):
    # half-pixel-center mapping: src = (dst + 0.5)/2 - 0.5, edges clamped
    src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src)
    f = (src - i0).astype(dtype)
    i0 = i0.astype(np.int64)
    i1 = np.clip(i0 + 1, 0, n - 1)
    i0 = np.clip(i0, 0, n - 1)
    return i0, i1, f


def upsample2x(x, mode="bilinear"):
    """Double both spatial extents of [...,H,W] (rank 3 or 4).

    bilinear uses half-pixel centers with clamped borders; nearest
    replicates each pixel into a 2x2 block. Both preserve constant images
    exactly (interpolation is computed as a + f*(b-a)).
    """
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown upsample mode {mode!r}")
    h, w = x.shape[-2], x.shape[-1]

    if mode == "nearest":
        out_data = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

        def grad_fn(g):
            gs = g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1))
            x._accumulate(gs)

        return _make(np.ascontiguousarray(out_data), (x,), grad_fn)

    y0, y1, fy = _up2_indices(h, x.dtype.type)
    x0, x1, fx = _up2_indices(w, x.dtype.type)
    xd = x.data
    r0 = xd[..., y0, :]
    r1 = xd[..., y1, :]
    rows = r0 + fy[:, None] * (r1 - r0)          # [..., 2H, W]
    c0 = rows[..., :, x0]
    c1 = rows[..., :, x1]
    out_data = c0 + fx * (c1 - c0)               # [..., 2H, 2W]

    def grad_fn(g):
        x._accumulate(_up2_adjoint_rows(_up2_adjoint_cols(g)))

    return _make(np.ascontiguousarray(out_data), (x,), grad_fn)


def _up2_adjoint_cols(g):
    # transpose of the half-pixel 2x interpolation along the last axis:
    # interior input i collects 0.75*(g[2i] + g[2i+1]) + 0.25*(g[2i-1] + g[2i+2]),
    # with the clamped border weights folded into the first/last entries
    ge = g[..., 0::2]
    go = g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return out


def _up2_adjoint_rows(g):
    ge = g[..., 0::2, :]
    go = g[..., 1::2, :]
    out = 0.75 * (ge + go)
    out[..., 0, :] += 0.25 * ge[..., 0, :]
    out[..., :-1, :] += 0.25 * ge[..., 1:, :]
    out[..., 1:, :] += 0.25 * go[..., :-1, :]
    out[..., -1, :] += 0.25 * go[..., -1, :]
    return out
