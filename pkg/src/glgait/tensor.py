"""Dense f32/f64 tensors with reverse-mode automatic differentiation.

The operator set is exactly what the gait backbone needs: batched matmul,
stable softmax, temporal/spatial convolution, ReLU, batch normalisation,
axis pooling and the reshape plumbing around them.  Every differentiable
op records a backward closure on a tape; ``backward`` runs the reverse
pass from a scalar, and ``grad_check`` verifies any scalar function
against central differences.

Tensors are treated as immutable once constructed (the optimiser is the
single writer that updates leaf ``data`` between graph builds), so they
are safe to share read-only across threads.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's shape rule."""


_grad_enabled = True
_checked = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / numeric probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_checked(flag):
    """Toggle NaN/Inf rejection at user-facing tensor construction."""
    global _checked
    prev = _checked
    _checked = bool(flag)
    return prev


def _as_dtype(dtype):
    dt = np.dtype(dtype if dtype is not None else np.float64)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"unsupported dtype {dt}; expected f32 or f64")
    return dt


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=_as_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        if _checked and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values rejected at tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- bookkeeping ---------------------------------------------------

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ValueError(f"expected scalar tensor, got shape {self.shape}")

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- reverse pass ---------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {self.shape}")
        for node in reversed(_toposort(self)):
            if node._backward is not None:
                node._backward(node.grad if node.grad is not None
                               else np.ones_like(node.data))
                node._backward = None
                node._parents = ()

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other, self.dtype))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axis(self, axis, keepdims)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=dtype)
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
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
            if p.requires_grad:
                stack.append((p, False))
    return order


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _check_same_dtype(a, b):
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype.name} vs {b.dtype.name}")


def _unbroadcast(g, shape):
    # inverse of numpy broadcasting: sum the expanded axes back down
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    _check_same_dtype(a, b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), bwd)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    _check_same_dtype(a, b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), bwd)


def div(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    _check_same_dtype(a, b)
    out_data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * out_data / b.data, b.shape))

    return Tensor._from_op(out_data, (a, b), bwd)


def relu(x):
    out_data = np.maximum(x.data, x.dtype.type(0))

    def bwd(g):
        _accum(x, g * (out_data > 0))

    return Tensor._from_op(out_data, (x,), bwd)


def exp(x):
    out_data = np.exp(x.data)

    def bwd(g):
        _accum(x, g * out_data)

    return Tensor._from_op(out_data, (x,), bwd)


def log(x):
    out_data = np.log(x.data)

    def bwd(g):
        _accum(x, g / x.data)

    return Tensor._from_op(out_data, (x,), bwd)


def sqrt(x):
    out_data = np.sqrt(x.data)

    def bwd(g):
        _accum(x, g / (2.0 * out_data))

    return Tensor._from_op(out_data, (x,), bwd)


def square(x):
    out_data = x.data * x.data

    def bwd(g):
        _accum(x, 2.0 * g * x.data)

    return Tensor._from_op(out_data, (x,), bwd)


# -- shape plumbing ----------------------------------------------------------


def reshape(x, shape):
    old = x.shape
    out_data = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(old))

    return Tensor._from_op(out_data, (x,), bwd)


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = x.data.transpose(axes)

    def bwd(g):
        _accum(x, g.transpose(inv))

    return Tensor._from_op(out_data, (x,), bwd)


def moveaxis(x, src, dst):
    axes = list(range(x.ndim))
    order = [a for a in axes if a != (src % x.ndim)]
    order.insert(dst % x.ndim, src % x.ndim)
    return transpose(x, order)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def take(x, idx):
    out_data = x.data[idx]
    basic = _is_basic_index(idx)

    def bwd(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        _accum(x, gx)

    return Tensor._from_op(out_data, (x,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return Tensor._from_op(out_data, tuple(tensors), bwd)


# -- reductions --------------------------------------------------------------


def sum_axis(x, axis=None, keepdims=False):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            g0 = np.asarray(g).reshape((1,) * x.ndim)
            _accum(x, np.broadcast_to(g0, x.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(gg, x.shape).copy())

    return Tensor._from_op(out_data, (x,), bwd)


def mean_axis(x, axis=None, keepdims=False):
    n = x.size if axis is None else (
        int(np.prod([x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])))
    return mul(sum_axis(x, axis, keepdims), 1.0 / n)


def max_pool_axis(x, axis):
    """Max-reduce the named axis; gradient routes to the first argmax."""
    axis = axis % x.ndim
    out_data = x.data.max(axis=axis)
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis)
        _accum(x, gx)

    return Tensor._from_op(out_data, (x,), bwd)


def mean_pool_axis(x, axis):
    """Mean-reduce the named axis (removes it)."""
    return mean_axis(x, axis % x.ndim, keepdims=False)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Batched matrix product ``(.., M, K) @ (.., K, N)``.

    Leading batch extents broadcast; a dimension error names both shapes.
    """
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad = a.data if a.data.flags.c_contiguous else np.ascontiguousarray(a.data)
    bd = b.data if b.data.flags.c_contiguous else np.ascontiguousarray(b.data)
    try:
        out_data = ad @ bd
    except ValueError as err:
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} x {b.shape}") from err

    def bwd(g):
        g = g if g.flags.c_contiguous else np.ascontiguousarray(g)
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape))

    return Tensor._from_op(out_data, (a, b), bwd)


def softmax(x, axis=-1):
    """Stable softmax along ``axis``: rows are nonnegative and sum to 1."""
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (g - dot))

    return Tensor._from_op(out_data, (x,), bwd)


def logsumexp(x, axis=-1, keepdims=False):
    axis = axis % x.ndim
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_full = m + np.log(s)
    out_data = out_full if keepdims else np.squeeze(out_full, axis)
    soft = e / s

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(x, gg * soft)

    return Tensor._from_op(out_data, (x,), bwd)


# -- convolution -------------------------------------------------------------


def conv1d_time_cl(x, w, t_axis=1):
    """Channels-last temporal cross-correlation along axis ``t_axis``.

    ``x`` has channels in its final axis and time at ``t_axis``; ``w`` is
    ``(C_out, C_in, k)`` with odd ``k``; zero padding preserves length.
    One im2col GEMM forward, two GEMMs plus a strided scatter backward.
    """
    _check_same_dtype(x, w)
    if w.ndim != 3:
        raise ShapeError(f"conv1d weight must be (C_out, C_in, k), got {w.shape}")
    c_out, c_in, k = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d input {x.shape} does not match weight {w.shape}")
    pad = (k - 1) // 2
    t_axis = t_axis % x.ndim
    t = x.shape[t_axis]

    pads = [(0, 0)] * x.ndim
    pads[t_axis] = (pad, pad)
    xp = np.pad(x.data, pads)
    out_shape = x.shape[:-1] + (c_out,)
    m = int(np.prod(out_shape[:-1], dtype=np.int64))
    # one GEMM per kernel tap: tap slices copy near-contiguously, which is
    # far cheaper than gathering a full im2col matrix from a strided view
    w_taps = [np.ascontiguousarray(w.data[:, :, j].T) for j in range(k)]
    taps = []
    sl = [slice(None)] * xp.ndim
    out2d = None
    for j in range(k):
        sl[t_axis] = slice(j, j + t)
        tap = np.ascontiguousarray(xp[tuple(sl)]).reshape(m, c_in)
        taps.append(tap)
        prod = tap @ w_taps[j]
        out2d = prod if out2d is None else out2d + prod
    out_data = out2d.reshape(out_shape)

    def bwd(g):
        g_mat = np.ascontiguousarray(g).reshape(m, c_out)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[:, :, j] = g_mat.T @ taps[j]
            _accum(w, gw)
        if not x.requires_grad:
            return
        gxp = np.zeros_like(xp)
        tap_shape = xp.shape[:t_axis] + (t,) + xp.shape[t_axis + 1:]
        for j in range(k):
            sl[t_axis] = slice(j, j + t)
            gxp[tuple(sl)] += (g_mat @ w_taps[j].T).reshape(tap_shape)
        sl[t_axis] = slice(pad, pad + t)
        _accum(x, gxp[tuple(sl)] if pad else gxp)

    return Tensor._from_op(out_data, (x, w), bwd)


def conv1d_temporal(x, w, pad=None):
    """Temporal cross-correlation with zero padding, length preserved.

    ``x`` is laid out ``(C_in, T, ...)`` with any trailing extents treated
    as batch; ``w`` is ``(C_out, C_in, k)`` with odd ``k``.
    """
    k = w.shape[-1] if w.ndim == 3 else 0
    if w.ndim == 3 and k % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")
    if pad is not None and pad != (k - 1) // 2:
        raise ShapeError(f"conv1d requires pad=(k-1)//2 for same-length output, got {pad}")
    if x.ndim < 2 or (w.ndim == 3 and x.shape[0] != w.shape[1]):
        raise ShapeError(f"conv1d input {x.shape} does not match weight {w.shape}")
    y = moveaxis(x, 0, -1)                              # (T, ...rest, C_in)
    out = conv1d_time_cl(y, w, t_axis=0)
    return moveaxis(out, -1, 0)


def conv2d_cl(x, w, stride=1, pad=1):
    """Channels-last spatial cross-correlation over ``(..., H, W, C_in)``.

    ``H_out = (H + 2 pad - k) // stride + 1`` and likewise for ``W``;
    stride 2 realises the stage downsampling.
    """
    _check_same_dtype(x, w)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weight must be (C_out, C_in, k, k), got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.ndim < 3 or x.shape[-1] != c_in:
        raise ShapeError(f"conv2d input {x.shape} does not match weight {w.shape}")
    h, wd = x.shape[-3:-1]
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"conv2d output extent nonpositive for input {x.shape}, k={k}, "
                         f"stride={stride}, pad={pad}")
    lead = x.shape[:-3]
    nl = len(lead)

    pads = [(0, 0)] * nl + [(pad, pad), (pad, pad), (0, 0)]
    xp = np.pad(x.data, pads)
    m = int(np.prod(lead, dtype=np.int64)) * h_out * w_out
    tap_shape = lead + (h_out, w_out, c_in)
    # Small instances: one im2col gather and a single GEMM (fewest calls).
    # Large ones: one GEMM per kernel tap, whose slices copy
    # near-contiguously instead of gathering a huge strided view.
    use_taps = m * c_in * k * k > (1 << 19)

    if use_taps:
        w_taps = [np.ascontiguousarray(w.data[:, :, i, j].T)
                  for i in range(k) for j in range(k)]
        taps = []
        out2d = None
        for i in range(k):
            for j in range(k):
                tap = np.ascontiguousarray(
                    xp[..., i:i + stride * h_out:stride, j:j + stride * w_out:stride, :]
                ).reshape(m, c_in)
                taps.append(tap)
                prod = tap @ w_taps[k * i + j]
                out2d = prod if out2d is None else out2d + prod
        out_data = out2d.reshape(lead + (h_out, w_out, c_out))
    else:
        win = sliding_window_view(xp, (k, k), axis=(nl, nl + 1))
        win = win[..., ::stride, ::stride, :, :, :]   # (*lead, Ho, Wo, C, k, k)
        cols = win.reshape(m, c_in * k * k)
        w_mat = w.data.reshape(c_out, c_in * k * k)
        out_data = (cols @ w_mat.T).reshape(lead + (h_out, w_out, c_out))

    def bwd(g):
        g_mat = np.ascontiguousarray(g).reshape(m, c_out)
        if use_taps:
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for i in range(k):
                    for j in range(k):
                        gw[:, :, i, j] = g_mat.T @ taps[k * i + j]
                _accum(w, gw)
            gx_taps = None if not x.requires_grad else [
                (g_mat @ w_taps[k * i + j].T).reshape(tap_shape)
                for i in range(k) for j in range(k)]
        else:
            if w.requires_grad:
                _accum(w, (g_mat.T @ cols).reshape(w.shape))
            if x.requires_grad:
                gx_cols = (g_mat @ w_mat).reshape(tap_shape + (k, k))
                gx_taps = [gx_cols[..., i, j] for i in range(k) for j in range(k)]
        if not x.requires_grad:
            return
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[..., i:i + stride * h_out:stride, j:j + stride * w_out:stride, :] += \
                    gx_taps[k * i + j]
        if pad:
            gxp = gxp[..., pad:-pad, pad:-pad, :]
        _accum(x, gxp)

    return Tensor._from_op(out_data, (x, w), bwd)


def conv2d_spatial(x, w, stride=1, pad=1):
    """Spatial cross-correlation over the trailing ``(C_in, H, W)`` axes.

    Any leading extents are batch; see ``conv2d_cl`` for the shape rule.
    """
    if x.ndim < 3:
        raise ShapeError(f"conv2d input must have rank >= 3, got {x.shape}")
    y = moveaxis(x, -3, -1)
    out = conv2d_cl(y, w, stride=stride, pad=pad)
    return moveaxis(out, -1, -3)


def avg_pool2d_cl(x, k=2):
    """Non-overlapping k x k mean pool over the ``(..., H, W, C)`` axes."""
    h, w, c = x.shape[-3:]
    if h % k or w % k:
        raise ShapeError(f"pool extent {k} must divide spatial dims of {x.shape}")
    lead = x.shape[:-3]
    r = x.data.reshape(lead + (h // k, k, w // k, k, c))
    out_data = r.mean(axis=(-4, -2))

    def bwd(g):
        gg = g[..., :, None, :, None, :] * x.dtype.type(1.0 / (k * k))
        gx = np.broadcast_to(gg, lead + (h // k, k, w // k, k, c))
        _accum(x, gx.reshape(x.shape))

    return Tensor._from_op(out_data, (x,), bwd)


# -- batch normalisation -----------------------------------------------------


def batchnorm(x, gamma, beta, axes, eps=1e-5, running=None, training=True, momentum=0.1):
    """Per-channel standardisation with learned scale/shift.

    ``axes`` are the reduction axes (everything but the channel axes).
    In training mode batch statistics enter the graph and ``running``
    (a ``(mean, var)`` pair of plain arrays) is updated in place; in eval
    mode the running statistics are used as constants.  Variance is the
    biased batch estimate.
    """
    if eps <= 0:
        raise ValueError(f"batchnorm eps must be positive, got {eps}")
    axes = tuple(a % x.ndim for a in axes)
    if not training:
        rm, rv = running
        scale = (gamma.data / np.sqrt(rv + eps)).astype(x.dtype, copy=False)
        shift = (beta.data - rm * scale).astype(x.dtype, copy=False)
        out_data = x.data * scale + shift

        def bwd_eval(g):
            _accum(x, g * scale)
            inv = (1.0 / np.sqrt(rv + eps)).astype(x.dtype, copy=False)
            xhat = (x.data - rm) * inv
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
            _accum(beta, _unbroadcast(g, beta.shape))

        return Tensor._from_op(out_data, (x, gamma, beta), bwd_eval)

    # every stat layout here reduces the leading axes of a contiguous
    # array, where a GEMV against a ones-row beats numpy's strided reduce
    lead_fast = axes == tuple(range(len(axes)))
    m = int(np.prod([x.shape[a] for a in axes], dtype=np.int64))
    if lead_fast:
        kd = (1,) * len(axes) + x.shape[len(axes):]
        ones_row = np.ones((1, m), dtype=x.dtype)

        def _sum(arr):
            arr = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
            return (ones_row @ arr.reshape(m, -1)).reshape(kd)
    else:
        def _sum(arr):
            return arr.sum(axis=axes, keepdims=True)

    scale_m = x.dtype.type(1.0 / m)
    mu = _sum(x.data) * scale_m
    xc = x.data - mu
    var = _sum(xc * xc) * scale_m
    if running is not None:
        rm, rv = running
        rm *= (1.0 - momentum)
        rm += (momentum * mu).astype(rm.dtype, copy=False)
        rv *= (1.0 - momentum)
        rv += (momentum * var).astype(rv.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(_sum(g * xhat), gamma.shape))
        if beta.requires_grad:
            _accum(beta, _unbroadcast(_sum(g), beta.shape))
        if not x.requires_grad:
            return
        gh = g * gamma.data
        gx = inv * (gh - _sum(gh) * scale_m - xhat * (_sum(gh * xhat) * scale_m))
        _accum(x, gx.astype(x.dtype, copy=False))

    return Tensor._from_op(out_data, (x, gamma, beta), bwd)


# -- verification ------------------------------------------------------------


def gradients(output, leaves):
    """Reverse-mode gradients of a scalar ``output`` for each leaf.

    Leaves the graph never touched get exact zeros.
    """
    for leaf in leaves:
        leaf.grad = None
    output.backward()
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves]


def grad_check(f, inputs, h=1e-6, exclude=None):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps the input tensors to a scalar Tensor.  The relative error
    denominator is ``max(|a|, |b|, 1e-8)``.  ``exclude`` optionally maps
    an input index to a boolean mask of coordinates to skip (subgradient
    points such as ReLU at zero).
    """
    if h <= 0:
        raise ValueError("grad_check step must be positive")
    inputs = [t if isinstance(t, Tensor) else Tensor(t, dtype=np.float64, requires_grad=True)
              for t in inputs]
    analytic = gradients(f(*inputs), inputs)
    worst = 0.0
    with no_grad():
        for i, t in enumerate(inputs):
            base = t.data
            flat = base.reshape(-1)
            num = np.zeros_like(flat)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                hi = f(*inputs).item()
                flat[j] = orig - h
                lo = f(*inputs).item()
                flat[j] = orig
                num[j] = (hi - lo) / (2.0 * h)
            a = analytic[i].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
            rel = np.abs(a - num) / denom
            if exclude is not None and i in exclude:
                rel = rel[~exclude[i].reshape(-1)]
            if rel.size:
                worst = max(worst, float(rel.max()))
    return worst
