"""Dense-tensor engine with tape-based reverse-mode autodiff.

Tensors wrap float numpy arrays (float64 by default, float32 for speed-critical
training runs). Every differentiable op records a backward closure on a dynamic
tape; ``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into ``.grad``.
"""

from __future__ import annotations

import ctypes

import numpy as np


class TensorError(Exception):
    """Base class for tensor engine errors."""


class DimensionError(TensorError):
    """Shapes do not satisfy an op's contract."""


class NonFiniteError(TensorError):
    """NaN or Inf detected where finite values are required."""


class ContractError(TensorError):
    """An op precondition other than shape was violated."""


_ALLOCATOR_TUNED = False


def tune_allocator():
    """Keep large numpy temporaries on the heap instead of fresh mmaps.

    A training step allocates hundreds of multi-megabyte arrays. With glibc's
    default thresholds each becomes its own mmap, so every first touch page
    faults and the step is dominated by the kernel instead of BLAS. Raising
    the mmap and trim thresholds lets freed blocks be recycled, which roughly
    halves step wall time. Safe no-op on non-glibc platforms.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


class Tensor:
    """N-d array with optional gradient tracking.

    grad is lazily allocated on first accumulation and has the same shape and
    dtype as data. Repeated backward passes accumulate unless zero_grad() is
    called in between.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_grad_shared")

    def __init__(self, data, requires_grad=False, dtype=None, _check=True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if _check:
            _check_finite(arr, "tensor data")
        self.data = arr
        self.grad = None
        self._grad_shared = False
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- bookkeeping ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None
        self._grad_shared = False

    def detach(self):
        return Tensor(self.data, requires_grad=False, _check=False)

    def _accumulate(self, g):
        # copy-on-write: the first accumulation stores the incoming array by
        # reference (it may be shared with another tensor's grad), and any
        # later accumulation materializes a privately owned sum. In-place
        # mutation of .grad outside this method is therefore not allowed.
        if self.grad is None:
            if g.shape == self.data.shape and g.dtype == self.data.dtype:
                self.grad = g
                self._grad_shared = True
            else:
                self.grad = np.zeros_like(self.data)
                self.grad += g
                self._grad_shared = False
        elif self._grad_shared:
            self.grad = self.grad + g
            self._grad_shared = False
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ContractError("backward requires a scalar tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self):
        return float(self.data.reshape(()))


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64),
                  _check=False)


def _make(data, parents, backward_fn):
    out = Tensor(data, _check=False)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to the given broadcast-source shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives ---------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(data, (a,), backward)


def _gemm_operand(x):
    """Compact batched operands BLAS would otherwise walk with slow strides.

    Contiguous arrays and plain last-two-axes transposes of contiguous arrays
    dispatch to fast GEMM directly; anything else >=3-d gets copied once.
    """
    if x.ndim <= 2 or x.flags.c_contiguous:
        return x
    if np.swapaxes(x, -1, -2).flags.c_contiguous:
        return x
    return np.ascontiguousarray(x)


def matmul(a, b):
    """Matrix product; leading batch dimensions broadcast as in numpy."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul requires >=2-d operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    ad = _gemm_operand(a.data)
    bd = _gemm_operand(b.data)
    data = np.matmul(ad, bd)

    def backward(g):
        g = _gemm_operand(g)
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(data, (a,), backward)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), backward)


def tmean(a):
    a = _as_tensor(a)
    n = a.data.size
    data = a.data.mean()

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(a.data.shape, g / n, dtype=a.data.dtype))

    return _make(data, (a,), backward)


def gelu(a):
    """tanh-approximation GELU."""
    a = _as_tensor(a)
    x = a.data
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    x2 = x * x
    inner = x2 * k
    inner += one
    inner *= x
    inner *= c
    t = np.tanh(inner, out=inner)
    data = one + t
    data = data * x
    data *= half

    def backward(g):
        if a.requires_grad:
            # d/dx = 0.5(1+t) + 0.5 x (1-t^2) c (1+3k x^2)
            d = x2 * (x.dtype.type(3.0) * k)
            d += one
            d *= c
            d *= x
            sech2 = t * t
            np.subtract(one, sech2, out=sech2)
            d *= sech2
            d += one
            d += t
            d *= half
            d *= g
            a._accumulate(d)

    return _make(data, (a,), backward)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = x.shape[-1]

    def backward(g):
        if a.requires_grad:
            gy = g
            gsum = gy.sum(axis=-1, keepdims=True)
            gysum = (gy * y).sum(axis=-1, keepdims=True)
            gx = inv * (gy - gsum / n - y * gysum / n)
            a._accumulate(gx)

    return _make(y, (a,), backward)


def softmax_rows(a):
    """Row-wise softmax over the last axis, computed with max subtraction."""
    a = _as_tensor(a)
    x = a.data
    if x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last axis")
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = np.einsum("...i,...i->...", g, p)[..., None]
            gx = g - dot
            gx *= p
            a._accumulate(gx)

    return _make(p, (a,), backward)


def embedding(table, ids):
    """Row lookup: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table._accumulate(gt)

    return _make(data, (table,), backward)


def cross_entropy_masked(logits, targets, mask):
    """Mean over masked positions of -log softmax(logits)[target].

    logits: (..., V); targets and mask broadcast over the leading axes.
    Positions with mask False contribute nothing to the value or gradient.
    """
    logits = _as_tensor(logits)
    x = logits.data
    v = x.shape[-1]
    targets = np.asarray(targets, dtype=np.int64).reshape(x.shape[:-1])
    mask = np.asarray(mask, dtype=bool).reshape(x.shape[:-1])
    if not mask.any():
        raise ContractError("cross_entropy_masked: all-false mask")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("cross_entropy target out of range")
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    count = int(mask.sum())
    data = float((nll * mask).sum() / count)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z - lse[..., None])
            np.put_along_axis(p, targets[..., None],
                              np.take_along_axis(p, targets[..., None], axis=-1) - 1.0,
                              axis=-1)
            p *= (mask[..., None] * (g / count)).astype(x.dtype)
            logits._accumulate(p)

    return _make(np.asarray(data, dtype=x.dtype), (logits,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def slice_axis(a, axis, start, stop):
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[idx] = g
            a._accumulate(ga)

    return _make(data, (a,), backward)
