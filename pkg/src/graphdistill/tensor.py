"""Dense float64 tensors with reverse-mode gradient accumulation.

Every operation records a closure that propagates the output gradient to its
tracked operands; ``Tensor.backward`` replays those closures in reverse
topological order.  All arithmetic is 64-bit and reductions keep numpy's
sequential index order, so identical inputs give bit-identical results.
"""

from __future__ import annotations

from contextlib import contextmanager
from itertools import count
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError, NumericDomainError

_uid = count()

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-mode forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 ndarray plus an optional gradient and a recorded history.

    Leaves are created directly (``Tensor(data, requires_grad=True)`` for
    parameters); op results carry closures feeding their parents.  A recorded
    computation supports exactly one ``backward`` call.
    """

    __slots__ = ("data", "grad", "requires_grad", "uid", "_parents", "_grad_fn", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uid)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._done = False

    # ---- graph plumbing -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], grad_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.uid = next(_uid)
        out._done = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._grad_fn = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every tracked ancestor of this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.data.shape}")
        if self._done:
            raise ContractError("backward was already called on this recorded computation")
        self._done = True

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for p in node._parents:
                if p.uid not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is not None:
                node._grad_fn(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- conveniences ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise ContractError("division is supported by scalar constants only")
        return mul(self, 1.0 / float(c))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """A trainable leaf; ``data`` may be an array or a shape to fill Glorot-uniform."""
    if isinstance(data, tuple):
        if rng is None:
            raise ContractError("shape-based parameter() needs an rng")
        fan_in = data[0] if len(data) > 1 else data[0]
        fan_out = data[1] if len(data) > 1 else data[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=data)
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def grad_fn(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._result(out_data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def grad_fn(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._result(out_data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def grad_fn(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out_data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        a._accumulate(-g)

    return Tensor._result(-a.data, (a,), grad_fn)


# ---- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def grad_fn(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor._result(out_data, (a, b), grad_fn)


def spmm(s: sp.spmatrix, b: Tensor) -> Tensor:
    """Product of a constant CSR matrix with a tracked dense matrix."""
    b = as_tensor(b)
    if b.data.ndim != 2 or s.shape[1] != b.data.shape[0]:
        raise DimensionError(f"spmm: incompatible shapes {s.shape} x {b.data.shape}")
    out_data = np.asarray(s @ b.data)

    def grad_fn(g):
        b._accumulate(np.asarray(s.T @ g))

    return Tensor._result(out_data, (b,), grad_fn)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.data.shape}")

    def grad_fn(g):
        a._accumulate(g.T)

    return Tensor._result(a.data.T, (a,), grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape

    def grad_fn(g):
        a._accumulate(g.reshape(orig))

    return Tensor._result(a.data.reshape(shape), (a,), grad_fn)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p._accumulate(g[tuple(idx)])

    return Tensor._result(out_data, tuple(parts), grad_fn)


# ---- nonlinearities --------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def grad_fn(g):
        a._accumulate(g * mask)

    return Tensor._result(np.where(mask, a.data, 0.0), (a,), grad_fn)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)

    def grad_fn(g):
        a._accumulate(g * factor)

    return Tensor._result(a.data * factor, (a,), grad_fn)


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)  # subgradient 0 at 0

    def grad_fn(g):
        a._accumulate(g * sign)

    return Tensor._result(np.abs(a.data), (a,), grad_fn)


# ---- reductions ------------------------------------------------------------


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return Tensor._result(np.asarray(out_data), (a,), grad_fn)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape) / n)

    return Tensor._result(np.asarray(out_data), (a,), grad_fn)


# ---- softmax family --------------------------------------------------------


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{op}: input contains NaN/Inf")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    # Max-shift is mandatory: temperature-scaled logits overflow the naive form.
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        a._accumulate(p * (g - inner))

    return Tensor._result(p, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def grad_fn(g):
        a._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out_data, (a,), grad_fn)


# ---- indexed / segmented ops ----------------------------------------------


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows by integer index; backward scatter-adds (deterministic)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def grad_fn(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, index, g)

    return Tensor._result(a.data[index], (a,), grad_fn)


def segment_sum(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given sorted segment ids."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    out_shape = (num_segments,) + a.data.shape[1:]
    out_data = np.zeros(out_shape, dtype=np.float64)
    np.add.at(out_data, segments, a.data)

    def grad_fn(g):
        a._accumulate(g[segments])

    return Tensor._result(out_data, (a,), grad_fn)


def _segment_starts(segments: np.ndarray, num_segments: int) -> np.ndarray:
    return np.searchsorted(segments, np.arange(num_segments))


def segment_softmax(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of a 1-D tensor within contiguous segments (sorted ids, none empty)."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if a.data.ndim != 1:
        raise DimensionError(f"segment_softmax expects a vector, got shape {a.data.shape}")
    starts = _segment_starts(segments, num_segments)
    seg_max = np.maximum.reduceat(a.data, starts)
    e = np.exp(a.data - seg_max[segments])
    seg_sum = np.add.reduceat(e, starts)
    p = e / seg_sum[segments]

    def grad_fn(g):
        inner = np.add.reduceat(g * p, starts)
        a._accumulate(p * (g - inner[segments]))

    return Tensor._result(p, (a,), grad_fn)


# ---- normalization / regularization ----------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learned scale and offset."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2 or gain.data.shape != (x.data.shape[1],) or bias.data.shape != (x.data.shape[1],):
        raise DimensionError(
            f"layer_norm: x {x.data.shape} with gain {gain.data.shape} / bias {bias.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def grad_fn(g):
        dxhat = g * gain.data
        gx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        x._accumulate(gx)
        gain._accumulate((g * xhat).sum(axis=0))
        bias._accumulate(g.sum(axis=0))

    return Tensor._result(out_data, (x, gain, bias), grad_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def grad_fn(g):
        x._accumulate(g * mask)

    return Tensor._result(x.data * mask, (x,), grad_fn)


# ---- fused attention kernel -------------------------------------------------


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic weight matrix softmax(QK^T/sqrt(d_k)); inspection only."""
    d_k = q.shape[1]
    s = (q @ k.T) / np.sqrt(d_k)
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


# Query rows are processed in blocks of roughly this many score entries so the
# n x m weight matrix never materializes (cache-resident softmax, recomputed
# rather than stored for backward).
_ATTN_BLOCK_ELEMENTS = 2_000_000


def _attention_block_rows(m: int) -> int:
    return max(1, _ATTN_BLOCK_ELEMENTS // max(m, 1))


def _softmax_block(q_blk, k_data, scale):
    s = q_blk @ k_data.T
    s *= scale
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def attention(q: Tensor, k: Tensor, v: Tensor, drop_mask: np.ndarray | None = None,
              drop_scale: float = 1.0) -> Tensor:
    """softmax(QK^T/sqrt(d_k)) V as one recorded op.

    The weight matrix never becomes a leaf or an activation: forward streams
    over query-row blocks and backward recomputes each block.  ``drop_mask``
    is a boolean keep-mask over the weights with ``drop_scale`` = 1/keep.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention expects matrices Q, K, V")
    if q.data.shape[1] != k.data.shape[1] or k.data.shape[0] != v.data.shape[0]:
        raise DimensionError(
            f"attention: Q {q.data.shape}, K {k.data.shape}, V {v.data.shape} do not conform"
        )
    n, m = q.data.shape[0], k.data.shape[0]
    if drop_mask is not None and drop_mask.shape != (n, m):
        raise DimensionError(f"drop_mask shape {drop_mask.shape} != weights shape {(n, m)}")
    scale = 1.0 / np.sqrt(q.data.shape[1])
    bs = _attention_block_rows(m)

    out_data = np.empty((n, v.data.shape[1]))
    for lo in range(0, n, bs):
        hi = min(lo + bs, n)
        p = _softmax_block(q.data[lo:hi], k.data, scale)
        if drop_mask is not None:
            p *= drop_mask[lo:hi]
            p *= drop_scale
        np.matmul(p, v.data, out=out_data[lo:hi])

    def grad_fn(g):
        dq = np.zeros_like(q.data) if q.requires_grad else None
        dk = np.zeros_like(k.data) if k.requires_grad else None
        dv = np.zeros_like(v.data) if v.requires_grad else None
        for lo in range(0, n, bs):
            hi = min(lo + bs, n)
            p = _softmax_block(q.data[lo:hi], k.data, scale)
            g_blk = g[lo:hi]
            if drop_mask is not None:
                a = p * drop_mask[lo:hi]
                a *= drop_scale
            else:
                a = p
            if dv is not None:
                dv += a.T @ g_blk
            dp = g_blk @ v.data.T
            if drop_mask is not None:
                dp *= drop_mask[lo:hi]
                dp *= drop_scale
            # softmax backward, fused in place: ds = p * (dp - rowsum(dp * p))
            inner = np.einsum("ij,ij->i", dp, p)
            dp -= inner[:, None]
            dp *= p
            dp *= scale
            if dq is not None:
                dq[lo:hi] = dp @ k.data
            if dk is not None:
                dk += dp.T @ q.data[lo:hi]
        if dq is not None:
            q._accumulate(dq)
        if dk is not None:
            k._accumulate(dk)
        if dv is not None:
            v._accumulate(dv)

    return Tensor._result(out_data, (q, k, v), grad_fn)
