"""Reverse-mode automatic differentiation on numpy arrays.

A small tape-based engine: a ``Tensor`` wraps an ndarray and remembers how it
was produced, ``backward`` walks the tape in reverse topological order and
accumulates vector-Jacobian products.  Anything that is not a Tensor (floats,
ndarrays) is treated as a constant, so the same model code runs in plain
numpy when no Tensor enters the computation.

The op set is deliberately minimal: dense-layer algebra, the activations used
by the policy networks, reductions, cumulative sums, gather/scatter style
indexing, and batched piecewise-linear interpolation (the workhorse for
gridded policies and the endogenous-grid step).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _sp_erf, expit as _sp_expit

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Node of the computation tape."""

    __slots__ = ("data", "grad", "_parents", "_vjps")

    # make ndarray <op> Tensor defer to the reflected Tensor operators
    # instead of building object arrays
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, parents=(), vjps=()):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjps = vjps

    # -- basic protocol ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, expo):
        return power(self, expo)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def item(self):
        return float(self.data)

    def backward(self, seed=None):
        """Accumulate gradients of ``self`` into every reachable Tensor.

        ``seed`` defaults to ones (for a scalar loss this is the usual
        dLoss/dLoss = 1).  Gradients accumulate into ``.grad``; call
        ``zero_grad`` on leaves between uses.
        """
        topo = _toposort(self)
        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in topo:
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib

    def zero_grad(self):
        self.grad = None


def _toposort(root):
    """Reverse topological order, iterative to cope with long tapes."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def is_tensor(x):
    return isinstance(x, Tensor)


def value(x):
    """Underlying ndarray (or scalar) of a Tensor or passthrough."""
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum over prepended axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum over axes that were broadcast from size 1
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.add(a, b)
    av, bv = value(a), value(b)
    out = av + bv
    parents, vjps = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        vjps.append(lambda g, s=np.shape(av): _unbroadcast(g, s))
    if isinstance(b, Tensor):
        parents.append(b)
        vjps.append(lambda g, s=np.shape(bv): _unbroadcast(g, s))
    return Tensor(out, tuple(parents), tuple(vjps))


def sub(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.subtract(a, b)
    av, bv = value(a), value(b)
    out = av - bv
    parents, vjps = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        vjps.append(lambda g, s=np.shape(av): _unbroadcast(g, s))
    if isinstance(b, Tensor):
        parents.append(b)
        vjps.append(lambda g, s=np.shape(bv): _unbroadcast(-g, s))
    return Tensor(out, tuple(parents), tuple(vjps))


def mul(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.multiply(a, b)
    av, bv = value(a), value(b)
    out = av * bv
    parents, vjps = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        vjps.append(lambda g, o=bv, s=np.shape(av): _unbroadcast(g * o, s))
    if isinstance(b, Tensor):
        parents.append(b)
        vjps.append(lambda g, o=av, s=np.shape(bv): _unbroadcast(g * o, s))
    return Tensor(out, tuple(parents), tuple(vjps))


def div(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.divide(a, b)
    av, bv = value(a), value(b)
    out = av / bv
    parents, vjps = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        vjps.append(lambda g, o=bv, s=np.shape(av): _unbroadcast(g / o, s))
    if isinstance(b, Tensor):
        parents.append(b)
        vjps.append(
            lambda g, num=av, den=bv, s=np.shape(bv): _unbroadcast(-g * num / (den * den), s)
        )
    return Tensor(out, tuple(parents), tuple(vjps))


def neg(a):
    if not isinstance(a, Tensor):
        return -a
    return Tensor(-a.data, (a,), (lambda g: -g,))


def power(a, expo):
    """Elementwise power with a constant (non-Tensor) exponent."""
    if isinstance(expo, Tensor):
        raise TypeError("power exponent must be a constant")
    if not isinstance(a, Tensor):
        return np.power(a, expo)
    out = np.power(a.data, expo)
    base = a.data

    def vjp(g):
        return g * expo * np.power(base, expo - 1.0)

    return Tensor(out, (a,), (vjp,))


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), (lambda g, o=out: g * o,))


def log(a):
    if not isinstance(a, Tensor):
        return np.log(a)
    out = np.log(a.data)
    return Tensor(out, (a,), (lambda g, d=a.data: g / d,))


def sqrt(a):
    if not isinstance(a, Tensor):
        return np.sqrt(a)
    out = np.sqrt(a.data)

    def vjp(g):
        # guard the (measure-zero) root at 0 so complementarity residuals
        # keep a finite subgradient
        return g / (2.0 * np.maximum(out, 1e-150))

    return Tensor(out, (a,), (vjp,))


def erf(a):
    if not isinstance(a, Tensor):
        return _sp_erf(a)
    out = _sp_erf(a.data)

    def vjp(g, d=a.data):
        return g * (2.0 / np.sqrt(np.pi)) * np.exp(-d * d)

    return Tensor(out, (a,), (vjp,))


def sigmoid(a):
    if not isinstance(a, Tensor):
        return _sp_expit(a)
    out = _sp_expit(a.data)
    return Tensor(out, (a,), (lambda g, o=out: g * o * (1.0 - o),))


def softplus(a):
    """log(1 + e^x), computed stably; strictly positive."""
    if not isinstance(a, Tensor):
        return np.logaddexp(0.0, a)
    out = np.logaddexp(0.0, a.data)
    return Tensor(out, (a,), (lambda g, d=a.data: g * _sp_expit(d),))


def gelu(a):
    """x * Phi(x) with the exact Gaussian CDF."""
    av = value(a)
    phi_cdf = 0.5 * (1.0 + _sp_erf(av * _INV_SQRT2))
    if not isinstance(a, Tensor):
        return av * phi_cdf
    out = av * phi_cdf

    def vjp(g, d=av, cdf=phi_cdf):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
        return g * (cdf + d * pdf)

    return Tensor(out, (a,), (vjp,))


def relu(a):
    if not isinstance(a, Tensor):
        return np.maximum(a, 0.0)
    out = np.maximum(a.data, 0.0)
    return Tensor(out, (a,), (lambda g, m=(a.data > 0.0): g * m,))


def where(cond, a, b):
    """Select with a constant boolean mask; gradients route per branch."""
    cond = np.asarray(value(cond), dtype=bool)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.where(cond, a, b)
    av, bv = value(a), value(b)
    out = np.where(cond, av, bv)
    parents, vjps = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        vjps.append(lambda g, s=np.shape(av): _unbroadcast(np.where(cond, g, 0.0), s))
    if isinstance(b, Tensor):
        parents.append(b)
        vjps.append(lambda g, s=np.shape(bv): _unbroadcast(np.where(cond, 0.0, g), s))
    return Tensor(out, tuple(parents), tuple(vjps))


def matmul(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return a @ b
    av, bv = value(a), value(b)
    out = av @ bv
    parents, vjps = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        vjps.append(lambda g, o=bv: g @ o.T)
    if isinstance(b, Tensor):
        parents.append(b)
        vjps.append(lambda g, o=av: o.T @ g)
    return Tensor(out, tuple(parents), tuple(vjps))


def tsum(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return np.sum(a, axis=axis, keepdims=keepdims)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape).copy()

    return Tensor(out, (a,), (vjp,))


def tmean(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return np.mean(a, axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) / float(n)


def cumsum(a, axis=-1):
    if not isinstance(a, Tensor):
        return np.cumsum(a, axis=axis)
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return Tensor(out, (a,), (vjp,))


def reshape(a, shape):
    if not isinstance(a, Tensor):
        return np.reshape(a, shape)
    old = a.data.shape
    return Tensor(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def take(a, idx):
    """Indexing/slicing; scatter-adds on the way back (duplicates allowed)."""
    if not isinstance(a, Tensor):
        return a[idx]
    out = a.data[idx]
    shape = a.data.shape
    dtype = a.data.dtype

    def vjp(g):
        acc = np.zeros(shape, dtype=dtype)
        np.add.at(acc, idx, g)
        return acc

    return Tensor(out, (a,), (vjp,))


def concat(parts, axis=-1):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents, vjps = [], []
    for i, p in enumerate(parts):
        if not isinstance(p, Tensor):
            continue

        def vjp(g, lo=offsets[i], hi=offsets[i + 1]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        parents.append(p)
        vjps.append(vjp)
    return Tensor(out, tuple(parents), tuple(vjps))


def stack(parts, axis=0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.stack(parts, axis=axis)
    vals = [value(p) for p in parts]
    out = np.stack(vals, axis=axis)
    parents, vjps = [], []
    for i, p in enumerate(parts):
        if not isinstance(p, Tensor):
            continue

        def vjp(g, k=i):
            return np.take(g, k, axis=axis)

        parents.append(p)
        vjps.append(vjp)
    return Tensor(out, tuple(parents), tuple(vjps))


def gather_last(a, idx):
    """take_along_axis over the last axis; ``idx`` is a constant int array."""
    idx = np.asarray(value(idx), dtype=np.intp)
    if not isinstance(a, Tensor):
        return np.take_along_axis(a, idx, axis=-1)
    out = np.take_along_axis(a.data, idx, axis=-1)

    def vjp(g, sh=a.data.shape, dt=a.data.dtype):
        return _scatter_add_last(sh, idx, g, dt)

    return Tensor(out, (a,), (vjp,))


def scatter_add(vals, idx, n):
    """out[..., m] = sum over j with idx[..., j] == m of vals[..., j].

    ``idx`` is a constant int array shaped like ``vals``; the output's last
    axis has length ``n``.  The adjoint is a gather at ``idx``.
    """
    idx = np.asarray(value(idx), dtype=np.intp)
    vv = value(vals)
    shape = vv.shape[:-1] + (n,)
    out = _scatter_add_last(shape, idx, vv, vv.dtype)
    if not isinstance(vals, Tensor):
        return out
    return Tensor(out, (vals,), (lambda g: np.take_along_axis(g, idx, axis=-1),))


# ---------------------------------------------------------------------------
# batched piecewise-linear interpolation
# ---------------------------------------------------------------------------

def _bracket(xn, xq):
    """Index of the left node of the segment containing each query.

    ``xn``: (..., N) strictly increasing per row, ``xq``: (..., Q).  Clipped
    to [0, N-2] so queries outside the hull use the boundary segment
    (linear extrapolation).
    """
    n = xn.shape[-1]
    idx = (xq[..., :, None] >= xn[..., None, :]).sum(axis=-1) - 1
    return np.clip(idx, 0, n - 2)


def _gather_last(arr, idx):
    return np.take_along_axis(arr, idx, axis=-1)


def _scatter_add_last(shape, idx, vals, dtype):
    out = np.zeros(shape, dtype=dtype)
    if idx.ndim == 1:
        np.add.at(out, idx, vals)
        return out
    lead = np.ix_(*[np.arange(s) for s in shape[:-1]])
    full = tuple(np.broadcast_to(a[..., None], idx.shape) for a in lead) + (idx,)
    np.add.at(out, full, vals)
    return out


def interp_linear(xq, xn, yn):
    """Piecewise-linear interpolation along the last axis, batched.

    Rows of ``xn`` must be strictly increasing.  Leading axes broadcast: a
    one-dimensional common grid pairs with batched values and queries.
    Inside the hull this is the usual linear interpolation; outside, the
    boundary segment is continued linearly.  Differentiable in all three
    arguments (segment choice is frozen at the forward values).
    """
    xqv = np.asarray(value(xq), dtype=np.float64)
    xnv = np.asarray(value(xn), dtype=np.float64)
    ynv = np.asarray(value(yn), dtype=np.float64)
    lead = np.broadcast_shapes(xqv.shape[:-1], xnv.shape[:-1], ynv.shape[:-1])
    xn_shape, yn_shape, xq_shape = xnv.shape, ynv.shape, xqv.shape
    xqb = np.broadcast_to(xqv, lead + xqv.shape[-1:])
    xnb = np.broadcast_to(xnv, lead + xnv.shape[-1:])
    ynb = np.broadcast_to(ynv, lead + ynv.shape[-1:])
    idx = _bracket(xnb, xqb)
    a = _gather_last(xnb, idx)
    b = _gather_last(xnb, idx + 1)
    ya = _gather_last(ynb, idx)
    yb = _gather_last(ynb, idx + 1)
    width = b - a
    t = (xqb - a) / width
    out = ya + t * (yb - ya)
    if not (isinstance(xq, Tensor) or isinstance(xn, Tensor) or isinstance(yn, Tensor)):
        return out

    parents, vjps = [], []
    if isinstance(xq, Tensor):
        parents.append(xq)
        slope = (yb - ya) / width
        vjps.append(lambda g, s=slope: _unbroadcast(g * s, xq_shape))
    if isinstance(xn, Tensor):
        dy = yb - ya
        da = dy * (xqb - b) / (width * width)
        db = -dy * (xqb - a) / (width * width)

        def vjp_xn(g, dt=xnv.dtype):
            sh = lead + xnv.shape[-1:]
            acc = _scatter_add_last(sh, idx, g * da, dt)
            acc += _scatter_add_last(sh, idx + 1, g * db, dt)
            return _unbroadcast(acc, xn_shape)

        parents.append(xn)
        vjps.append(vjp_xn)
    if isinstance(yn, Tensor):

        def vjp_yn(g, dt=ynv.dtype):
            sh = lead + ynv.shape[-1:]
            acc = _scatter_add_last(sh, idx, g * (1.0 - t), dt)
            acc += _scatter_add_last(sh, idx + 1, g * t, dt)
            return _unbroadcast(acc, yn_shape)

        parents.append(yn)
        vjps.append(vjp_yn)
    return Tensor(out, tuple(parents), tuple(vjps))
