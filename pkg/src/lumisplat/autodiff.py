"""Reverse-mode automatic differentiation over numpy arrays.

A single tape primitive set covers the whole shading basis used by the
light model and the splat renderer: arithmetic with broadcasting, exp /
log / sqrt / trig, softplus / sigmoid, clamped max, matrix products,
reductions, cumulative sums, gather and segmented scatter-add.

Every op accepts plain ndarrays as well as Var instances and returns a
Var only when at least one input is a Var.  Shading code written against
this module therefore runs unchanged in "plain numpy" mode (no tape,
no overhead) and in differentiable mode.

Gradients accumulate out of place (``grad = grad + contribution``), so
VJPs are free to return views without aliasing hazards.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteLoss

Array = np.ndarray


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    # collapse extra leading axes
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    # collapse axes that were broadcast from size 1
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    """One node of the tape: value plus recorded parent VJPs."""

    __slots__ = ("data", "grad", "_parents", "_vjps")

    # keep numpy from absorbing us into object arrays; forces __r*__ dispatch
    __array_ufunc__ = None

    def __init__(self, data, parents: tuple = (), vjps: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Var(shape={self.data.shape})"

    # -- operator sugar -----------------------------------------------------

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

    def __pow__(self, c):
        return power(self, c)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def value_of(x) -> Array:
    """Underlying ndarray of a Var, or the input as float64 array."""
    if isinstance(x, Var):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _node(out_data: Array, pairs: Sequence[tuple]) -> Var:
    """Build a Var from (parent, vjp) pairs, keeping only Var parents."""
    parents = []
    vjps = []
    for p, vjp in pairs:
        if isinstance(p, Var):
            parents.append(p)
            vjps.append(vjp)
    return Var(out_data, tuple(parents), tuple(vjps))


def backward(root: Var, seed: Array | None = None) -> None:
    """Accumulate grads of every tape node reachable from `root`."""
    topo: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
            if id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for p, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            p.grad = contrib if p.grad is None else p.grad + contrib


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    if not _any_var(a, b):
        return np.add(a, b)
    ad_, bd = value_of(a), value_of(b)
    out = ad_ + bd
    return _node(
        out,
        [
            (a, lambda g: _unbroadcast(g, ad_.shape)),
            (b, lambda g: _unbroadcast(g, bd.shape)),
        ],
    )


def sub(a, b):
    if not _any_var(a, b):
        return np.subtract(a, b)
    ad_, bd = value_of(a), value_of(b)
    out = ad_ - bd
    return _node(
        out,
        [
            (a, lambda g: _unbroadcast(g, ad_.shape)),
            (b, lambda g: _unbroadcast(-g, bd.shape)),
        ],
    )


def mul(a, b):
    if not _any_var(a, b):
        return np.multiply(a, b)
    ad_, bd = value_of(a), value_of(b)
    out = ad_ * bd
    return _node(
        out,
        [
            (a, lambda g: _unbroadcast(g * bd, ad_.shape)),
            (b, lambda g: _unbroadcast(g * ad_, bd.shape)),
        ],
    )


def div(a, b):
    if not _any_var(a, b):
        return np.divide(a, b)
    ad_, bd = value_of(a), value_of(b)
    out = ad_ / bd
    return _node(
        out,
        [
            (a, lambda g: _unbroadcast(g / bd, ad_.shape)),
            (b, lambda g: _unbroadcast(-g * ad_ / (bd * bd), bd.shape)),
        ],
    )


def neg(a):
    if not _any_var(a):
        return np.negative(a)
    return _node(-a.data, [(a, lambda g: -g)])


def power(a, c: float):
    """Elementwise a**c for a constant exponent."""
    if not _any_var(a):
        return np.power(a, c)
    ad_ = a.data
    out = ad_**c
    return _node(out, [(a, lambda g: g * (c * ad_ ** (c - 1.0)))])


def absolute(a, deadband: float = 0.0):
    """|a| with subgradient 0 at 0.

    ``deadband`` widens the zero-subgradient region to |a| <= deadband:
    residuals at float-roundoff scale then stop producing unit-magnitude
    sign gradients, which would otherwise let Adam kick a perfectly
    converged fit out of its fixed point.
    """
    if not _any_var(a):
        return np.abs(a)
    s = np.sign(a.data)
    if deadband > 0.0:
        s = s * (np.abs(a.data) > deadband)
    return _node(np.abs(a.data), [(a, lambda g: g * s)])


# -- elementwise nonlinearities ------------------------------------------------


def exp(a):
    if not _any_var(a):
        return np.exp(a)
    out = np.exp(a.data)
    return _node(out, [(a, lambda g: g * out)])


def log(a):
    if not _any_var(a):
        return np.log(a)
    ad_ = a.data
    return _node(np.log(ad_), [(a, lambda g: g / ad_)])


def log1p(a):
    if not _any_var(a):
        return np.log1p(a)
    ad_ = a.data
    return _node(np.log1p(ad_), [(a, lambda g: g / (1.0 + ad_))])


def sqrt(a):
    if not _any_var(a):
        return np.sqrt(a)
    out = np.sqrt(a.data)
    return _node(out, [(a, lambda g: g / (2.0 * out))])


def sin(a):
    if not _any_var(a):
        return np.sin(a)
    ad_ = a.data
    return _node(np.sin(ad_), [(a, lambda g: g * np.cos(ad_))])


def cos(a):
    if not _any_var(a):
        return np.cos(a)
    ad_ = a.data
    return _node(np.cos(ad_), [(a, lambda g: -g * np.sin(ad_))])


def arccos(a):
    """Inverse cosine; callers must clamp the argument away from ±1."""
    if not _any_var(a):
        return np.arccos(a)
    ad_ = a.data
    d = -1.0 / np.sqrt(1.0 - ad_ * ad_)
    return _node(np.arccos(ad_), [(a, lambda g: g * d)])


def _sigmoid(x: Array) -> Array:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _softplus(x: Array) -> Array:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|}); much faster than logaddexp
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a):
    if not _any_var(a):
        return _sigmoid(np.asarray(a, dtype=np.float64))
    out = _sigmoid(a.data)
    return _node(out, [(a, lambda g: g * out * (1.0 - out))])


def softplus(a):
    """log(1 + exp(a)), numerically stable; derivative is sigmoid(a)."""
    if not _any_var(a):
        return _softplus(np.asarray(a, dtype=np.float64))
    ad_ = a.data
    # share exp(-|x|) between the forward value and the backward sigmoid
    z = np.exp(-np.abs(ad_))
    out = np.maximum(ad_, 0.0) + np.log1p(z)
    sig = np.where(ad_ >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _node(out, [(a, lambda g: g * sig)])


def softplus_inverse(y: Array) -> Array:
    """Raw value r with softplus(r) = y; y is clipped to >= 1e-10."""
    y = np.maximum(np.asarray(y, dtype=np.float64), 1e-10)
    # log(expm1(y)); above 33 the identity is exact to < 5e-15
    return np.where(y > 33.0, y, np.log(np.expm1(np.minimum(y, 33.0))))


def relu(a):
    """max(a, 0) with subgradient 0 at the kink."""
    if not _any_var(a):
        return np.maximum(a, 0.0)
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def maximum(a, b):
    """Elementwise max; at ties neither side receives gradient."""
    if not _any_var(a, b):
        return np.maximum(a, b)
    ad_, bd = value_of(a), value_of(b)
    out = np.maximum(ad_, bd)
    ma = ad_ > bd
    mb = bd > ad_
    return _node(
        out,
        [
            (a, lambda g: _unbroadcast(g * ma, ad_.shape)),
            (b, lambda g: _unbroadcast(g * mb, bd.shape)),
        ],
    )


def minimum(a, b):
    if not _any_var(a, b):
        return np.minimum(a, b)
    ad_, bd = value_of(a), value_of(b)
    out = np.minimum(ad_, bd)
    ma = ad_ < bd
    mb = bd < ad_
    return _node(
        out,
        [
            (a, lambda g: _unbroadcast(g * ma, ad_.shape)),
            (b, lambda g: _unbroadcast(g * mb, bd.shape)),
        ],
    )


def clip(a, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient passes strictly inside the interval."""
    if not _any_var(a):
        return np.clip(a, lo, hi)
    mask = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), [(a, lambda g: g * mask)])


def where(mask: Array, a, b):
    """Select by a constant boolean mask."""
    if not _any_var(a, b):
        return np.where(mask, a, b)
    ad_, bd = value_of(a), value_of(b)
    out = np.where(mask, ad_, bd)
    return _node(
        out,
        [
            (a, lambda g: _unbroadcast(g * mask, ad_.shape)),
            (b, lambda g: _unbroadcast(g * ~np.asarray(mask, dtype=bool), bd.shape)),
        ],
    )


# -- linear algebra and shape ----------------------------------------------


def matmul(a, b):
    """Matrix product; operands must have ndim >= 2 (stacks broadcast)."""
    if not _any_var(a, b):
        return np.matmul(a, b)
    ad_, bd = value_of(a), value_of(b)
    out = np.matmul(ad_, bd)
    bt = np.swapaxes(bd, -1, -2)
    at = np.swapaxes(ad_, -1, -2)
    return _node(
        out,
        [
            (a, lambda g: _unbroadcast(np.matmul(g, bt), ad_.shape)),
            (b, lambda g: _unbroadcast(np.matmul(at, g), bd.shape)),
        ],
    )


def reshape(a, shape):
    if not _any_var(a):
        return np.reshape(a, shape)
    old = a.data.shape
    return _node(a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def swapaxes(a, i: int, j: int):
    if not _any_var(a):
        return np.swapaxes(a, i, j)
    return _node(np.swapaxes(a.data, i, j), [(a, lambda g: np.swapaxes(g, i, j))])


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)


def getitem(a, key):
    """Indexing; integer-array keys accumulate repeated indices in reverse."""
    if not _any_var(a):
        return np.asarray(a)[key]
    ad_ = a.data
    out = ad_[key]
    basic = _is_basic_key(key)

    def vjp(g):
        z = np.zeros_like(ad_)
        if basic:
            z[key] = g
        else:
            np.add.at(z, key, g)
        return z

    return _node(out, [(a, vjp)])


def take(a, idx: Array, axis: int = 0):
    """Gather rows by an integer index array along axis 0."""
    if axis != 0:
        raise ValueError("take currently supports axis=0 only")
    return getitem(a, (np.asarray(idx),))


def concat(parts: Sequence, axis: int = 0):
    if not _any_var(*parts):
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    datas = [value_of(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    pairs = []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(lo), int(hi))
        pairs.append((p, lambda g, s=tuple(sl): g[s]))
    return _node(out, pairs)


def stack(parts: Sequence, axis: int = 0):
    if not _any_var(*parts):
        return np.stack([np.asarray(p) for p in parts], axis=axis)
    datas = [value_of(p) for p in parts]
    out = np.stack(datas, axis=axis)
    pairs = []
    for i, p in enumerate(parts):
        pairs.append((p, lambda g, k=i: np.take(g, k, axis=axis)))
    return _node(out, pairs)


def sum_(a, axis=None, keepdims: bool = False):
    if not _any_var(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    ad_ = a.data
    out = ad_.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, ad_.shape).copy() if np.ndim(g) == 0 else np.full(ad_.shape, g)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, ad_.shape)

    return _node(out, [(a, vjp)])


def mean(a, axis=None, keepdims: bool = False):
    ad_ = value_of(a)
    n = ad_.size if axis is None else ad_.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a, axis: int = 0):
    if not _any_var(a):
        return np.cumsum(a, axis=axis)
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _node(out, [(a, vjp)])


def segment_sum(a, idx: Array, size: int):
    """Scatter-add rows of `a` into `size` output rows: out[idx[k]] += a[k]."""
    idx = np.asarray(idx)
    if not _any_var(a):
        out = np.zeros((size,) + np.asarray(a).shape[1:], dtype=np.float64)
        np.add.at(out, idx, a)
        return out
    ad_ = a.data
    out = np.zeros((size,) + ad_.shape[1:], dtype=np.float64)
    np.add.at(out, idx, ad_)
    return _node(out, [(a, lambda g: g[idx])])


def norm(a, axis=None, keepdims: bool = False):
    """Euclidean norm; not differentiable at 0 (callers avoid that)."""
    return sqrt(sum_(mul(a, a), axis=axis, keepdims=keepdims))


def normalize(a, axis: int = -1):
    """a / ||a|| along `axis`."""
    return div(a, norm(a, axis=axis, keepdims=True))


# -- differentiable SO(3) exponential ---------------------------------------


def so3_exp_var(v):
    """Rodrigues formula on the tape; safe at ||v|| = 0.

    The sinc-like coefficients switch to fourth-order Taylor series below
    1e-4 rad, with the exact branch evaluated at a clamped angle so no
    NaN can leak through the `where` select.
    """
    theta2 = sum_(mul(v, v))
    theta2_safe = maximum(theta2, 1e-8)
    theta = sqrt(theta2_safe)
    small = value_of(theta2) < 1e-8
    a_taylor = 1.0 - theta2 / 6.0 + mul(theta2, theta2) / 120.0
    b_taylor = 0.5 - theta2 / 24.0 + mul(theta2, theta2) / 720.0
    a_exact = div(sin(theta), theta)
    b_exact = div(1.0 - cos(theta), theta2_safe)
    a = where(small, a_taylor, a_exact)
    b = where(small, b_taylor, b_exact)

    vx, vy, vz = v[0], v[1], v[2]
    zero = mul(vx, 0.0)
    k_rows = stack(
        [
            stack([zero, neg(vz), vy]),
            stack([vz, zero, neg(vx)]),
            stack([neg(vy), vx, zero]),
        ]
    )
    k2 = matmul(k_rows, k_rows)
    return add(add(np.eye(3), mul(a, k_rows)), mul(b, k2))


# -- gradient evaluation, finite-difference verification ---------------------


def grad(loss_fn: Callable, p: Array) -> tuple[float, Array]:
    """Evaluate a scalar loss and its gradient at the parameter vector p.

    `loss_fn` must map a Var of p's shape to a scalar Var.  Raises
    NonFiniteLoss if the value or gradient is NaN/Inf.
    """
    pv = Var(np.asarray(p, dtype=np.float64))
    out = loss_fn(pv)
    if not isinstance(out, Var):
        raise TypeError("loss_fn must return a Var (got plain array)")
    if out.data.size != 1:
        raise ValueError("loss_fn must return a scalar")
    value = float(out.data)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss value is {value}")
    backward(out)
    g = pv.grad if pv.grad is not None else np.zeros_like(pv.data)
    g = np.asarray(g, dtype=np.float64).reshape(pv.data.shape)
    if not np.all(np.isfinite(g)):
        raise NonFiniteLoss("gradient has non-finite entries")
    return value, g


def finite_difference(loss_fn: Callable, p: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function of a flat vector."""
    p = np.asarray(p, dtype=np.float64)
    g = np.zeros_like(p)
    flat = p.reshape(-1)
    for i in range(flat.size):
        dp = np.zeros_like(flat)
        dp[i] = h
        hi = loss_fn(Var((flat + dp).reshape(p.shape)))
        lo = loss_fn(Var((flat - dp).reshape(p.shape)))
        g.reshape(-1)[i] = (float(value_of(hi)) - float(value_of(lo))) / (2.0 * h)
    return g


def gradient_relative_error(loss_fn: Callable, p: Array, h: float = 1e-5) -> float:
    """Max abs difference between analytic and FD gradients, scaled by
    the larger gradient magnitude."""
    _, g = grad(loss_fn, p)
    fd = finite_difference(loss_fn, p, h=h)
    scale = max(np.abs(g).max(), np.abs(fd).max(), 1e-8)
    return float(np.abs(g - fd).max() / scale)
