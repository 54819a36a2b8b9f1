"""Minimal reverse-mode autodiff over numpy arrays.

A :class:`Var` wraps an ndarray and records how it was produced; calling
:func:`backward` on a scalar Var walks the recorded graph in reverse and
returns gradients for the requested leaves.  Only the operations needed by
the stroke-field renderer are implemented.

Every public op in this module also accepts plain ndarrays (or scalars) and
then simply computes the forward value with numpy.  Code written against
these ops therefore runs in two modes: a fast tape-free mode used by tests
and finite-difference checks, and a taped mode used to obtain gradients.
The two modes share one implementation of the math, so they cannot drift
apart.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "backward",
    "value",
    "is_var",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "absolute",
    "sign",
    "maximum",
    "minimum",
    "clip",
    "where",
    "sigmoid",
    "softplus",
    "asum",
    "cumsum",
    "reshape",
    "gather",
    "scatter",
    "detach",
]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g.reshape(shape))


class Var:
    """An array node in the computation graph.

    ``_vjp`` maps the output gradient to a tuple of gradients aligned with
    ``_parents`` (one entry per parent Var; constants are baked into the
    closure and get no entry).
    """

    __slots__ = ("data", "_parents", "_vjp")

    # keep numpy from absorbing Vars into object arrays; binary ops then
    # fall through to the reflected dunders below
    __array_ufunc__ = None

    def __init__(self, data, _parents=(), _vjp=None):
        self.data = np.asarray(data)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Var):
            sa, sb = self.data.shape, other.data.shape
            return Var(
                self.data + other.data,
                (self, other),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
            )
        out = self.data + other
        sa = self.data.shape
        return Var(out, (self,), lambda g: (_unbroadcast(g, sa),))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Var):
            sa, sb = self.data.shape, other.data.shape
            return Var(
                self.data - other.data,
                (self, other),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
            )
        sa = self.data.shape
        return Var(self.data - other, (self,), lambda g: (_unbroadcast(g, sa),))

    def __rsub__(self, other):
        sa = self.data.shape
        return Var(other - self.data, (self,), lambda g: (_unbroadcast(-g, sa),))

    def __mul__(self, other):
        if isinstance(other, Var):
            a, b = self.data, other.data
            return Var(
                a * b,
                (self, other),
                lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            )
        a, b = self.data, other
        return Var(a * b, (self,), lambda g: (_unbroadcast(g * b, a.shape),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            a, b = self.data, other.data
            out = a / b
            return Var(
                out,
                (self, other),
                lambda g: (
                    _unbroadcast(g / b, a.shape),
                    _unbroadcast(-g * out / b, b.shape),
                ),
            )
        a, b = self.data, other
        return Var(a / b, (self,), lambda g: (_unbroadcast(g / b, a.shape),))

    def __rtruediv__(self, other):
        a = self.data
        out = other / a
        return Var(out, (self,), lambda g: (_unbroadcast(-g * out / a, a.shape),))

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise TypeError("Var ** exponent must be a constant scalar")
        a = self.data
        return Var(a**n, (self,), lambda g: (g * n * a ** (n - 1),))

    def __getitem__(self, key):
        out = self.data[key]
        shape, dtype = self.data.shape, self.data.dtype

        def vjp(g):
            z = np.zeros(shape, dtype=dtype)
            np.add.at(z, key, g)
            return (z,)

        return Var(out, (self,), vjp)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x) -> np.ndarray:
    """Forward value of ``x`` whether taped or not."""
    return x.data if isinstance(x, Var) else np.asarray(x)


def detach(x):
    """Constant copy of ``x``: gradients stop here."""
    return x.data if isinstance(x, Var) else x


# ---------------------------------------------------------------------------
# Elementwise ops (Var or ndarray in, same kind out)
# ---------------------------------------------------------------------------


def exp(x):
    if isinstance(x, Var):
        y = np.exp(x.data)
        return Var(y, (x,), lambda g: (g * y,))
    return np.exp(x)


def log(x):
    if isinstance(x, Var):
        a = x.data
        return Var(np.log(a), (x,), lambda g: (g / a,))
    return np.log(x)


def sqrt(x):
    if isinstance(x, Var):
        y = np.sqrt(x.data)
        return Var(y, (x,), lambda g: (g * (0.5 / y),))
    return np.sqrt(x)


def sin(x):
    if isinstance(x, Var):
        a = x.data
        return Var(np.sin(a), (x,), lambda g: (g * np.cos(a),))
    return np.sin(x)


def cos(x):
    if isinstance(x, Var):
        a = x.data
        return Var(np.cos(a), (x,), lambda g: (-g * np.sin(a),))
    return np.cos(x)


def absolute(x):
    # subgradient 0 at the kink
    if isinstance(x, Var):
        a = x.data
        return Var(np.abs(a), (x,), lambda g: (g * np.sign(a),))
    return np.abs(x)


def sign(x):
    return np.sign(value(x))


def maximum(a, b):
    av, bv = value(a), value(b)
    mask = av >= bv  # ties go to the first argument
    out = np.where(mask, av, bv)
    if isinstance(a, Var) and isinstance(b, Var):
        sa, sb = av.shape, bv.shape
        return Var(
            out,
            (a, b),
            lambda g: (
                _unbroadcast(g * mask, sa),
                _unbroadcast(g * ~mask, sb),
            ),
        )
    if isinstance(a, Var):
        sa = av.shape
        return Var(out, (a,), lambda g: (_unbroadcast(g * mask, sa),))
    if isinstance(b, Var):
        sb = bv.shape
        return Var(out, (b,), lambda g: (_unbroadcast(g * ~mask, sb),))
    return out


def minimum(a, b):
    av, bv = value(a), value(b)
    mask = av <= bv
    out = np.where(mask, av, bv)
    if isinstance(a, Var) and isinstance(b, Var):
        sa, sb = av.shape, bv.shape
        return Var(
            out,
            (a, b),
            lambda g: (
                _unbroadcast(g * mask, sa),
                _unbroadcast(g * ~mask, sb),
            ),
        )
    if isinstance(a, Var):
        sa = av.shape
        return Var(out, (a,), lambda g: (_unbroadcast(g * mask, sa),))
    if isinstance(b, Var):
        sb = bv.shape
        return Var(out, (b,), lambda g: (_unbroadcast(g * ~mask, sb),))
    return out


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


def where(cond, a, b):
    """Select per element; ``cond`` is a constant boolean array."""
    cond = np.asarray(value(cond), dtype=bool)
    av, bv = value(a), value(b)
    out = np.where(cond, av, bv)
    if isinstance(a, Var) and isinstance(b, Var):
        sa, sb = av.shape, bv.shape
        return Var(
            out,
            (a, b),
            lambda g: (
                _unbroadcast(g * cond, sa),
                _unbroadcast(g * ~cond, sb),
            ),
        )
    if isinstance(a, Var):
        sa = av.shape
        return Var(out, (a,), lambda g: (_unbroadcast(g * cond, sa),))
    if isinstance(b, Var):
        sb = bv.shape
        return Var(out, (b,), lambda g: (_unbroadcast(g * ~cond, sb),))
    return out


def sigmoid(x):
    xv = value(x)
    # stable in both tails
    y = np.where(xv >= 0, 1.0 / (1.0 + np.exp(-np.abs(xv))), np.exp(-np.abs(xv)) / (1.0 + np.exp(-np.abs(xv))))
    if isinstance(x, Var):
        return Var(y, (x,), lambda g: (g * y * (1.0 - y),))
    return y


def softplus(x):
    xv = value(x)
    y = np.logaddexp(0.0, xv)
    if isinstance(x, Var):
        return Var(y, (x,), lambda g: (g * sigmoid(xv),))
    return y


# ---------------------------------------------------------------------------
# Reductions / structural ops
# ---------------------------------------------------------------------------


def asum(x, axis=None, keepdims=False):
    if isinstance(x, Var):
        a = x.data
        out = a.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, a.shape),)

        return Var(out, (x,), vjp)
    return np.asarray(x).sum(axis=axis, keepdims=keepdims)


def cumsum(x, axis):
    if isinstance(x, Var):
        out = np.cumsum(x.data, axis=axis)

        def vjp(g):
            return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

        return Var(out, (x,), vjp)
    return np.cumsum(x, axis=axis)


def reshape(x, shape):
    if isinstance(x, Var):
        orig = x.data.shape
        return Var(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))
    return np.asarray(x).reshape(shape)


def gather(x, idx):
    """``x[idx]`` for a 1-D source and integer index array (repeats allowed)."""
    idx = np.asarray(idx)
    if isinstance(x, Var):
        a = x.data
        out = a[idx]

        def vjp(g):
            flat_idx = idx.ravel()
            gw = g.ravel()
            if gw.dtype != np.float64:
                gw = gw.astype(np.float64)
            z = np.bincount(flat_idx, weights=gw, minlength=a.shape[0])
            return (z.astype(a.dtype, copy=False),)

        return Var(out, (x,), vjp)
    return np.asarray(x)[idx]


def scatter(vals, idx, size):
    """Place ``vals`` at unique positions ``idx`` of a zero vector of ``size``."""
    idx = np.asarray(idx)
    if isinstance(vals, Var):
        z = np.zeros(size, dtype=vals.data.dtype)
        z[idx] = vals.data
        return Var(z, (vals,), lambda g: (g[idx],))
    z = np.zeros(size, dtype=np.asarray(vals).dtype)
    z[idx] = vals
    return z


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Var) -> list:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
    return order


def backward(root: Var, wrt: list) -> list:
    """Gradients of scalar ``root`` with respect to each Var in ``wrt``.

    Intermediate gradients are freed as soon as their node has been
    processed, which keeps peak memory close to the forward pass.
    """
    if root.data.size != 1:
        raise ValueError("backward() requires a scalar output")
    order = _topo_order(root)
    wanted = {id(v): i for i, v in enumerate(wrt)}
    results: list = [None] * len(wrt)

    # dict value is [grad_array, owned]; "owned" means safe to add in place
    grads: dict[int, list] = {id(root): [np.ones_like(root.data), True]}
    for node in reversed(order):
        entry = grads.pop(id(node), None)
        if entry is None:
            continue
        g = entry[0]
        if id(node) in wanted:
            results[wanted[id(node)]] = g.copy()
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = [pg, False]
            elif acc[1]:
                np.add(acc[0], pg, out=acc[0])
            else:
                grads[id(parent)] = [acc[0] + pg, True]

    for i, v in enumerate(wrt):
        if results[i] is None:
            results[i] = np.zeros_like(v.data)
    return results
