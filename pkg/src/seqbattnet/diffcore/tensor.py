"""Tape-based reverse-mode automatic differentiation on numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in creation
order; :func:`backward` walks the tape in reverse and accumulates gradients
into a map keyed by the leaf tensors. Outside a tape nothing is recorded, so
inference runs without bookkeeping.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not chain."""


def _active_tape():
    return getattr(_local, "tape", None)


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Tapes are thread-local: each thread activates its own with ``with Tape():``.
    """

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, output):
        return backward(self, output)


@contextmanager
def no_grad():
    """Suspend recording on the current thread."""
    prev = _active_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = prev


class Tensor:
    """A float64 array that can take part in a recorded computation.

    Leaf tensors created with ``requires_grad=True`` are parameters. Tensors
    produced by recorded ops carry their parents and a local backward rule.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

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
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar; the actual rules live in ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, rule):
    tape = getattr(_local, "tape", None)
    out = Tensor(data)
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = rule
                tape.nodes.append(out)
                break
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class GradMap(dict):
    """Leaf tensor -> gradient array. Missing leaves have zero gradient."""

    def of(self, t):
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


def backward(tape, output):
    """Gradients of the scalar ``output`` w.r.t. every leaf that reaches it."""
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    result = GradMap()
    if not output.requires_grad:
        return result
    if output._backward is None:
        result[output] = np.ones_like(output.data)
        return result
    grads = {id(output): np.ones_like(output.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        pgs = node._backward(g)
        for p, pg in zip(node._parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            prev = grads.get(k)
            grads[k] = pg if prev is None else prev + pg
            if p._backward is None:
                leaves[k] = p
    for k, p in leaves.items():
        result[p] = grads[k]
    return result


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    """``a ** p`` for a constant real exponent."""
    a = as_tensor(a)
    ad = a.data
    return _node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a):
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _node(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


_sigmoid = expit


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is 1 inside (boundary included), 0 outside."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _node(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def huber(pred, truth, beta):
    """Elementwise Huber loss: ``d^2 / (2 beta)`` when ``|d| < beta``, else ``|d| - beta / 2``."""
    pred, truth = as_tensor(pred), as_tensor(truth)
    d = pred.data - truth.data
    ad = np.abs(d)
    quad = ad < beta
    out = np.where(quad, d * d / (2.0 * beta), ad - 0.5 * beta)
    slope = np.where(quad, d / beta, np.sign(d))

    def rule(g):
        gd = g * slope
        return _unbroadcast(gd, pred.data.shape), _unbroadcast(-gd, truth.data.shape)

    return _node(out, (pred, truth), rule)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def affine(x, W, b=None):
    """``x @ W.T + b`` over the last axis of ``x``; ``W`` is ``(k, d)``."""
    x, W = as_tensor(x), as_tensor(W)
    xd, Wd = x.data, W.data
    if Wd.ndim != 2 or xd.shape[-1] != Wd.shape[1]:
        raise ShapeError(f"affine: input {xd.shape} does not chain with weight {Wd.shape}")
    out = xd @ Wd.T
    if b is None:
        def rule(g):
            g2 = g.reshape(-1, g.shape[-1])
            return g @ Wd, g2.T @ xd.reshape(-1, xd.shape[-1])
        return _node(out, (x, W), rule)

    b = as_tensor(b)
    if b.data.shape != (Wd.shape[0],):
        raise ShapeError(f"affine: bias {b.data.shape} does not match weight {Wd.shape}")
    out = out + b.data

    def rule_b(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ Wd, g2.T @ xd.reshape(-1, xd.shape[-1]), g2.sum(axis=0)

    return _node(out, (x, W, b), rule_b)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), rule)


def tmean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis) * (1.0 / count)


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), rule)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize the last axis, then scale by ``gamma`` and shift by ``beta``."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    k = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def rule(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / k)
        g2 = g.reshape(-1, k)
        return dx, (g2 * xhat.reshape(-1, k)).sum(axis=0), g2.sum(axis=0)

    return _node(out, (a, gamma, beta), rule)


# ---------------------------------------------------------------------------
# structural ops


def getitem(a, idx, unique=False):
    """``a[idx]``; pass ``unique=True`` when a fancy index has no repeats."""
    a = as_tensor(a)
    shape = a.data.shape

    def rule(g):
        full = np.zeros(shape)
        if not unique and _needs_add_at(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(a.data[idx], (a,), rule)


def _needs_add_at(idx):
    # fancy indices may repeat; basic slices never alias
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), rule)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def rule(g):
        return tuple(np.squeeze(part, axis=axis) for part in np.split(g, n, axis=axis))

    return _node(out, tuple(tensors), rule)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def scale_mask(a, mask):
    """Multiply by a constant array (used for dropout masks)."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    return _node(a.data * m, (a,), lambda g: (_unbroadcast(g * m, a.data.shape),))


def _act_forward(kind, a):
    if kind == "silu":
        s = _sigmoid(a)
        return a * s, s
    if kind == "sigmoid":
        s = _sigmoid(a)
        return s, s
    if kind == "tanh":
        t = np.tanh(a)
        return t, t
    raise ValueError(f"mlp: unsupported activation {kind!r}")


def _act_backward(kind, g, a, h, aux):
    if kind == "silu":
        return g * aux * (1.0 + a * (1.0 - aux))
    if kind == "sigmoid":
        return g * h * (1.0 - h)
    return g * (1.0 - h * h)


def mlp_apply(h, layers):
    """Plain-array forward of a layer stack; returns ``(out, cache)``."""
    cache = []
    for W, b, kind in layers:
        Wd = W.data
        if h.shape[-1] != Wd.shape[1]:
            raise ShapeError(f"mlp: input {h.shape} does not chain with weight {Wd.shape}")
        a = h @ Wd.T + b.data
        out, aux = _act_forward(kind, a)
        cache.append((h, Wd, a, out, aux, kind))
        h = out
    return h, cache


def mlp_vjp(cache, g):
    """Gradients ``(input, W1, b1, W2, b2, ...)`` for the output gradient ``g``."""
    grads = []
    for h_in, Wd, a, out, aux, kind in reversed(cache):
        ga = _act_backward(kind, g, a, out, aux)
        ga2 = ga.reshape(-1, ga.shape[-1])
        grads.append(ga2.sum(axis=0))
        grads.append(ga2.T @ h_in.reshape(-1, h_in.shape[-1]))
        g = ga @ Wd
    grads.append(g)
    return tuple(reversed(grads))


def mlp_jvp(cache, col):
    """Derivative of every output w.r.t. input column ``col``, per row."""
    t = None
    for h_in, Wd, a, out, aux, kind in cache:
        ta = Wd[:, col] if t is None else t @ Wd.T
        t = _act_backward(kind, ta, a, out, aux)
    return t


def mlp(x, layers):
    """Fused stack of ``act(h @ W.T + b)`` layers recorded as a single node.

    ``layers`` is a sequence of ``(W, b, activation)``.
    """
    x = as_tensor(x)
    h, cache = mlp_apply(x.data, layers)
    parents = [x]
    for W, b, _ in layers:
        parents.extend((W, b))
    return _node(h, tuple(parents), lambda g: mlp_vjp(cache, g))


def scale_shift(a, scale, shift):
    """``shift + scale * a`` for constant reals."""
    a = as_tensor(a)
    return _node(shift + scale * a.data, (a,), lambda g: (g * scale,))
