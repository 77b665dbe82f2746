"""Central finite differences, used to validate analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tape, backward, no_grad


def numeric_grad(fn, tensor, h=1e-5, index=None):
    """d fn() / d tensor by central differences; ``fn`` returns a scalar Tensor.

    ``index`` restricts the probe to those flat positions (others stay zero).
    """
    tensor.data = np.ascontiguousarray(tensor.data)
    data = tensor.data
    grad = np.zeros_like(data)
    flat = data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in (range(flat.size) if index is None else index):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
    return grad


def rel_error(a, n, atol=0.0):
    """Elementwise ``|a - n| / max(1e-8, |a| + |n|)``.

    A positive ``atol`` is first subtracted from ``|a - n|`` (floored at zero),
    which discounts the finite-difference rounding floor on near-zero entries.
    """
    a, n = np.asarray(a), np.asarray(n)
    diff = np.maximum(np.abs(a - n) - atol, 0.0)
    return diff / np.maximum(1e-8, np.abs(a) + np.abs(n))


def check_gradients(fn, tensors, h=1e-5, max_probes=None, rng=None, atol=0.0):
    """Max relative error between tape gradients and finite differences.

    With ``max_probes`` each tensor is checked at that many randomly drawn
    positions (all of them when it is smaller). Returns ``(worst, per_tensor)``
    where ``per_tensor`` maps each tensor's position in ``tensors`` to its own
    worst error.
    """
    with Tape() as tape:
        out = fn()
    grads = backward(tape, out)
    per = {}
    for i, t in enumerate(tensors):
        if not t.size:
            per[i] = 0.0
            continue
        idx = np.arange(t.size)
        if max_probes is not None and t.size > max_probes:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(rng.choice(t.size, size=max_probes, replace=False))
        num = numeric_grad(fn, t, h, idx)
        per[i] = float(rel_error(grads.of(t).reshape(-1)[idx], num.reshape(-1)[idx], atol).max())
    return max(per.values(), default=0.0), per
