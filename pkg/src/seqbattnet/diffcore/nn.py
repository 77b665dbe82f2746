"""Neural building blocks on top of the tape engine."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    pass


def make_rng(seed):
    """Seeded PCG64 generator (numpy's documented, platform-stable bit stream)."""
    return np.random.Generator(np.random.PCG64(seed))


def uniform_init(rng, shape, fan_in, name=None):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name=None):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def affine(x, W, b=None):
    return T.affine(x, W, b)


_ACTIVATIONS = {
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "silu": T.silu,
    "exp": T.exp,
}


def activation(kind, x):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


softmax = T.softmax


def layer_norm(x, gamma, beta, eps=1e-5):
    return T.layer_norm(x, gamma, beta, eps)


def dropout(x, rate, training, rng):
    """Inverted dropout. Identity (the very same object) in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    x = T.as_tensor(x)
    keep = rng.random(x.shape) >= rate
    return T.scale_mask(x, keep / (1.0 - rate))


@dataclass
class GruParams:
    Wz: Tensor
    Wr: Tensor
    Wh: Tensor
    Uz: Tensor
    Ur: Tensor
    Uh: Tensor
    bz: Tensor
    br: Tensor
    bh: Tensor

    @classmethod
    def init(cls, d, m, rng, prefix="gru"):
        # fan-in of each gate's pre-activation is d + m
        fan = d + m
        return cls(
            Wz=uniform_init(rng, (m, d), fan, f"{prefix}.Wz"),
            Wr=uniform_init(rng, (m, d), fan, f"{prefix}.Wr"),
            Wh=uniform_init(rng, (m, d), fan, f"{prefix}.Wh"),
            Uz=uniform_init(rng, (m, m), fan, f"{prefix}.Uz"),
            Ur=uniform_init(rng, (m, m), fan, f"{prefix}.Ur"),
            Uh=uniform_init(rng, (m, m), fan, f"{prefix}.Uh"),
            bz=zeros_param(m, f"{prefix}.bz"),
            br=zeros_param(m, f"{prefix}.br"),
            bh=zeros_param(m, f"{prefix}.bh"),
        )

    @property
    def input_size(self):
        return self.Wz.shape[1]

    @property
    def hidden_size(self):
        return self.Wz.shape[0]

    def named(self, prefix):
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def gru_cell(x, h_prev, p):
    """One GRU step: update gate, reset gate, candidate, convex blend."""
    if T.as_tensor(x).shape[-1] != p.input_size:
        raise ShapeError(f"gru_cell: input width {T.as_tensor(x).shape[-1]} != {p.input_size}")
    if T.as_tensor(h_prev).shape[-1] != p.hidden_size:
        raise ShapeError(f"gru_cell: state width {T.as_tensor(h_prev).shape[-1]} != {p.hidden_size}")
    z = T.sigmoid(T.affine(x, p.Wz, p.bz) + T.affine(h_prev, p.Uz))
    r = T.sigmoid(T.affine(x, p.Wr, p.br) + T.affine(h_prev, p.Ur))
    cand = T.tanh(T.affine(x, p.Wh, p.bh) + T.affine(r * h_prev, p.Uh))
    return h_prev + z * (cand - h_prev)


@dataclass
class FnnParams:
    """Stack of (weight, bias, activation) layers."""

    layers: list = field(default_factory=list)

    @classmethod
    def init(cls, sizes, activations, rng, prefix="fnn"):
        if len(sizes) - 1 != len(activations):
            raise ConfigError("need one activation per layer")
        layers = []
        for i, (a, b, act) in enumerate(zip(sizes[:-1], sizes[1:], activations)):
            if act not in ("silu", "sigmoid"):
                raise ConfigError(f"unsupported activation {act!r}")
            layers.append((uniform_init(rng, (b, a), a, f"{prefix}.{i}.W"),
                           zeros_param(b, f"{prefix}.{i}.b"), act))
        return cls(layers)

    @property
    def in_features(self):
        return self.layers[0][0].shape[1]

    @property
    def out_features(self):
        return self.layers[-1][0].shape[0]

    def named(self, prefix):
        out = {}
        for i, (W, b, _) in enumerate(self.layers):
            out[f"{prefix}.{i}.W"] = W
            out[f"{prefix}.{i}.b"] = b
        return out


def ocv_network(rng):
    """``g``: SOC -> normalized OCV, 1 -> 32 -> 32 -> 1."""
    return FnnParams.init([1, 32, 32, 1], ["silu", "silu", "sigmoid"], rng, "g")


def resistance_network(rng, e_rc=2):
    """``f``: (SOC, SOH) -> normalized branch resistances, 2 -> 32 -> e_rc."""
    return FnnParams.init([2, 32, e_rc], ["silu", "sigmoid"], rng, "f")


def fnn_forward(p, x):
    x = T.as_tensor(x)
    if x.shape[-1] != p.in_features:
        raise ShapeError(f"fnn_forward: input width {x.shape[-1]} != {p.in_features}")
    return T.mlp(x, p.layers)
