"""Hierarchical two-level GRU encoder producing per-cycle adaptation parameters.

A low-level GRU (``L``) and a high-level GRU (``H``) walk the embedded
window. Before each step a few preparatory updates run off the tape; only the
final low/high update of each step is differentiated. The last high-level
state is normalized, projected, and mapped into bounded physical parameters.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import decoder
from .diffcore import nn
from .diffcore import tensor as T
from .diffcore.tensor import Tensor

R0_RANGE = (1e-3, 0.5)
TAU_RANGE = (1e-2, 1e5)


@dataclass(frozen=True)
class HrmConfig:
    N: int = 1
    T: int = 2
    d_emb: int = 32
    d_L: int = 128
    d_H: int = 64
    dropout_rate: float = 0.1
    e_rc: int = 2
    # x' = (x - input_shift) / input_scale per column (I, V); identity by default
    input_shift: tuple = (0.0, 0.0)
    input_scale: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.N < 1 or self.T < 1:
            raise ValueError("N and T must be positive")
        if min(self.d_emb, self.d_L, self.d_H, self.e_rc) < 1:
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise nn.ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        object.__setattr__(self, "input_shift", tuple(float(v) for v in self.input_shift))
        object.__setattr__(self, "input_scale", tuple(float(v) for v in self.input_scale))

    @property
    def Q(self):
        return self.N * self.T - 1

    @property
    def d_out(self):
        return 2 * self.e_rc + 3

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("input_shift", "input_scale"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class EncoderWeights:
    W_emb: Tensor   # (d_emb, 2)
    b_emb: Tensor
    gru_L: nn.GruParams
    gru_H: nn.GruParams
    gamma: Tensor
    beta_ln: Tensor
    W_out: Tensor   # (d_out, d_H)
    b_out: Tensor

    @classmethod
    def init(cls, cfg, rng):
        return cls(
            W_emb=nn.uniform_init(rng, (cfg.d_emb, 2), 2, "enc.W_emb"),
            b_emb=nn.zeros_param(cfg.d_emb, "enc.b_emb"),
            gru_L=nn.GruParams.init(cfg.d_emb + cfg.d_H, cfg.d_L, rng, "enc.gru_L"),
            gru_H=nn.GruParams.init(cfg.d_L, cfg.d_H, rng, "enc.gru_H"),
            gamma=Tensor(np.ones(cfg.d_H), requires_grad=True, name="enc.gamma"),
            beta_ln=nn.zeros_param(cfg.d_H, "enc.beta_ln"),
            W_out=nn.uniform_init(rng, (cfg.d_out, cfg.d_H), cfg.d_H, "enc.W_out"),
            b_out=nn.zeros_param(cfg.d_out, "enc.b_out"),
        )

    def named(self):
        out = {"enc.W_emb": self.W_emb, "enc.b_emb": self.b_emb}
        out.update(self.gru_L.named("enc.gru_L"))
        out.update(self.gru_H.named("enc.gru_H"))
        out.update({"enc.gamma": self.gamma, "enc.beta_ln": self.beta_ln,
                    "enc.W_out": self.W_out, "enc.b_out": self.b_out})
        return out


@dataclass
class AdaptationParams:
    """Batched encoder outputs; every field has leading dimension B."""

    R0: Tensor
    tau: Tensor
    SOC0: Tensor
    SOH: Tensor
    w: Tensor
    v_rc0: Tensor
    ocv0: Tensor

    def as_numpy(self):
        return {k: getattr(self, k).data.copy() for k in
                ("R0", "tau", "SOC0", "SOH", "w", "v_rc0", "ocv0")}


def aff_sigmoid(z, lo, hi):
    return lo + (hi - lo) * T.sigmoid(z)


class HrmGruEncoder:
    def __init__(self, cfg, weights):
        if weights.W_out.shape[0] != cfg.d_out:
            raise T.ShapeError(f"head width {weights.W_out.shape[0]} != 2*e_rc+3 = {cfg.d_out}")
        self.cfg = cfg
        self.w = weights
        self.call_counts = Counter()

    def _gru_L(self, x, h):
        self.call_counts["L"] += 1
        return nn.gru_cell(x, h, self.w.gru_L)

    def _gru_H(self, x, h):
        self.call_counts["H"] += 1
        return nn.gru_cell(x, h, self.w.gru_H)

    def embed(self, window, n=None):
        """``(B, n, 2)`` or ``(n, 2)`` window -> ``(B, n, d_emb)``."""
        x = np.asarray(window.data if isinstance(window, Tensor) else window, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != 2:
            raise T.ShapeError(f"window must be (B, n, 2), got {x.shape}")
        if n is not None and x.shape[1] != n:
            raise T.ShapeError(f"window has {x.shape[1]} rows, expected {n}")
        cfg = self.cfg
        if cfg.input_shift != (0.0, 0.0) or cfg.input_scale != (1.0, 1.0):
            x = (x - np.asarray(cfg.input_shift)) / np.asarray(cfg.input_scale)
        return T.affine(x, self.w.W_emb, self.w.b_emb)

    def micro_update(self, zL, zH, e_s):
        """``N*T - 1`` preparatory updates, computed off the tape."""
        cfg = self.cfg
        if cfg.Q == 0:
            return zL, zH
        with T.no_grad():
            zL, zH, e_s = Tensor(zL.data), Tensor(zH.data), Tensor(e_s.data)
            for q in range(1, cfg.Q + 1):
                zL = self._gru_L(T.concat([e_s, zH], axis=-1), zL)
                if q % cfg.T == 0:
                    zH = self._gru_H(zL, zH)
        return zL, zH

    def main_update(self, zL_pre, zH_pre, e_s):
        zL = self._gru_L(T.concat([e_s, zH_pre], axis=-1), zL_pre)
        zH = self._gru_H(zL, zH_pre)
        return zL, zH

    def run(self, window, n=None):
        """Final high-level state after consuming every window row."""
        emb = self.embed(window, n)
        B, steps = emb.shape[0], emb.shape[1]
        zL = Tensor(np.zeros((B, self.cfg.d_L)))
        zH = Tensor(np.zeros((B, self.cfg.d_H)))
        for s in range(steps):
            e_s = emb[:, s, :]
            zL, zH = self.micro_update(zL, zH, e_s)
            zL, zH = self.main_update(zL, zH, e_s)
        return zH

    def features(self, zH, training=False, rng=None):
        """Normalized final state; this is the embedding exported for PCA."""
        h = nn.dropout(zH, self.cfg.dropout_rate, training, rng)
        return nn.layer_norm(h, self.w.gamma, self.w.beta_ln)

    def head(self, zH, training=False, rng=None):
        return T.affine(self.features(zH, training, rng), self.w.W_out, self.w.b_out)

    def range_map(self, o):
        e = self.cfg.e_rc
        R0 = aff_sigmoid(o[:, 0], *R0_RANGE)
        tau = aff_sigmoid(o[:, 1:1 + e], *TAU_RANGE)
        soc0 = T.sigmoid(o[:, 1 + e])
        soh = T.sigmoid(o[:, 2 + e])
        w = T.softmax(o[:, 3 + e:3 + 2 * e])
        return R0, tau, soc0, soh, w

    def encode(self, window, battery, g, training=False, rng=None):
        x = np.asarray(window.data if isinstance(window, Tensor) else window, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        n = battery.n
        if x.shape[1] < n:
            raise decoder.InputError(f"window has {x.shape[1]} rows, need {n}")
        x = x[:, :n]
        zH = self.run(x, n)
        R0, tau, soc0, soh, w = self.range_map(self.head(zH, training, rng))
        v_rc0, ocv0 = init_rc_voltages(R0, soc0, w, x[:, -1, 0], x[:, -1, 1], battery, g)
        return AdaptationParams(R0=R0, tau=tau, SOC0=soc0, SOH=soh, w=w, v_rc0=v_rc0, ocv0=ocv0)


def init_rc_voltages(R0, soc0, w, i_last, v_last, battery, g):
    """Split the gap between model OCV and the last measured voltage across the branches.

    Returns ``(v_rc0, ocv0)`` with ``v_rc0`` of shape ``(B, e_rc)``.
    """
    soc0 = T.as_tensor(soc0)
    B = soc0.size
    ocv0 = T.reshape(decoder.ocv(T.reshape(soc0, (B, 1)), battery, g), (B,))
    s0 = ocv0 - T.as_tensor(R0) * np.asarray(i_last, dtype=np.float64).reshape(B) \
        - np.asarray(v_last, dtype=np.float64).reshape(B)
    v_rc0 = T.as_tensor(w) * T.reshape(s0, (B, 1))
    return v_rc0, ocv0
