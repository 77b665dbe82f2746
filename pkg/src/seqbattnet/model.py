"""Encoder + physics decoder wired into one trainable model."""
from __future__ import annotations

import numpy as np

from . import decoder
from .diffcore import nn
from .diffcore import tensor as T
from .encoder import EncoderWeights, HrmConfig, HrmGruEncoder


class SeqBattNet:
    """Predicts a discharge voltage trajectory from its first ``n`` samples.

    ``stack_sigmoid`` applies an extra logistic on top of the sigmoid output
    layer of ``g`` and ``f``. That is the literal reading of the OCV and
    resistance formulas; it confines the OCV to the upper part of
    ``(V_EOD, V0)`` and is therefore off by default.
    """

    def __init__(self, hrm, battery, seed=0, stack_sigmoid=False, weights=None):
        self.hrm = hrm
        self.battery = battery
        self.seed = seed
        self.stack_sigmoid = stack_sigmoid
        if weights is None:
            rng = nn.make_rng(seed)
            weights = {
                "encoder": EncoderWeights.init(hrm, rng),
                "g": nn.ocv_network(rng),
                "f": nn.resistance_network(rng, hrm.e_rc),
            }
        self.enc_weights = weights["encoder"]
        self.g_params = weights["g"]
        self.f_params = weights["f"]
        if self.f_params.out_features != battery.e_rc or hrm.e_rc != battery.e_rc:
            raise T.ShapeError("e_rc differs between encoder, resistance network and battery")
        self.encoder = HrmGruEncoder(hrm, self.enc_weights)

    def g(self, soc):
        out = nn.fnn_forward(self.g_params, soc)
        return T.sigmoid(out) if self.stack_sigmoid else out

    def f(self, x):
        out = nn.fnn_forward(self.f_params, x)
        return T.sigmoid(out) if self.stack_sigmoid else out

    def named_parameters(self):
        out = dict(self.enc_weights.named())
        out.update(self.g_params.named("g"))
        out.update(self.f_params.named("f"))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    # -- forward ---------------------------------------------------------

    def encode(self, windows, training=False, rng=None):
        return self.encoder.encode(windows, self.battery, self.g, training, rng)

    def forward(self, batch, training=False, rng=None, stop=False):
        """Predicted voltages ``(B, L)`` over the batch's current plan."""
        params = self.encode(batch.windows, training, rng)
        ro = decoder.rollout_fused(params, batch.currents, batch.step_dt, self.battery,
                                   self.g_params, self.f_params, self.stack_sigmoid, stop=stop)
        return ro, params

    def predict(self, cycle, mode="train_full", currents=None):
        """Roll one cycle forward from its measured window.

        ``currents`` defaults to the cycle's own current after the window.
        """
        n = self.battery.n
        if cycle.t_eod < n + (1 if currents is None else 0):
            raise decoder.InputError(f"cycle {cycle.cycle_index} is shorter than the window n={n}")
        plan = cycle.current[n:] if currents is None else np.asarray(currents, dtype=np.float64)
        with T.no_grad():
            params = self.encode(cycle.window(n)[None])
            return decoder.rollout(params, plan, self.battery, self.g, self.f, mode=mode,
                                   measured_prefix=cycle.voltage[:n], dt=cycle.dt)

    def embeddings(self, windows):
        """Normalized final high-level encoder states, eval mode."""
        with T.no_grad():
            zH = self.encoder.run(np.asarray(windows), self.battery.n)
            return self.encoder.features(zH).data.copy()

    # -- state -----------------------------------------------------------

    def state_arrays(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays):
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.data.shape:
                raise T.ShapeError(f"{k}: shape {a.shape} != {p.data.shape}")
            p.data = a.copy()

    def config_key(self):
        return (self.hrm, self.battery, self.stack_sigmoid)
