"""
Rolling the circuit forward
===========================

With the OCV and resistance networks replaced by the oracle's closed forms
and the adaptation parameters set to the true values, the decoder reproduces
the generated voltage. In stop mode the rollout ends at the first predicted
sample under cutoff.
"""
import numpy as np

from seqbattnet import data, decoder
from seqbattnet.diffcore import tensor as T
from seqbattnet.encoder import AdaptationParams

battery = data.PRESETS["tri"].battery(dt=1.0)
cfg = data.OracleConfig(battery=battery, num_cycles=1, profile_kind="multistage", seed=2)
cyc = data.synth_generate(cfg)[0]
frac = (np.array(cfg.r_true) - battery.r_min) / (battery.r_max - battery.r_min)


def g(soc):
    return T.power(soc, cfg.ocv_exponent)


def f(x):
    return T.Tensor(np.tile(frac, (x.shape[0], 1)))


params = AdaptationParams(
    R0=T.Tensor([cfg.R0_true]), tau=T.Tensor([list(cfg.tau_true)]), SOC0=T.Tensor([1.0]),
    SOH=T.Tensor([1.0]), w=T.Tensor([[0.5, 0.5]]), v_rc0=T.Tensor([[0.0, 0.0]]),
    ocv0=T.Tensor([0.0]))

# %%
# Full mode follows the whole current plan.
full = decoder.rollout(params, cyc.current, battery, g, f, mode="train_full")
print(f"{cyc.t_eod} steps, max |V_pred - V_true| = {np.max(np.abs(full.voltage - cyc.voltage)):.2e} V")

# %%
# Stop mode halts on the crossing sample; both modes agree before it.
stop = decoder.rollout(params, np.r_[cyc.current, np.full(500, 1.0)], battery, g, f,
                       mode="infer_stop")
k = stop.stop_index
print(f"stop mode ends after {k} steps at {stop.voltage[-1]:.4f} V (cutoff {battery.V_EOD} V)")
assert np.array_equal(stop.voltage, full.voltage[:k])

# %%
# SOC falls monotonically and the branch voltages settle toward r * I.
print("SOC start/end:", stop.soc_traj[0], round(float(stop.soc_traj[-1]), 4))
print("RC voltages at stop:", np.round(stop.v_rc_traj[-1], 4),
      "steady-state r*I:", np.round(np.array(cfg.r_true) * cyc.current[k - 1], 4))
