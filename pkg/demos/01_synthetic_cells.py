"""
Synthetic cells with a known circuit
====================================

The oracle discharges a second-order equivalent circuit from full charge
until the terminal voltage drops under cutoff. Capacity fades linearly with
the cycle number, so later cycles are shorter.
"""
import sys
from pathlib import Path

import numpy as np

from seqbattnet import data

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/cells")

# %%
# The desk split: 64 training cycles, and validation/test cycles that sit
# between training cycles on the fade axis.
train, val, test, battery = data.desk_split()
print(f"battery: V0={battery.V0} V, V_EOD={battery.V_EOD} V, n={battery.n}, dt={battery.dt} s")
for name, cycles in (("train", train), ("val", val), ("test", test)):
    lengths = np.array([c.t_eod for c in cycles])
    print(f"{name:5s} {len(cycles):3d} cycles, length {lengths.min()}..{lengths.max()} steps")

# %%
# Fade shortens discharge under an identical constant-current profile.
cfg = data.OracleConfig(battery=battery, num_cycles=5, soh_fade_per_cycle=0.05)
for c in data.synth_generate(cfg):
    print(f"cycle {c.cycle_index}: SOH {cfg.soh(c.cycle_index):.2f}, t_eod {c.t_eod}, "
          f"V {c.voltage[0]:.3f} -> {c.voltage[-1]:.3f}")

# %%
# Everything round-trips through the canonical CSV layout.
for name, cycles in (("train", train), ("val", val), ("test", test)):
    data.save_cycles(cycles, out / name / "cell.csv")
    data.write_manifest(out / name, data.PRESETS["synthetic"])
back = data.load_cycles(out / "train")
assert all(np.array_equal(a.voltage, b.voltage) for a, b in zip(train, back))
print(f"wrote {out}/{{train,val,test}}/cell.csv")
