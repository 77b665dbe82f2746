"""
Desk-scale training
===================

Five seeded runs on the synthetic split, each 200 epochs, then evaluation of
every run and of the averaged prediction. Histories and checkpoints land in
the output directory.
"""
import sys
import time
from pathlib import Path

import numpy as np

from seqbattnet import data, trainer

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/desk")
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 200

train, val, test, battery = data.desk_split()
cfg = trainer.TrainConfig(epochs=epochs, batch_size=32, seed=0, num_runs=5, lr_counter_reset=True)

# %%
# Independent runs seeded 0..4.
t0 = time.perf_counter()
runs = trainer.train_runs(train, val, battery, train_cfg=cfg)
print(f"trained {len(runs)} runs in {time.perf_counter() - t0:.0f}s")

singles = []
for r, (ckpt, hist) in enumerate(runs):
    ckpt.save(out / f"run{r}" / "checkpoint.json")
    trainer.write_history(hist, out / f"run{r}" / "history.csv")
    rep = trainer.evaluate(ckpt, test)
    singles.append(rep.rmse)
    drop = hist[0]["val_loss"] / min(h["val_loss"] for h in hist)
    print(f"run {r}: best epoch {ckpt.epoch}, val loss drop {drop:.1f}x, "
          f"test RMSE {rep.rmse:.4f} V, MAE {rep.mae:.4f} V, MAPE {rep.mape:.3f} %")

# %%
# Averaging the five voltage trajectories.
ens = trainer.evaluate([c for c, _ in runs], test)
print(f"ensemble RMSE {ens.rmse:.4f} V vs median single run {np.median(singles):.4f} V")
