"""
Full-scale TRI reproduction (optional, not run in CI)
=====================================================

Expects the three TRI cells converted to the canonical CSV layout::

    <root>/train/*.csv   (b1c0)
    <root>/val/*.csv     (b2c13)
    <root>/test/*.csv    (b1c4)

and trains five 1000-epoch runs with batch size 128, then reports the
ensemble test RMSE against the 2 x 0.028 V target.

    python demos/reproduce_tri.py /data/tri out/tri
"""
import sys
from pathlib import Path

from seqbattnet import data, trainer

if len(sys.argv) < 3:
    sys.exit(__doc__)
root, out = Path(sys.argv[1]), Path(sys.argv[2])

preset = data.PRESETS["tri"]
train = data.load_cycles(root / "train", preset)
val = data.load_cycles(root / "val", preset)
test = data.load_cycles(root / "test", preset)
if not (train and val and test):
    sys.exit(f"no usable cycles under {root}/{{train,val,test}}")
dt = sorted(c.dt for c in train)[len(train) // 2]
battery = preset.battery(dt=dt)
cfg = trainer.TrainConfig(epochs=1000, batch_size=128, seed=0, num_runs=5)

runs = trainer.train_runs(train, val, battery, train_cfg=cfg)
for r, (ckpt, hist) in enumerate(runs):
    ckpt.save(out / f"run{r}" / "checkpoint.json")
    trainer.write_history(hist, out / f"run{r}" / "history.csv")
rep = trainer.evaluate([c for c, _ in runs], test)
target = 2 * 0.028
print(f"ensemble test RMSE {rep.rmse:.4f} V, MAE {rep.mae:.4f} V, MAPE {rep.mape:.4f} %")
print(f"{'within' if rep.rmse <= target else 'outside'} 2x of 0.028 V ({target:.3f} V)")
