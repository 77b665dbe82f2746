"""
Aging trajectory in embedding space
===================================

The encoder's normalized final state, projected on its two principal
components, orders cycles along the fade axis. Pass a checkpoint written by
``03_desk_training.py``; without one a short training run is done first.
"""
import sys

import numpy as np

from seqbattnet import data, objective, trainer

train, val, test, battery = data.desk_split()
cycles = sorted(train + val + test, key=lambda c: c.cycle_index)

if len(sys.argv) > 1:
    model = trainer.Checkpoint.load(sys.argv[1]).model()
else:
    ckpt, _ = trainer.train(train, val, battery,
                            train_cfg=trainer.TrainConfig(epochs=30, batch_size=32, seed=0))
    model = ckpt.model()

emb = model.embeddings(np.stack([c.window(battery.n) for c in cycles]))
rows = objective.pca2(emb, [c.cycle_index for c in cycles])
pc1 = np.array([r[0] for r in rows])
idx = np.array([r[2] for r in rows])

# %%
# A monotone fade shows up as a strong correlation between pc1 and cycle index.
print(f"{len(rows)} cycles, corr(pc1, cycle index) = {np.corrcoef(pc1, idx)[0, 1]:+.3f}")
for pc1_k, pc2_k, k in rows[::8]:
    print(f"cycle {k:3d}: pc1 {pc1_k:+.4f}  pc2 {pc2_k:+.4f}")
