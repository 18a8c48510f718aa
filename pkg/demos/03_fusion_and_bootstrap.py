"""
Base model, context fusion and the bootstrap adapter
====================================================

Train every stage for one seed and score the three variants on the val
split. This is the same path the ``slotforge`` commands take, kept in
memory. About seven minutes on one core.
"""

import torch

from slotforge import pipeline as pl
from slotforge.scenegen import generate_dataset

torch.set_num_threads(1)
cfg = pl.PipelineConfig()
train = generate_dataset(cfg.generator, range(cfg.data.train_count))
val = generate_dataset(cfg.generator, range(cfg.data.train_count, cfg.data.train_count + cfg.data.val_count))

models = pl.fit_all(cfg, pl._images(train))
for row in pl.summarize(pl.score_variants(val, models, pl.VARIANTS)):
    print(f"{row['variant']:7s} mBO^i={row['mbo_i']:.3f} mBO^c={row['mbo_c']:.3f} mIoU={row['miou']:.3f}")

# the adapter is a per-channel affine map; how far did it move from identity?
a = models["bootstrap"].adaptive
print("alpha range", float(a.alpha.min()), float(a.alpha.max()), " |beta| mean", float(a.beta.abs().mean()))
