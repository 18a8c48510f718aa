"""
Synthetic scenes and the frozen patch encoder
=============================================

Render a few toy scenes, look at their masks, and check what the encoder
sees. Writes scenes.png to the working directory.
"""

import numpy as np
import torch
from PIL import Image

from slotforge.pipeline import PipelineConfig, build_encoder, colorize
from slotforge.scenegen import encode, generate_dataset

cfg = PipelineConfig()
samples = generate_dataset(cfg.generator, range(6))

for s in samples:
    n = len(s.metadata["objects"])
    print(f"{s.metadata['background']:8s} objects={n} fg fraction={s.fgbg_mask.mean():.2f}")

# top row the images, bottom row the instance masks
top = np.concatenate([np.round(s.image * 255).astype(np.uint8) for s in samples], axis=1)
bottom = np.concatenate([colorize(s.instance_mask) for s in samples], axis=1)
Image.fromarray(np.concatenate([top, bottom], axis=0)).save("scenes.png")

# the encoder maps each 8x8 patch to a 64-d vector
encoder = build_encoder(cfg)
feats = encode(torch.from_numpy(np.stack([s.image for s in samples])), encoder)
print("feature map", tuple(feats.shape))

# fg and bg patches should already sit apart in feature space
s = samples[0]
p = cfg.encoder.patch_size
n = cfg.generator.image_size // p
fg = s.fgbg_mask.reshape(n, p, n, p).mean((1, 3)) > 0.5
f = feats[0].reshape(-1, 64)
f = f / f.norm(dim=-1, keepdim=True)
fg_mean = f[torch.from_numpy(fg.ravel())].mean(0)
bg_mean = f[torch.from_numpy(~fg.ravel())].mean(0)
print("cosine(fg mean, bg mean) =", float(fg_mean @ bg_mean / fg_mean.norm() / bg_mean.norm()))
