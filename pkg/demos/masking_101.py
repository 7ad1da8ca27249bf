"""
Patches, masks and position codes
=================================

Cut a synthetic scan into patches, hide three quarters of them and look at
what the encoder and the decoder each get to see.
"""

from pathlib import Path

import numpy as np

from maeforge.data import SyntheticSpec, synth_dataset, write_image
from maeforge.mae import DESK_MAE, init_mae, mae_forward, masked_image
from maeforge.patcher import patchify, random_mask, sincos_pos_encoding
from maeforge.vit import ForwardTrace

train, _ = synth_dataset(SyntheticSpec(n_train=2, n_test=1, seed=0))
image = train.images[0]
print("image", image.shape, "label", train.labels[0])

# 32x32 pixels, 8x8 patches: a 4x4 grid of 64-value tokens
ps = patchify(image, DESK_MAE.patch)
print("patches", ps.patches.shape, "grid", ps.grid)

rng = np.random.default_rng(0)
plan = random_mask(ps.n, DESK_MAE.mask_ratio, rng)
print("visible", plan.visible_idx, "masked", len(plan.masked_idx))

# every grid cell gets a distinct code; row in the first half, column in the second
pe = sincos_pos_encoding(ps.grid, 16)
print("position table", pe.shape, "origin", np.round(pe[0], 2))

# the encoder only runs on visible tokens, the decoder on all of them
params = init_mae(rng, DESK_MAE)
trace = ForwardTrace()
pred, _ = mae_forward(image[None], params, DESK_MAE, plans=[plan], trace=trace)
print("encoder tokens", trace.encoder_tokens, "decoder tokens", trace.decoder_tokens, "pred", pred.shape)

out = Path("demo_out")
out.mkdir(exist_ok=True)
write_image(out / "original.pgm", image)
write_image(out / "masked.pgm", masked_image(plan, ps))
print("wrote", sorted(p.name for p in out.iterdir()))
