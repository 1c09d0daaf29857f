"""Self-supervised patch encoder: the contrastive loss falls below chance.

With 15 negatives the loss of a model that cannot tell the true future row from
the distractors is ln 16.  Training on synthetic tissue patches should push the
held-out loss well below that.

    python demos/03_cpc.py
"""
import math

import numpy as np

from cellgraph.cpc import CpcConfig, CpcModel, evaluate_loss, sample_patches, train_cpc
from cellgraph.data import synth_sample
from cellgraph.pipeline import gray_of

images = [gray_of(synth_sample(i, seed=0, side=512).image) for i in range(16)]
patches = sample_patches(images, size=64, count=2048, seed=0)
order = np.random.default_rng(0).permutation(len(patches))
held, train = patches[order[:256]], patches[order[256:]]
cfg = CpcConfig(epochs=5, seed=0)
print(f"{len(train)} training patches, {len(held)} held out; chance level ln 16 = {math.log(16):.4f}")
print(f"untrained held-out loss {evaluate_loss(held, CpcModel.init(cfg)):.4f}")
log = []
model = train_cpc(train, cfg, log)
for entry in log:
    print(f"  epoch {entry['epoch']}: train loss {entry['loss']:.4f}")
print(f"trained held-out loss {evaluate_loss(held, model):.4f}")
