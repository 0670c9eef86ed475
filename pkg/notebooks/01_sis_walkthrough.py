"""
Sufficient input subsets on a toy problem
==========================================

A linearly separable 4x4 problem where only a hidden direction carries the
label. We train a small tanh network, rank every pixel by backward selection
and read off the smallest set of pixels that still keeps the prediction
confident.
"""

import numpy as np

from overinterp.data import synth_dataset
from overinterp.masking import apply_mask
from overinterp.sis import BATCHED, SisConfig, backselect, find_sis, sis_collection
from overinterp.smallnet import TrainConfig, train

data = synth_dataset("separable", 400, (4, 4, 1), seed=5, margin=1.0)
model = train(data, TrainConfig(epochs=20, batch_size=32, lr=0.05, decay_epochs=(), seed=0), (16,), "tanh")
print("train accuracy: %.1f%%" % (100 * np.mean(model.predict(data.images) == data.labels)))

# the hidden label direction, for reference
print("label direction (per pixel):")
print(np.round(data.direction[..., 0], 2))

# pick the first image the model is confident about
config = SisConfig(threshold=0.9)
probs = model.predict_proba(data.images)
i = int(np.flatnonzero(probs.max(1) >= 0.99)[0])
image = data.images[i]

# backward selection masks the least useful pixel first; the order is a
# full ranking of the 16 pixels
ranking = backselect(model, image, None, config)
print("removal order (least critical first):", ranking.order().tolist())
print("forward evaluations:", ranking.forward_evals)

res = find_sis(model, image, config, ranking)
print("SIS pixels:", res.mask.indices().tolist(), "confidence %.3f" % res.confidence)
print(res.mask.bits.astype(int))

# the SIS alone (everything else zeroed) is enough for the prediction
kept = apply_mask(image, ~res.mask.bits, np.zeros_like(image))
print("confidence on SIS alone: %.3f" % model.predict_proba(kept)[res.target_class])

# several disjoint SIS can exist for the same image
coll = sis_collection(model, image, config)
print("disjoint SIS found:", [r.mask.indices().tolist() for r in coll.results])
print("confidence with all of them masked: %.3f" % coll.residual_confidence)

# batched gradient selection trades exactness for ceil(p/k) gradient calls
fast = backselect(model, image, None, SisConfig(threshold=0.9, k=4, mode=BATCHED))
print("batched ranking used", fast.gradient_evals, "gradient evaluations")
print("batched SIS:", find_sis(model, image, config, fast).mask.indices().tolist())
