"""
Training on 5% of the pixels
=============================

Keep only the 5% of pixels a model ranks as most critical, mask the rest,
and see what that sparse signal supports. Random 5% subsets serve as the
control. Runs on the 16x16x3 synthetic stand-in in under a minute.
"""

from dataclasses import replace

import numpy as np

from overinterp.analysis import accuracy, heatmap, transfer_matrix
from overinterp.data import compute_stats, normalize, synth_images
from overinterp.sis import SisConfig
from overinterp.smallnet import TrainConfig, train
from overinterp.subsets import build_backselect_subsets, build_random_subsets, materialize, retrain_on_subsets

raw_train, raw_test = synth_images(800, seed=1), synth_images(150, seed=2)
stats = compute_stats(raw_train)
train_set, test_set = normalize(raw_train, stats), normalize(raw_test, stats)

cfg = TrainConfig(epochs=15, batch_size=64, lr=0.05, decay_epochs=(10,), seed=0)
model = train(train_set, cfg, (64,))
print("full images: %.1f%%" % accuracy(model, test_set))

# 5% of 256 pixels keeps 12 per image
sis_cfg = SisConfig(threshold=0.99)
bs_test = build_backselect_subsets(model, test_set, 0.05, sis_cfg)
rnd_test = build_random_subsets(test_set, 0.05, seed=7)
print("pixels kept per image:", bs_test.retained)
print("own backward-selection subsets: %.1f%%" % accuracy(model, materialize(bs_test, test_set)))
print("random subsets: %.1f%%" % accuracy(model, materialize(rnd_test, test_set)))

# where do the kept pixels sit?
h = heatmap(bs_test.masks)
print("kept-pixel frequency (x100):")
print(np.round(100 * h.frequency).astype(int))

# a fresh model trained only on the sparse images
bs_train = build_backselect_subsets(model, train_set, 0.05, sis_cfg)
retrained = retrain_on_subsets(bs_train, train_set, replace(cfg, seed=1), (64,))
print("retrained on subsets, tested on subsets: %.1f%%" % accuracy(retrained, materialize(bs_test, test_set)))

# do the subsets of one model mean anything to another replicate?
other = train(train_set, TrainConfig(epochs=15, batch_size=64, lr=0.05, decay_epochs=(10,), seed=3), (64,))
bs_other = build_backselect_subsets(other, test_set, 0.05, sis_cfg)
tm = transfer_matrix([model, other], [bs_test, bs_other], test_set, labels=("seed0", "seed3"))
print("transfer matrix (rows: whose subsets, columns: evaluator):")
print(np.round(tm.accuracy, 1))
