"""
How big is a sufficient subset?
================================

SIS size as the confidence threshold rises, split by whether the model was
right, and how an ensemble compares with its members.
"""

import numpy as np

from overinterp.analysis import ensemble_sis_comparison, sis_size_curves, welch_ci
from overinterp.data import compute_stats, normalize, synth_images
from overinterp.sis import SisConfig
from overinterp.smallnet import EnsembleClassifier, TrainConfig, train

raw_train, raw_test = synth_images(800, seed=1), synth_images(100, seed=2)
stats = compute_stats(raw_train)
train_set, test_set = normalize(raw_train, stats), normalize(raw_test, stats)

members = [train(train_set, TrainConfig(epochs=15, batch_size=64, lr=0.05, decay_epochs=(10,), seed=s), (64,))
           for s in range(3)]

taus = (0.5, 0.7, 0.9, 0.99)
curves = sis_size_curves(members[0], test_set, taus, SisConfig())
print(" tau   images  mean size (fraction)")
for t, n, m, ci in zip(curves.thresholds, curves.count, curves.mean, curves.ci):
    print("%5.2f  %6d  %.4f +- %.4f" % (t, n, m, ci))

# per image the SIS only grows as the threshold rises, because every
# threshold reads the same ranking
print("correct vs incorrect at each tau:")
for t, a, b in zip(taus, curves.mean_correct, curves.mean_incorrect):
    print("  %.2f  %.4f  %.4f" % (t, a, b))

# Welch interval on two made-up samples, to show the helper
rng = np.random.default_rng(0)
d, half = welch_ci(rng.normal(0.1, 0.02, 40), rng.normal(0.08, 0.03, 60))
print("Welch difference %.4f +- %.4f" % (d, half))

ens = EnsembleClassifier(members)
cmp_ = ensemble_sis_comparison(ens, members, test_set, 0.9, SisConfig(threshold=0.9))
print("ensemble accuracy %.1f%% vs members %s" % (cmp_.ensemble_accuracy, np.round(cmp_.member_accuracies, 1)))
print("mean SIS size at 0.9: ensemble %.4f, members %.4f (diff %.4f +- %.4f)"
      % (cmp_.ensemble_size, cmp_.member_size_mean, cmp_.diff, cmp_.diff_ci))
