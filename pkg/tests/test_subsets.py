import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overinterp.data import ImageBatch, NormalizationStats, synth_dataset
from overinterp.masking import MaskingStrategy, read_masks
from overinterp.sis import SisConfig
from overinterp.smallnet import SmallNet, TrainConfig, train
from overinterp.subsets import (
    SubsetDataset,
    SubsetSpec,
    benchmark_image_set,
    build_backselect_subsets,
    build_random_subsets,
    load_subsets,
    materialize,
    retained_count,
    retrain_on_subsets,
    save_subsets,
)

from oracles import brute_backselect, linear_probs, masked

SHAPE = (3, 4, 1)


def normalized(images, labels=None):
    shape = images.shape[1:]
    return ImageBatch(images, labels, "normalized", NormalizationStats.identity(shape))


def linear_model(seed, shape=SHAPE, k=3):
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    return SmallNet(shape, k, params=[(rng.standard_normal((d, k)), rng.standard_normal(k))])


def batch(n=6, seed=0, shape=SHAPE, k=3):
    rng = np.random.default_rng(seed)
    return normalized(rng.standard_normal((n,) + shape), rng.integers(0, k, n))


class TestRetainedCount:
    @pytest.mark.parametrize("rho,p,expected", [
        (0.05, 1024, 51), (0.3, 1024, 307), (0.5, 1024, 512), (1.0, 1024, 1024),
        (0.29, 100, 29), (0.001, 12, 1), (0.25, 12, 3),
    ])
    def test_values(self, rho, p, expected):
        assert retained_count(rho, p) == expected

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SubsetSpec(0.0, "random")
        with pytest.raises(ValueError):
            SubsetSpec(1.5, "random")
        with pytest.raises(ValueError):
            SubsetSpec(0.1, "saliency")


class TestBackselectSubsets:
    def test_rho_one_is_identity(self):
        b = batch()
        s = build_backselect_subsets(linear_model(0), b, 1.0)
        assert s.masks.all()
        assert np.array_equal(materialize(s, b).images, b.images)

    def test_top3_of_brute_force_ranking(self):
        for seed in range(5):
            model = linear_model(seed)
            b = batch(4, seed + 10)
            s = build_backselect_subsets(model, b, 0.25)
            W, bias = model.params[0]
            for i, img in enumerate(b.images):
                c = int(np.argmax(linear_probs(W, bias, img)))
                order = brute_backselect(lambda kept: linear_probs(W, bias, masked(img, kept, np.zeros(SHAPE)))[c], 12)
                assert sorted(np.flatnonzero(s.masks[i].reshape(-1))) == sorted(order[-3:])

    def test_nested_across_rho(self):
        model, b = linear_model(1), batch(5, 2)
        masks = [build_backselect_subsets(model, b, r).masks for r in (0.1, 0.25, 0.5, 0.75)]
        for small, large in zip(masks, masks[1:]):
            assert np.all(large[small])

    def test_no_label_leakage(self):
        model, b = linear_model(2), batch(6, 3)
        relabeled = normalized(b.images, (b.labels + 1) % 3)
        a = build_backselect_subsets(model, b, 0.25)
        c = build_backselect_subsets(model, relabeled, 0.25)
        assert np.array_equal(a.masks, c.masks)
        assert np.array_equal(c.labels, relabeled.labels)

    def test_spec_records_source(self):
        model = linear_model(3)
        s = build_backselect_subsets(model, batch(), 0.5, SisConfig(k=2))
        assert s.spec.kind == "backselect" and s.spec.model_id == model.model_id and s.spec.sis_k == 2

    def test_same_counts_as_random(self):
        b = batch(7)
        a = build_backselect_subsets(linear_model(0), b, 0.3)
        r = build_random_subsets(b, 0.3, seed=4)
        assert np.array_equal(a.masks.sum(axis=(1, 2)), r.masks.sum(axis=(1, 2)))


class TestRandomSubsets:
    def test_deterministic(self):
        b = batch(10)
        assert np.array_equal(build_random_subsets(b, 0.3, 7).masks, build_random_subsets(b, 0.3, 7).masks)
        assert not np.array_equal(build_random_subsets(b, 0.3, 7).masks, build_random_subsets(b, 0.3, 8).masks)

    def test_identity(self):
        assert build_random_subsets(batch(), 1.0, 0).masks.all()

    def test_binomial_concentration(self):
        shape = (8, 8, 1)
        n, rho = 10_000, 0.25
        b = normalized(np.zeros((n,) + shape))
        s = build_random_subsets(b, rho, seed=11)
        q = retained_count(rho, 64) / 64
        freq = s.masks.mean(axis=0)
        sd = np.sqrt(q * (1 - q) / n)
        assert np.all(np.abs(freq - q) <= 3 * sd)


class TestMaterialize:
    def test_blend_oracle(self):
        rng = np.random.default_rng(0)
        stats = NormalizationStats([1.0], [2.0], rng.uniform(0, 3, SHAPE))
        b = ImageBatch(rng.standard_normal((4,) + SHAPE), [0, 1, 2, 0], "normalized", stats, "image")
        s = build_random_subsets(b, 0.5, 3)
        strat = MaskingStrategy("channel-mean", stats)
        out = materialize(s, b, strat)
        r = strat.replacement(SHAPE, "normalized", "image")
        i = 2
        kept = np.flatnonzero(s.masks[i].reshape(-1))
        assert np.array_equal(out.images[i], masked(b.images[i], kept, r))
        assert np.array_equal(out.labels, b.labels)

    def test_all_zero_mask_rejected(self):
        with pytest.raises(ValueError):
            SubsetDataset(np.zeros((2, 3, 4), bool), SubsetSpec(0.5, "random", seed=0))

    def test_wrong_count_rejected(self):
        m = np.zeros((1, 3, 4), bool)
        m[0, 0, :3] = True
        with pytest.raises(ValueError, match="keeps 3 pixels, expected 6"):
            SubsetDataset(m, SubsetSpec(0.5, "random", seed=0))

    def test_misaligned(self):
        s = build_random_subsets(batch(5), 0.5, 0)
        with pytest.raises(ValueError):
            materialize(s, batch(4))
        with pytest.raises(ValueError):
            materialize(s, batch(5, shape=(4, 3, 1)))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        b = batch(9)
        s = build_random_subsets(b, 0.25, 5)
        side = save_subsets(s, tmp_path / "rand")
        assert (tmp_path / "rand.sism").exists()
        back = load_subsets(side, labels=b.labels)
        assert np.array_equal(back.masks, s.masks) and back.spec == s.spec
        assert [m.count for m in read_masks(tmp_path / "rand.sism")] == [3] * 9

    def test_count_mismatch(self, tmp_path):
        import json
        side = save_subsets(build_random_subsets(batch(3), 0.5, 0), tmp_path / "x")
        d = json.loads(side.read_text())
        d["count"] = 4
        side.write_text(json.dumps(d))
        with pytest.raises(ValueError, match="expected 4 masks"):
            load_subsets(side)


class TestRetrain:
    def test_identity_masks_bit_identical(self):
        data = synth_dataset("separable", 64, (4, 4, 1), seed=1)
        cfg = TrainConfig(epochs=3, batch_size=16, lr=0.05, decay_epochs=(), seed=3)
        s = build_random_subsets(data, 1.0, 0)
        a = retrain_on_subsets(s, data, cfg, hidden=(8,))
        b = train(data, cfg, hidden=(8,))
        for (wa, ba), (wb, bb) in zip(a.params, b.params):
            assert np.array_equal(wa, wb) and np.array_equal(ba, bb)

    def test_augment_flag_changes_training(self):
        data = synth_dataset("separable", 64, (4, 4, 1), seed=1)
        s = build_random_subsets(data, 0.5, 0)
        plain = retrain_on_subsets(s, data, TrainConfig(epochs=2, batch_size=16, decay_epochs=(), seed=0), hidden=(4,))
        aug = retrain_on_subsets(s, data, TrainConfig(epochs=2, batch_size=16, decay_epochs=(), seed=0, augment=True),
                                 hidden=(4,))
        assert not np.array_equal(plain.params[0][0], aug.params[0][0])


class TestBenchmarkSet:
    def test_nested_confident_correct(self):
        shape = (4, 4, 1)
        rng = np.random.default_rng(0)
        d = 16
        W = np.zeros((d, 2))
        W[:8, 0] = 3.0
        W[8:, 1] = 3.0
        models = [SmallNet(shape, 2, params=[(W + 0.01 * rng.standard_normal(W.shape), np.zeros(2))]) for _ in range(3)]
        x = rng.standard_normal((60,) + shape)
        y = (x.reshape(60, -1)[:, 8:].sum(1) > x.reshape(60, -1)[:, :8].sum(1)).astype(int)
        b = normalized(x, y)
        bs = benchmark_image_set(models, b, per_class=4, floor=0.9, seed=1)
        assert len(bs.indices) <= 8
        for f in bs.fractions:
            assert np.all(bs.masks[f].reshape(len(bs.indices), -1).sum(1) == retained_count(f, 16))
        for small, large in zip(bs.fractions, bs.fractions[1:]):
            assert np.all(bs.masks[large][bs.masks[small]])
        for t, i in enumerate(bs.indices):
            p = models[bs.model_index[t]].predict_proba(b.images[i])
            assert p.max() >= 0.9 and p.argmax() == b.labels[i]
        assert all(sorted(o) == list(range(len(bs.indices))) for o in bs.presentation)
