import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overinterp.data import synth_dataset
from overinterp.masking import Mask, MaskingStrategy
from overinterp.smallnet import (
    CallableClassifier,
    ConstantClassifier,
    EnsembleClassifier,
    NotDifferentiableError,
    SmallNet,
    TrainConfig,
    TrainingDivergedError,
    confidence_grad_wrt_mask,
    ensemble_predict,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    train,
)

from oracles import central_difference, linear_probs, mlp_forward_ref, softmax_ref


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def mask_fd(model, image, mask_bits, target, r, h=1e-4):
    """Central differences of the target probability over a continuous mask."""

    def f(m):
        xt = image * (1 - m[..., None]) + r * m[..., None]
        return model.predict_proba(xt)[target]

    return central_difference(f, mask_bits.astype(np.float64), h)


class TestPredictProba:
    def test_zero_parameters_give_uniform(self):
        m = SmallNet((3, 3, 2), 7, init="zeros")
        x = np.random.default_rng(0).standard_normal((5, 3, 3, 2))
        np.testing.assert_array_equal(predict_proba(m, x), np.full((5, 7), 1 / 7))

    def test_equal_logits(self):
        W = np.ones((1, 2))
        m = SmallNet((1, 1, 1), 2, params=[(W, np.zeros(2))])
        np.testing.assert_array_equal(m.predict_proba(np.full((1, 1, 1), 3.7)), [0.5, 0.5])

    @pytest.mark.parametrize("nonlinearity", ["relu", "tanh"])
    def test_mlp_matches_hand_forward(self, nonlinearity):
        m = SmallNet((4, 4, 3), 5, hidden=(7, 6), nonlinearity=nonlinearity, seed=11)
        x = np.random.default_rng(3).standard_normal((4, 4, 3))
        expected = mlp_forward_ref(m.params, nonlinearity, x)
        np.testing.assert_allclose(m.predict_proba(x), expected, rtol=1e-12, atol=1e-15)

    def test_shape_mismatch(self):
        m = SmallNet((4, 4, 3), 5)
        with pytest.raises(ValueError, match="does not match"):
            m.predict_proba(np.zeros((2, 4, 4, 1)))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), scale=st.floats(0.1, 30))
    def test_normalized(self, seed, scale):
        rng = np.random.default_rng(seed)
        m = SmallNet((3, 3, 3), 4, hidden=(5,), seed=seed)
        x = scale * rng.standard_normal((6, 3, 3, 3))
        bits = rng.random((6, 3, 3)) < 0.5
        x = np.where(bits[..., None], 0.0, x)
        p = m.predict_proba(x)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_pure_function(self):
        m = SmallNet((4, 4, 3), 5, hidden=(8,), seed=2)
        x = np.random.default_rng(1).standard_normal((3, 4, 4, 3))
        assert np.array_equal(m.predict_proba(x), m.predict_proba(x.copy()))


class TestCandidateLogits:
    def test_matches_explicit_images(self):
        m = SmallNet((3, 4, 2), 3, hidden=(6,), seed=5)
        x = np.random.default_rng(0).standard_normal((3, 4, 2))
        pixels = np.array([0, 5, 11])
        deltas = np.random.default_rng(1).standard_normal((3, 2))
        expected = []
        for p, d in zip(pixels, deltas):
            xi = x.reshape(12, 2).copy()
            xi[p] += d
            expected.append(m.logits(xi.reshape(3, 4, 2)))
        np.testing.assert_allclose(m.candidate_logits(x, pixels, deltas), expected, rtol=1e-12, atol=1e-12)
        from overinterp.smallnet import Classifier

        np.testing.assert_allclose(Classifier.candidate_logits(m, x, pixels, deltas), expected, rtol=1e-12, atol=1e-12)


class TestMaskGradient:
    def test_constant_model_zero(self):
        m = ConstantClassifier((4, 4, 3), [0.2, 0.8])
        x = np.random.default_rng(0).standard_normal((4, 4, 3))
        g = confidence_grad_wrt_mask(m, x, Mask.empty((4, 4)), 1, MaskingStrategy())
        np.testing.assert_array_equal(g, np.zeros((4, 4)))

    def test_single_pixel_linear_closed_form(self):
        w = 1.3
        W = np.array([[w, -w]])
        m = SmallNet((1, 1, 1), 2, params=[(W, np.array([0.1, -0.2]))])
        x = np.full((1, 1, 1), 0.7)
        g = confidence_grad_wrt_mask(m, x, np.zeros((1, 1), bool), 0, 0.0)
        # p0 = sigmoid(z0 - z1), z0 - z1 = 2 w x~ + 0.3
        s = 1 / (1 + np.exp(-(2 * w * 0.7 + 0.3)))
        closed = -0.7 * 2 * w * s * (1 - s)
        fd = mask_fd(m, x, np.zeros((1, 1)), 0, np.zeros((1, 1, 1)))
        assert rel_err(g, closed).max() < 1e-12
        assert rel_err(g, fd).max() < 1e-6

    @pytest.mark.parametrize("nonlinearity", ["tanh", "relu"])
    def test_mlp_matches_finite_differences(self, nonlinearity):
        rng = np.random.default_rng(7)
        m = SmallNet((8, 8, 3), 4, hidden=(16,), nonlinearity=nonlinearity, seed=3)
        x = rng.standard_normal((8, 8, 3))
        bits = rng.random((8, 8)) < 0.4
        r = rng.standard_normal((8, 8, 3)) * 0.1
        g = confidence_grad_wrt_mask(m, x, bits, 2, r)
        fd = mask_fd(m, x, bits, 2, r)
        assert rel_err(g, fd).max() <= 1e-4

    def test_analytic_identity(self):
        m = SmallNet((3, 3, 2), 3, hidden=(4,), nonlinearity="tanh", seed=1)
        x = np.random.default_rng(2).standard_normal((3, 3, 2))
        bits = np.zeros((3, 3), bool)
        bits[0, 1] = True
        r = np.full((3, 3, 2), 0.5)
        xt = np.where(bits[..., None], r, x)
        expected = ((r - x) * m.input_gradient(xt, 1)).sum(-1)
        np.testing.assert_allclose(confidence_grad_wrt_mask(m, x, bits, 1, r), expected, rtol=1e-13)

    def test_non_differentiable(self):
        m = CallableClassifier(lambda x: np.full((len(x), 2), 0.5), (2, 2, 1), 2)
        with pytest.raises(NotDifferentiableError, match="exact"):
            confidence_grad_wrt_mask(m, np.zeros((2, 2, 1)), np.zeros((2, 2), bool), 0, 0.0)

    def test_bad_target(self):
        m = SmallNet((2, 2, 1), 2)
        with pytest.raises(ValueError):
            confidence_grad_wrt_mask(m, np.zeros((2, 2, 1)), np.zeros((2, 2), bool), 2, 0.0)


class TestEnsemble:
    def test_singleton_identical(self):
        m = SmallNet((3, 3, 1), 4, hidden=(5,), seed=0)
        x = np.random.default_rng(0).standard_normal((4, 3, 3, 1))
        assert np.array_equal(ensemble_predict(EnsembleClassifier([m]), x), m.predict_proba(x))

    def test_opposite_logits_uniform(self):
        W = np.random.default_rng(0).standard_normal((4, 3))
        b = np.random.default_rng(1).standard_normal(3)
        a = SmallNet((2, 2, 1), 3, params=[(W, b)])
        neg = SmallNet((2, 2, 1), 3, params=[(-W, -b)])
        x = np.random.default_rng(2).standard_normal((5, 2, 2, 1))
        np.testing.assert_allclose(EnsembleClassifier([a, neg]).predict_proba(x), 1 / 3, atol=1e-15)

    def test_three_members_mean_logits(self):
        members = [SmallNet((2, 3, 2), 4, seed=s) for s in range(3)]
        x = np.random.default_rng(5).standard_normal((2, 3, 2))
        zs = [x.reshape(-1) @ m.params[0][0] + m.params[0][1] for m in members]
        expected = softmax_ref((zs[0] + zs[1] + zs[2]) / 3)
        np.testing.assert_allclose(EnsembleClassifier(members).predict_proba(x), expected, rtol=1e-12)

    def test_mismatched_members_rejected(self):
        with pytest.raises(ValueError):
            EnsembleClassifier([SmallNet((2, 2, 1), 3), SmallNet((2, 2, 1), 4)])
        with pytest.raises(ValueError):
            EnsembleClassifier([])

    def test_gradient_finite_differences(self):
        members = [SmallNet((4, 4, 3), 3, hidden=(6,), nonlinearity="tanh", seed=s) for s in range(3)]
        ens = EnsembleClassifier(members)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 4, 3))
        bits = rng.random((4, 4)) < 0.5
        g = confidence_grad_wrt_mask(ens, x, bits, 0, np.zeros((4, 4, 3)))
        fd = mask_fd(ens, x, bits, 0, np.zeros((4, 4, 3)))
        assert rel_err(g, fd).max() <= 1e-4

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10**6), scale=st.floats(0.01, 100))
    def test_argmax_invariant_to_logit_scaling(self, seed, scale):
        rng = np.random.default_rng(seed)
        members = []
        scaled = []
        for _ in range(3):
            W = rng.standard_normal((4, 5))
            b = rng.standard_normal(5)
            members.append(SmallNet((2, 2, 1), 5, params=[(W, b)]))
            scaled.append(SmallNet((2, 2, 1), 5, params=[(W * scale, b * scale)]))
        x = rng.standard_normal((8, 2, 2, 1))
        a = EnsembleClassifier(members).predict_proba(x)
        b_ = EnsembleClassifier(scaled).predict_proba(x)
        # exact ties in the mean logits are measure-zero; skip near-ties
        top2 = np.sort(a, axis=1)[:, -2:]
        ok = top2[:, 1] - top2[:, 0] > 1e-9
        assert np.array_equal(a.argmax(1)[ok], b_.argmax(1)[ok])


class TestTrain:
    def test_separable_reaches_99(self):
        data = synth_dataset("separable", 500, (4, 4, 1), seed=3)
        # oracle: the known separating direction classifies every point
        proj = data.images.reshape(500, -1) @ data.direction.reshape(-1)
        assert np.mean((proj > 0) == (data.labels == 1)) == 1.0
        cfg = TrainConfig(epochs=50, batch_size=32, lr=0.05, decay_epochs=(30,), seed=1)
        m = train(data, cfg, hidden=())
        assert np.mean(m.predict(data) == data.labels) >= 0.99

    def test_reference_recipe_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.momentum, cfg.weight_decay) == (200, 128, 0.1, 0.9, 5e-4)
        assert cfg.decay_epochs == (60, 120, 160) and cfg.decay_factor == 5.0
        assert [cfg.lr_at(e) for e in (0, 59, 60, 119, 120, 160, 199)] == pytest.approx(
            [0.1, 0.1, 0.02, 0.02, 0.004, 0.0008, 0.0008]
        )

    @pytest.mark.parametrize(
        "kw", [dict(epochs=0), dict(batch_size=0), dict(lr=0.0), dict(decay_factor=1.0)]
    )
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_deterministic(self):
        data = synth_dataset("xor", 200, (3, 3, 2), seed=0)
        cfg = TrainConfig(epochs=3, batch_size=16, lr=0.05, seed=9, augment=True)
        a = train(data, cfg, hidden=(8,))
        b = train(data, cfg, hidden=(8,))
        for (Wa, ba), (Wb, bb) in zip(a.params, b.params):
            assert Wa.tobytes() == Wb.tobytes() and ba.tobytes() == bb.tobytes()
        c = train(data, TrainConfig(epochs=3, batch_size=16, lr=0.05, seed=10, augment=True), hidden=(8,))
        assert c.params[0][0].tobytes() != a.params[0][0].tobytes()

    def test_loss_decreases_on_fixed_batch(self):
        data = synth_dataset("separable", 256, (4, 4, 1), seed=4)
        fixed = data.images[:64], data.labels[:64]
        untrained = SmallNet((4, 4, 1), 2, hidden=(16,), seed=np.random.default_rng(np.random.SeedSequence(2).spawn(2)[0]))
        before, _ = untrained.loss_and_grads(*fixed)
        m = train(data, TrainConfig(epochs=1, batch_size=16, lr=0.05, seed=2), hidden=(16,))
        after, _ = m.loss_and_grads(*fixed)
        assert after < before

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_context(self):
        data = synth_dataset("separable", 64, (2, 2, 1), seed=0)
        data = data.with_images(data.images * 1e155)
        with pytest.raises(TrainingDivergedError) as err:
            train(data, TrainConfig(epochs=2, batch_size=16, lr=1e3), hidden=(4,))
        assert err.value.epoch == 0 and err.value.lr == 1e3
        assert "epoch 0" in str(err.value)

    def test_parameter_gradients_finite_differences(self):
        m = SmallNet((2, 2, 1), 3, hidden=(4,), nonlinearity="tanh", seed=0)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 2, 2, 1))
        y = rng.integers(0, 3, 5)
        _, grads = m.loss_and_grads(x, y, weight_decay=0.01)
        W, b = m.params[0]

        def loss_of(Wn):
            mm = SmallNet((2, 2, 1), 3, hidden=(4,), nonlinearity="tanh", params=[(Wn, b), m.params[1]])
            loss, _ = mm.loss_and_grads(x, y)
            return loss + 0.5 * 0.01 * (np.sum(Wn**2) + np.sum(m.params[1][0] ** 2))

        fd = central_difference(loss_of, W, 1e-5)
        np.testing.assert_allclose(grads[0][0], fd, rtol=1e-6, atol=1e-9)


def test_checkpoint_round_trip(tmp_path):
    from overinterp.data import NormalizationStats

    m = SmallNet((3, 3, 3), 4, hidden=(5, 2), nonlinearity="tanh", seed=4)
    stats = NormalizationStats([1.0, 2, 3], [4.0, 5, 6], np.arange(27.0).reshape(3, 3, 3))
    path = tmp_path / "m.sisnet"
    save_checkpoint(m, path, stats)
    assert path.read_bytes()[:8] == b"SISNET01"
    m2, stats2 = load_checkpoint(path)
    assert m2.fingerprint() == m.fingerprint()
    np.testing.assert_array_equal(stats2.mean_image, stats.mean_image)
    x = np.random.default_rng(0).standard_normal((3, 3, 3))
    assert np.array_equal(m.predict_proba(x), m2.predict_proba(x))


def test_linear_oracle_sanity():
    m = SmallNet((2, 2, 1), 3, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 2, 1))
    W, b = m.params[0]
    np.testing.assert_allclose(m.predict_proba(x), linear_probs(W, b, x), rtol=1e-13)
