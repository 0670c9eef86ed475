import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overinterp.data import NormalizationStats
from overinterp.masking import (
    Mask,
    MaskFormatError,
    MaskingStrategy,
    apply_mask,
    mask_difference,
    mask_disjoint,
    mask_union,
    masks_from_bytes,
    masks_to_bytes,
    parse_mask,
    serialize_mask,
)

STATS = NormalizationStats([100.0, 120.0, 90.0], [50.0, 40.0, 60.0],
                           np.random.default_rng(0).uniform(0, 255, (4, 4, 3)))


def rand_mask(rng, shape=(4, 4), p=0.5):
    return Mask(rng.random(shape) < p)


class TestApplyMask:
    def test_empty_mask_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 4, 3))
        assert np.array_equal(apply_mask(x, Mask.empty((4, 4)), MaskingStrategy()), x)

    def test_full_mask_zero(self):
        x = np.random.default_rng(0).standard_normal((4, 4, 3))
        assert np.array_equal(apply_mask(x, Mask.full((4, 4)), MaskingStrategy("zero")), np.zeros((4, 4, 3)))

    def test_half_mask_mean_image_blend(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 4, 3))
        bits = np.zeros((4, 4), bool)
        bits[:2] = True
        strat = MaskingStrategy("mean-image", STATS)
        r = (STATS.mean_image - STATS.mean) / STATS.std
        out = apply_mask(x, Mask(bits), strat)
        for i in range(4):
            for j in range(4):
                for c in range(3):
                    m = float(bits[i, j])
                    assert out[i, j, c] == x[i, j, c] * (1 - m) + r[i, j, c] * m

    def test_channel_mean_is_zero_after_channel_centering(self):
        r = MaskingStrategy("channel-mean", STATS).replacement((4, 4, 3))
        np.testing.assert_allclose(r, 0.0, atol=1e-15)
        raw = MaskingStrategy("channel-mean", STATS).replacement((4, 4, 3), value_space="raw")
        assert np.array_equal(raw[1, 2], STATS.mean)

    def test_whole_pixels(self):
        x = np.ones((3, 3, 4))
        out = apply_mask(x, Mask.from_indices((3, 3), [4]), 0.0)
        assert np.all(out[1, 1] == 0) and out.sum() == 32

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_mask(np.zeros((4, 4, 3)), Mask.empty((3, 4)), 0.0)

    def test_strategy_requires_stats(self):
        with pytest.raises(ValueError):
            MaskingStrategy("mean-image")
        with pytest.raises(ValueError):
            MaskingStrategy("median")

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 4, 3))
        m = rand_mask(rng)
        strat = MaskingStrategy("mean-image", STATS)
        once = apply_mask(x, m, strat)
        assert np.array_equal(apply_mask(once, m, strat), once)


class TestSetAlgebra:
    def test_union_with_empty(self):
        a = rand_mask(np.random.default_rng(0))
        assert mask_union(a, Mask.empty(a.shape)) == a

    def test_disjoint_self(self):
        a = Mask.from_indices((3, 3), [2])
        assert not mask_disjoint(a, a)
        assert mask_disjoint(Mask.empty((3, 3)), Mask.empty((3, 3)))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_entrywise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rand_mask(rng, (5, 6)), rand_mask(rng, (5, 6))
        u, d = mask_union(a, b), mask_difference(a, b)
        for i in range(5):
            for j in range(6):
                assert u.bits[i, j] == (a.bits[i, j] or b.bits[i, j])
                assert d.bits[i, j] == (a.bits[i, j] and not b.bits[i, j])
        assert mask_disjoint(a, b) == (not any(a.bits[i, j] and b.bits[i, j] for i in range(5) for j in range(6)))
        if mask_disjoint(a, b):
            assert u.count == a.count + b.count
        assert mask_disjoint(d, b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_union(Mask.empty((2, 2)), Mask.empty((2, 3)))

    def test_count_cached_and_immutable(self):
        m = Mask.from_indices((4, 4), [0, 3, 15])
        assert m.count == 3
        with pytest.raises(ValueError):
            m.bits[0, 0] = False


class TestContainer:
    def test_empty_mask_round_trip(self):
        e = Mask.empty((32, 32))
        assert masks_from_bytes(masks_to_bytes([e])) == [e]

    def test_ten_random_round_trip(self):
        rng = np.random.default_rng(0)
        ms = [rand_mask(rng, (7, 9)) for _ in range(10)]
        data = masks_to_bytes(ms)
        assert masks_from_bytes(data) == ms
        assert masks_to_bytes(masks_from_bytes(data)) == data

    @pytest.mark.parametrize("n", [0, 1, 5])
    def test_length(self, n):
        rng = np.random.default_rng(n)
        data = masks_to_bytes([rand_mask(rng, (32, 32)) for _ in range(n)], shape=(32, 32))
        # 4-byte magic + 1-byte version + three uint32 fields, then 1024 bits per mask
        assert len(data) == 17 + n * 128

    def test_header_layout(self):
        data = masks_to_bytes([Mask.from_indices((2, 5), [0, 9])])
        assert data[:4] == b"SISM" and data[4] == 1
        assert int.from_bytes(data[5:9], "little") == 2
        assert int.from_bytes(data[9:13], "little") == 5
        assert int.from_bytes(data[13:17], "little") == 1
        # row-major bits, most significant bit first, padded to 2 bytes
        assert data[17:] == bytes([0b10000000, 0b01000000])

    def test_bad_magic(self):
        data = bytearray(masks_to_bytes([Mask.empty((2, 2))]))
        data[0:4] = b"XXXX"
        with pytest.raises(MaskFormatError, match="offset 0"):
            masks_from_bytes(bytes(data))

    def test_truncated(self):
        data = masks_to_bytes([Mask.empty((8, 8))] * 3)
        with pytest.raises(MaskFormatError, match="mask 2 at byte offset 33"):
            masks_from_bytes(data[:-1])
        with pytest.raises(MaskFormatError, match="truncated header"):
            masks_from_bytes(data[:10])

    def test_inconsistent_shapes(self):
        with pytest.raises(ValueError):
            serialize_mask([Mask.empty((2, 2)), Mask.empty((3, 3))], io.BytesIO())
