import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fusioncast import aff
from fusioncast.errors import ArgumentError


def brute_force_band_fuse(pred_num, pred_event, weights, partition):
    """Independent oracle: filter each branch into three time-domain band
    signals via masked transforms, weight, and sum."""
    out = np.zeros_like(np.asarray(pred_num, dtype=np.float64))
    H = out.shape[0]
    for br, pred in (("num", pred_num), ("event", pred_event)):
        spec = np.fft.rfft(np.asarray(pred, dtype=np.float64), axis=0)
        for b in aff.BANDS:
            band_signal = np.fft.irfft(spec * partition.masks[b][:, None], n=H, axis=0)
            out += weights.values[(br, b)] * band_signal
    return out


class TestPartition:
    def test_h12(self):
        p = aff.partition_bands(12)
        assert p.n_bins == 7
        assert list(p.bins("low")) == [0]
        assert list(p.bins("mid")) == [1, 2, 3, 4]
        assert list(p.bins("high")) == [5, 6]

    def test_h96(self):
        # ceil boundaries: low = ceil(0.1*49) = 5 bins, high = 49 - ceil(0.7*49) = 14
        p = aff.partition_bands(96)
        assert p.n_bins == 49
        assert int(p.masks["low"].sum()) == 5
        assert int(p.masks["high"].sum()) == 14

    def test_h4_repair(self):
        p = aff.partition_bands(4)
        assert list(p.bins("low")) == [0]
        assert list(p.bins("mid")) == [1]
        assert list(p.bins("high")) == [2]

    def test_h2_mid_empty(self):
        p = aff.partition_bands(2)
        assert list(p.bins("low")) == [0]
        assert list(p.bins("mid")) == []
        assert list(p.bins("high")) == [1]

    def test_invalid(self):
        with pytest.raises(ArgumentError):
            aff.partition_bands(1)
        with pytest.raises(ArgumentError):
            aff.partition_bands(12, 0.7, 0.1)

    @settings(max_examples=100, deadline=None)
    @given(horizon=st.integers(min_value=2, max_value=512))
    def test_partition_complete_disjoint(self, horizon):
        p = aff.partition_bands(horizon)
        total = np.zeros(p.n_bins, dtype=int)
        for b in aff.BANDS:
            total += p.masks[b].astype(int)
        assert (total == 1).all()
        assert p.masks["low"][0]
        if p.n_bins >= 3:
            for b in aff.BANDS:
                assert p.masks[b].any()

    def test_extreme_fractions_still_valid(self):
        for lo, hi in ((0.01, 0.02), (0.9, 0.99), (0.49, 0.51)):
            p = aff.partition_bands(10, lo, hi)
            total = sum(p.masks[b].astype(int) for b in aff.BANDS)
            assert (total == 1).all()
            for b in aff.BANDS:
                assert p.masks[b].any()


class TestFuse:
    def test_single_branch_identity(self):
        rng = np.random.default_rng(1)
        pred = rng.normal(size=(12, 2))
        other = rng.normal(size=(12, 2))
        w = aff.FusionWeights.from_array([1, 1, 1, 0, 0, 0])
        out = aff.fuse(pred, other, w, aff.partition_bands(12))
        assert np.abs(out - pred).max() < 1e-5

    def test_equal_weight_constants(self):
        w = aff.FusionWeights.balanced(0.5)
        out = aff.fuse(np.full(4, 2.0), np.full(4, 4.0), w, aff.partition_bands(4))
        assert np.abs(out - 3.0).max() < 1e-6

    def test_matches_band_filter_oracle(self):
        rng = np.random.default_rng(7)
        part = aff.partition_bands(12)
        pred_num = rng.normal(size=(12, 2))
        pred_event = rng.normal(size=(12, 2))
        w = aff.FusionWeights.from_array(rng.normal(size=6))
        fast = aff.fuse(pred_num, pred_event, w, part)
        slow = brute_force_band_fuse(pred_num, pred_event, w, part)
        assert np.abs(fast - slow).max() < 1e-6

    def test_nan_rejected_naming_branch(self):
        part = aff.partition_bands(4)
        bad = np.array([1.0, np.nan, 2.0, 3.0])
        good = np.ones(4)
        with pytest.raises(ArgumentError, match="num"):
            aff.fuse(bad, good, aff.FusionWeights.balanced(), part)
        with pytest.raises(ArgumentError, match="event"):
            aff.fuse(good, bad, aff.FusionWeights.balanced(), part)

    @settings(max_examples=30, deadline=None)
    @given(
        horizon=st.sampled_from([4, 6, 12, 48]),
        scale=st.floats(min_value=-3, max_value=3, allow_nan=False),
        seed=st.integers(min_value=0, max_value=1000),
    )
    def test_linearity(self, horizon, scale, seed):
        rng = np.random.default_rng(seed)
        part = aff.partition_bands(horizon)
        w = aff.FusionWeights.from_array(rng.normal(size=6))
        p1, p2 = rng.normal(size=(horizon, 1)), rng.normal(size=(horizon, 1))
        q1, q2 = rng.normal(size=(horizon, 1)), rng.normal(size=(horizon, 1))
        scaled = aff.fuse(scale * p1, scale * p2, w, part)
        assert np.abs(scaled - scale * aff.fuse(p1, p2, w, part)).max() < 1e-8
        total = aff.fuse(p1 + q1, p2 + q2, w, part)
        parts = aff.fuse(p1, p2, w, part) + aff.fuse(q1, q2, w, part)
        assert np.abs(total - parts).max() < 1e-8


class TestBandpass:
    def test_full_band_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=50)
        assert np.abs(aff.bandpass_filter(x, 0.0, 1.0) - x).max() < 1e-6

    def test_dc_excluded_by_highpass(self):
        x = np.full(24, 3.7)
        assert np.abs(aff.bandpass_filter(x, 0.7, 1.0)).max() < 1e-9

    def test_three_band_reconstruction(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=37)
        total = (
            aff.bandpass_filter(x, 0.0, 0.1)
            + aff.bandpass_filter(x, 0.1, 0.7)
            + aff.bandpass_filter(x, 0.7, 1.0)
        )
        assert np.abs(total - x).max() < 1e-6

    def test_roundtrip_of_transform(self):
        rng = np.random.default_rng(9)
        for n in (5, 12, 31, 96):
            x = rng.normal(size=n)
            back = np.fft.irfft(np.fft.rfft(x), n=n)
            assert np.abs(back - x).max() < 1e-6


class TestWeightGradient:
    def test_zero_at_minimum(self):
        rng = np.random.default_rng(2)
        part = aff.partition_bands(12)
        pred_num = rng.normal(size=(12, 1))
        pred_event = rng.normal(size=(12, 1))
        w = aff.FusionWeights.balanced(0.5)
        target = aff.fuse(pred_num, pred_event, w, part)
        grads = aff.fuse_weight_gradient(pred_num, pred_event, w, part, target)
        assert max(abs(v) for v in grads.values()) < 1e-9

    def test_zero_event_branch(self):
        rng = np.random.default_rng(3)
        part = aff.partition_bands(12)
        pred_num = rng.normal(size=(12, 1))
        zeros = np.zeros((12, 1))
        w = aff.FusionWeights.balanced(0.7)
        grads = aff.fuse_weight_gradient(pred_num, zeros, w, part, rng.normal(size=(12, 1)))
        for b in aff.BANDS:
            assert grads[("event", b)] == 0.0

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        eps = 1e-5
        for _ in range(10):
            H = int(rng.choice([6, 12, 48]))
            N = int(rng.choice([1, 3]))
            part = aff.partition_bands(H)
            pn, pe = rng.normal(size=(H, N)), rng.normal(size=(H, N))
            y = rng.normal(size=(H, N))
            w = aff.FusionWeights.from_array(rng.normal(size=6))
            grads = aff.fuse_weight_gradient(pn, pe, w, part, y)
            arr = w.as_array()
            for k, key in enumerate([(br, b) for br in aff.BRANCHES for b in aff.BANDS]):
                up, dn = arr.copy(), arr.copy()
                up[k] += eps
                dn[k] -= eps
                mse_up = np.mean(
                    (aff.fuse(pn, pe, aff.FusionWeights.from_array(up), part) - y) ** 2
                )
                mse_dn = np.mean(
                    (aff.fuse(pn, pe, aff.FusionWeights.from_array(dn), part) - y) ** 2
                )
                fd = (mse_up - mse_dn) / (2 * eps)
                denom = max(abs(fd), abs(grads[key]), 1e-8)
                assert abs(fd - grads[key]) / denom < 1e-4


class TestTorchFusion:
    def test_matches_numpy_fuse(self):
        rng = np.random.default_rng(11)
        part = aff.partition_bands(12)
        module = aff.SpectralFusion(part)
        w = aff.FusionWeights.from_array(rng.normal(size=6))
        module.load_fusion_weights(w)
        pn, pe = rng.normal(size=(12, 2)), rng.normal(size=(12, 2))
        with torch.no_grad():
            out = module(torch.tensor(pn, dtype=torch.float64),
                         torch.tensor(pe, dtype=torch.float64)).numpy()
        assert np.abs(out - aff.fuse(pn, pe, w, part)).max() < 1e-6

    def test_weights_roundtrip(self):
        part = aff.partition_bands(8)
        module = aff.SpectralFusion(part, init=0.25)
        w = module.to_fusion_weights()
        assert np.allclose(w.as_array(), 0.25)

    def test_alternative_strategies_shapes(self):
        torch.manual_seed(0)
        for module in (aff.MlpFusion(12), aff.CrossAttentionFusion(12)):
            pn = torch.randn(4, 12, 3)
            pe = torch.randn(4, 12, 3)
            assert module(pn, pe).shape == (4, 12, 3)
            assert module(pn[0], pe[0]).shape == (12, 3)


def test_boundary_sweep_shape():
    rng = np.random.default_rng(6)
    rows = aff.boundary_sweep(
        rng.normal(size=(12, 1)), rng.normal(size=(12, 1)), rng.normal(size=(12, 1)),
        aff.FusionWeights.balanced(),
    )
    assert len(rows) == 16  # full 4x4 grid, every low_frac < high_frac
    for lf, hf, mse in rows:
        assert 0 < lf < hf < 1 and np.isfinite(mse)
