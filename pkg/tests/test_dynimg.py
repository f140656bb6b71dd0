"""Rank pooling: prefix means, solver vs oracle, window handling, display."""

import numpy as np
import pytest

from padkit.dynimg import (
    DynamicImage,
    FrameSequence,
    RankPoolConfig,
    dynamic_image_at,
    dynamic_images_at,
    prefix_mean,
    rank_pool_fit,
    rank_pool_oracle,
    to_display,
)


class TestPrefixMean:
    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            prefix_mean(FrameSequence(np.array([4.0])))

    def test_constant_pair(self):
        v = prefix_mean(FrameSequence(np.array([4.0, 4.0])))
        np.testing.assert_array_equal(v.ravel(), [4.0, 4.0])

    def test_arithmetic(self):
        v = prefix_mean(FrameSequence(np.array([2.0, 4.0, 6.0])))
        np.testing.assert_allclose(v.ravel(), [2.0, 3.0, 4.0])

    def test_idempotent_on_constant_tensor(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(1, 4, 4, 2))
        frames = np.concatenate([a, a, a])
        v = prefix_mean(FrameSequence(frames))
        for i in range(3):
            np.testing.assert_array_equal(v[i], a[0])


class TestRankPoolFit:
    def test_constant_sequence_collapses_to_exact_zero(self):
        a = np.full((1, 3, 3, 1), 2.5)
        frames = np.concatenate([a] * 5)
        out = rank_pool_fit(prefix_mean(FrameSequence(frames)), RankPoolConfig(window=5))
        assert np.all(out.data == 0.0)
        assert out.converged

    def test_hand_derivable_scalar_instance(self):
        # frames 0,1,2 -> prefix means 0, 0.5, 1; all-pairs-active
        # stationarity gives d = delta * (0.5 + 1 + 0.5) = 2/3
        v = prefix_mean(FrameSequence(np.array([0.0, 1.0, 2.0])))
        out = rank_pool_fit(v, RankPoolConfig(window=3))
        assert out.data.ravel()[0] == pytest.approx(2.0 / 3.0, abs=1e-9)

    def test_delta_formula(self):
        cfg = RankPoolConfig(window=7)
        assert cfg.delta == 2.0 / (7 * 6)

    def test_negation_antisymmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            k = int(rng.choice([3, 5, 7]))
            frames = rng.normal(size=(k, 1, 1, 2))
            cfg = RankPoolConfig(window=k)
            d_pos = rank_pool_fit(prefix_mean(FrameSequence(frames)), cfg)
            d_neg = rank_pool_fit(prefix_mean(FrameSequence(-frames)), cfg)
            np.testing.assert_allclose(d_neg.data, -d_pos.data, atol=1e-6)

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            frames = rng.normal(size=(5, 2, 2, 1))
            cfg = RankPoolConfig(window=5)
            base = rank_pool_fit(prefix_mean(FrameSequence(frames)), cfg)
            shifted = rank_pool_fit(prefix_mean(FrameSequence(frames + 11.25)), cfg)
            np.testing.assert_allclose(shifted.data, base.data, atol=1e-8)

    def test_objective_trace_monotone(self):
        rng = np.random.default_rng(7)
        frames = rng.normal(size=(7, 4, 4, 1))
        out = rank_pool_fit(prefix_mean(FrameSequence(frames)), RankPoolConfig(window=7))
        trace = np.array(out.objective_trace)
        assert np.all(np.diff(trace) <= 0.0)
        assert out.objective == trace[-1]
        assert out.objective >= 0.0

    def test_non_finite_rejected(self):
        v = np.array([[0.0], [np.inf]])
        with pytest.raises(ValueError):
            rank_pool_fit(v, RankPoolConfig(window=2))


class TestOracle:
    def test_scalar_agreement(self):
        v = prefix_mean(FrameSequence(np.array([0.0, 1.0, 2.0])))
        out = rank_pool_oracle(v)
        assert out.data.ravel()[0] == pytest.approx(2.0 / 3.0, abs=1e-4)

    def test_constant_is_zero(self):
        v = prefix_mean(FrameSequence(np.array([1.0, 1.0, 1.0])))
        assert abs(rank_pool_oracle(v).data.ravel()[0]) <= 1e-4

    def test_negated_instance(self):
        v = prefix_mean(FrameSequence(np.array([0.0, -1.0, -2.0])))
        assert rank_pool_oracle(v).data.ravel()[0] == pytest.approx(-2.0 / 3.0, abs=1e-4)

    def test_dimensionality_cap(self):
        v = prefix_mean(FrameSequence(np.zeros((3, 1, 1, 3))))
        with pytest.raises(ValueError, match="dimensionality"):
            rank_pool_oracle(v)

    def test_solver_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(123)
        for _ in range(25):
            k = int(rng.choice([3, 5, 7]))
            dim = int(rng.choice([1, 2]))
            frames = rng.normal(scale=rng.uniform(0.3, 2.0), size=(k, 1, 1, dim))
            v = prefix_mean(FrameSequence(frames))
            fit = rank_pool_fit(v, RankPoolConfig(window=k))
            ora = rank_pool_oracle(v)
            np.testing.assert_allclose(fit.data, ora.data, atol=1e-3)


class TestDynamicImageAt:
    def test_index_zero_is_constant_window(self):
        rng = np.random.default_rng(1)
        video = FrameSequence(rng.normal(size=(10, 3, 3, 1)))
        out = dynamic_image_at(video, 0, RankPoolConfig(window=7))
        assert np.all(out.data == 0.0)

    def test_out_of_range_index(self):
        video = FrameSequence(np.zeros((4, 2, 2, 1)))
        with pytest.raises(IndexError):
            dynamic_image_at(video, 4, RankPoolConfig(window=3))

    def test_linear_ramp_aligns_with_pattern(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 3, 1))
        frames = np.stack([t * a for t in range(7)])
        out = dynamic_image_at(FrameSequence(frames), 6, RankPoolConfig(window=7))
        d = out.data.ravel()
        cos = d @ a.ravel() / (np.linalg.norm(d) * np.linalg.norm(a))
        assert cos >= 0.999

    def test_constant_offset_leaves_result_unchanged(self):
        rng = np.random.default_rng(3)
        frames = rng.normal(size=(9, 2, 2, 1))
        cfg = RankPoolConfig(window=5)
        base = dynamic_image_at(FrameSequence(frames), 8, cfg)
        moved = dynamic_image_at(FrameSequence(frames + 4.0), 8, cfg)
        np.testing.assert_allclose(moved.data, base.data, atol=1e-8)

    def test_parallel_map_matches_serial(self):
        rng = np.random.default_rng(4)
        video = FrameSequence(rng.normal(size=(12, 3, 3, 1)))
        cfg = RankPoolConfig(window=5)
        serial = dynamic_images_at(video, range(12), cfg, workers=1)
        threaded = dynamic_images_at(video, range(12), cfg, workers=4)
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.data, b.data)


class TestToDisplay:
    def test_endpoints(self):
        out = to_display(np.array([0.0, 1.0]))
        np.testing.assert_array_equal(out, [0, 255])

    def test_constant_maps_to_midgray(self):
        out = to_display(np.zeros((4, 4)))
        assert out.dtype == np.uint8
        assert np.all(out == 128)

    def test_rounds_half_up(self):
        out = to_display(np.array([-1.0, 0.0, 1.0]))
        np.testing.assert_array_equal(out, [0, 128, 255])

    def test_accepts_dynamic_image(self):
        d = DynamicImage(np.array([1.0, 3.0]), (0, 1), 0.0, True, 0)
        np.testing.assert_array_equal(to_display(d), [0, 255])
