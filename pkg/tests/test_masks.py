"""Tests for the passage-mask mechanism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankmask_lab import autodiff as ad
from rankmask_lab import masks as mk
from rankmask_lab.errors import ConfigError
from rankmask_lab.reader import HiddenStates


def random_hidden(slots=5, plen=3, d=2, seed=0, lo=-2.0, hi=2.0):
    rng = np.random.default_rng(seed)
    return HiddenStates(ad.tensor(rng.uniform(lo, hi, (slots, plen, d))))


class TestDefaultSpace:
    def test_exactly_six_pairs_in_order(self):
        space = mk.default_space(10)
        assert space.size == 6
        assert [c.positions for c in space] == [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]

    def test_index_one_masks_ranks_1_and_3(self):
        assert mk.default_space(4)[1].positions == (1, 3)

    def test_each_rank_in_three_candidates(self):
        space = mk.default_space(6)
        for rank in (1, 2, 3, 4):
            assert sum(rank in c.positions for c in space) == 3

    def test_too_few_passages(self):
        with pytest.raises(ConfigError, match="passages"):
            mk.default_space(3)


class TestExtendedSpace:
    def test_sixteen_candidates_at_ten_passages(self):
        space = mk.extended_space(10)
        assert space.size == 16
        assert [c.positions for c in space][:6] == [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]
        assert [c.positions for c in space][6:] == [(r,) for r in range(1, 11)]


class TestCandidateValidation:
    def test_duplicates_rejected(self):
        with pytest.raises(ConfigError, match="duplicates"):
            mk.MaskCandidate((1, 1))

    def test_positions_sorted(self):
        assert mk.MaskCandidate((3, 1)).positions == (1, 3)

    def test_below_one_rejected(self):
        with pytest.raises(ConfigError):
            mk.MaskCandidate((0, 2))


class TestApplyCandidate:
    def test_empty_candidate_is_identity(self):
        h = random_hidden()
        out = mk.apply_candidate(h, mk.MaskCandidate(()))
        np.testing.assert_array_equal(out.values.data, h.values.data)

    def test_masks_listed_rows_only(self):
        h = random_hidden(slots=5)
        out = mk.apply_candidate(h, mk.MaskCandidate((1, 3))).values.data
        assert np.array_equal(out[1], np.zeros_like(out[1]))
        assert np.array_equal(out[3], np.zeros_like(out[3]))
        np.testing.assert_array_equal(out[0], h.values.data[0])
        np.testing.assert_array_equal(out[2], h.values.data[2])
        np.testing.assert_array_equal(out[4], h.values.data[4])

    def test_rescale_survivors_by_two(self):
        h = random_hidden(slots=5)  # P = 4
        out = mk.apply_candidate(h, mk.MaskCandidate((1, 3)), rescale=True).values.data
        np.testing.assert_allclose(out[2], 2.0 * h.values.data[2])
        np.testing.assert_allclose(out[4], 2.0 * h.values.data[4])
        np.testing.assert_array_equal(out[0], h.values.data[0])

    def test_idempotent_without_rescale(self):
        h = random_hidden()
        once = mk.apply_candidate(h, mk.MaskCandidate((2,)))
        twice = mk.apply_candidate(once, mk.MaskCandidate((2,)))
        np.testing.assert_array_equal(once.values.data, twice.values.data)

    def test_out_of_range_position(self):
        with pytest.raises(IndexError, match="position"):
            mk.apply_candidate(random_hidden(slots=4), mk.MaskCandidate((4,)))


class TestRelaxedMix:
    def test_uniform_row_gives_arithmetic_mean(self):
        h = random_hidden(seed=3)
        space = mk.default_space(4)
        params = mk.MaskParams.zeros(1, space)
        out = mk.relaxed_mix(h, params, space, 0).values.data
        variants = [mk.apply_candidate(h, c).values.data for c in space]
        np.testing.assert_allclose(out, np.mean(variants, axis=0), atol=1e-12)

    def test_saturated_row_selects_candidate_zero(self):
        h = random_hidden(seed=4)
        space = mk.default_space(4)
        logits = np.zeros((1, space.size))
        logits[0, 0] = 40.0
        params = mk.MaskParams(ad.tensor(logits))
        out = mk.relaxed_mix(h, params, space, 0).values.data
        want = mk.apply_candidate(h, space[0]).values.data
        assert np.abs(out - want).max() < 1e-6

    def test_two_candidate_convex_combination_oracle(self):
        h = random_hidden(seed=5)
        space = mk.CandidateSpace((mk.MaskCandidate((1,)), mk.MaskCandidate((2, 3))))
        logits = np.array([[0.7, -0.4]])
        params = mk.MaskParams(ad.tensor(logits))
        lam = np.exp(0.7) / (np.exp(0.7) + np.exp(-0.4))
        v1 = mk.apply_candidate(h, space[0]).values.data
        v2 = mk.apply_candidate(h, space[1]).values.data
        out = mk.relaxed_mix(h, params, space, 0).values.data
        np.testing.assert_allclose(out, lam * v1 + (1 - lam) * v2, atol=1e-12)

    def test_output_in_convex_hull_entrywise(self):
        h = random_hidden(seed=6)
        space = mk.default_space(4)
        params = mk.MaskParams(ad.tensor(np.random.default_rng(1).normal(size=(2, 6))))
        variants = np.stack([mk.apply_candidate(h, c).values.data for c in space])
        for s in range(2):
            out = mk.relaxed_mix(h, params, space, s).values.data
            assert (out >= variants.min(axis=0) - 1e-12).all()
            assert (out <= variants.max(axis=0) + 1e-12).all()

    def test_selector_out_of_range(self):
        h = random_hidden()
        space = mk.default_space(4)
        params = mk.MaskParams.zeros(1, space)
        with pytest.raises(IndexError, match="selection"):
            mk.relaxed_mix(h, params, space, 1)

    def test_gradient_wrt_logits_matches_finite_differences(self):
        h = random_hidden(seed=7)
        space = mk.default_space(4)
        rng = np.random.default_rng(8)
        const = rng.uniform(-1, 1, h.values.shape)
        logits = ad.tensor(rng.normal(size=(1, 6)))

        def build(w):
            mixed = mk.relaxed_mix(h, mk.MaskParams(w), space, 0)
            return ad.sum_all(ad.mul_const(mixed.values, const))

        got = ad.backward(build(logits))[logits]
        want = ad.finite_difference_grad(build, logits)
        assert np.abs(got - want).max() <= 1e-7 + 1e-4 * np.abs(want).max()

    def test_gradient_flows_to_hidden_states(self):
        h = random_hidden(seed=9)
        space = mk.default_space(4)
        params = mk.MaskParams.zeros(1, space)
        loss = ad.sum_all(mk.relaxed_mix(h, params, space, 0).values)
        grads = ad.backward(loss)
        assert grads[h.values].shape == h.values.shape
        # Slot 0 is never masked, so its coefficient is exactly 1.
        np.testing.assert_allclose(grads[h.values][0], np.ones_like(grads[h.values][0]))


class TestDiscretize:
    def test_argmax_per_row(self):
        space = mk.default_space(4)
        params = mk.MaskParams(ad.tensor([[0.1, 2.0, -1.0, 0.0, 0.0, 0.0]]))
        assert mk.discretize(params, space) == [space[1]]

    def test_tie_breaks_to_lowest_index(self):
        space = mk.default_space(4)
        params = mk.MaskParams.zeros(2, space)
        assert mk.discretize(params, space) == [space[0], space[0]]

    def test_shift_invariance(self):
        space = mk.default_space(4)
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(2, 6))
        base = mk.discretize(mk.MaskParams(ad.tensor(logits)), space)
        shifted = mk.discretize(mk.MaskParams(ad.tensor(logits + 13.5)), space)
        assert base == shifted

    @given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["affine", "tanh", "exp", "cube"]))
    @settings(max_examples=40, deadline=None)
    def test_monotone_transform_invariance(self, seed, kind):
        transforms = {
            "affine": lambda x: 2.5 * x + 3.0,
            "tanh": np.tanh,
            "exp": np.exp,
            "cube": lambda x: x ** 3 + x,
        }
        space = mk.default_space(4)
        logits = np.random.default_rng(seed).uniform(-3, 3, (2, 6))
        base = mk.discretize(mk.MaskParams(ad.tensor(logits)), space)
        mapped = mk.discretize(mk.MaskParams(ad.tensor(transforms[kind](logits))), space)
        assert base == mapped


class TestMaskParams:
    def test_selector_count_must_be_below_candidates(self):
        space = mk.default_space(4)
        with pytest.raises(ConfigError, match="selection rows"):
            mk.MaskParams(ad.tensor(np.zeros((6, 6))))
        assert mk.MaskParams.zeros(5, space).selectors == 5

    def test_non_finite_rejected(self):
        with pytest.raises(ConfigError, match="finite"):
            mk.MaskParams(ad.tensor([[np.inf, 0.0, 0.0]]))


class TestVanillaMask:
    def test_zero_rate_is_identity(self):
        h = random_hidden(seed=10)
        out = mk.vanilla_mask(h, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out.values.data, h.values.data)

    def test_survivors_scaled_by_two_at_half_rate(self):
        h = random_hidden(seed=11)
        out = mk.vanilla_mask(h, 0.5, np.random.default_rng(3)).values.data
        ratio = out[1:] / h.values.data[1:]
        assert set(np.round(np.unique(ratio), 12)) <= {0.0, 2.0}
        np.testing.assert_array_equal(out[0], h.values.data[0])

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError, match="rate"):
            mk.vanilla_mask(random_hidden(), 1.0, np.random.default_rng(0))

    def test_expectation_preserved_monte_carlo(self):
        h = random_hidden(slots=4, plen=2, d=2, seed=12, lo=0.5, hi=2.0)
        rng = np.random.default_rng(99)
        n = 100_000
        p = 0.5
        total = np.zeros(h.values.shape)
        for _ in range(n):
            total += mk.vanilla_mask(h, p, rng).values.data
        mean = total / n
        sigma = np.abs(h.values.data) * np.sqrt(p / (1 - p)) / np.sqrt(n)
        assert (np.abs(mean - h.values.data) <= 3 * sigma + 1e-12).all()


class TestDimensionDropout:
    def test_zero_rate_is_identity(self):
        h = random_hidden(seed=13)
        out = mk.dimension_dropout(h, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out.values.data, h.values.data)

    def test_entrywise_scaling_convention(self):
        h = random_hidden(seed=14)
        out = mk.dimension_dropout(h, 0.5, np.random.default_rng(5)).values.data
        ratio = out[1:] / h.values.data[1:]
        assert set(np.round(np.unique(ratio), 12)) <= {0.0, 2.0}
        # Entry-level granularity: some passage slice is partially dropped.
        partial = [(ratio[i] == 0).any() and (ratio[i] == 2).any() for i in range(ratio.shape[0])]
        assert any(partial)

    def test_expectation_preserved_monte_carlo(self):
        h = random_hidden(slots=3, plen=2, d=2, seed=15, lo=0.5, hi=2.0)
        rng = np.random.default_rng(7)
        n = 100_000
        p = 0.3
        total = np.zeros(h.values.shape)
        for _ in range(n):
            total += mk.dimension_dropout(h, p, rng).values.data
        mean = total / n
        sigma = np.abs(h.values.data) * np.sqrt(p / (1 - p)) / np.sqrt(n)
        assert (np.abs(mean - h.values.data) <= 3 * sigma + 1e-12).all()


class TestEvalTransforms:
    def test_mask_ranks(self):
        states = np.random.default_rng(0).normal(size=(5, 3, 2))
        out = mk.eval_mask_ranks([1, 4])(states)
        assert np.array_equal(out[1], np.zeros_like(out[1]))
        assert np.array_equal(out[4], np.zeros_like(out[4]))
        np.testing.assert_array_equal(out[2], states[2])

    def test_permute_identity_is_noop(self):
        states = np.random.default_rng(1).normal(size=(6, 2, 2))

        class IdentityRng:
            def permutation(self, k):
                return np.arange(k)

        out = mk.eval_permute_top(3)(states, IdentityRng())
        np.testing.assert_array_equal(out, states)

    def test_permute_moves_only_top_k(self):
        states = np.random.default_rng(2).normal(size=(6, 2, 2))
        out = mk.eval_permute_top(3)(states, np.random.default_rng(12))
        np.testing.assert_array_equal(out[0], states[0])
        np.testing.assert_array_equal(out[4:], states[4:])
        assert sorted(map(tuple, out[1:4].reshape(3, -1))) == sorted(map(tuple, states[1:4].reshape(3, -1)))

    def test_remove_shifts_successors_up(self):
        states = np.random.default_rng(3).normal(size=(5, 2, 2))
        out = mk.eval_remove_rank(2)(states)
        assert out.shape == (4, 2, 2)
        np.testing.assert_array_equal(out[0], states[0])
        np.testing.assert_array_equal(out[1], states[1])
        np.testing.assert_array_equal(out[2], states[3])
        np.testing.assert_array_equal(out[3], states[4])
