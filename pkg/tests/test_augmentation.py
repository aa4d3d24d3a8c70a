import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointsearch.augmentation import (
    AUG_OPS,
    AugParams,
    Policy,
    PolicySpaceTooLarge,
    apply_op,
    apply_policy,
    cutout_mask,
    enumerate_policy_arrays,
    enumerate_policy_space,
    image_rngs,
    invert,
    policy_log_prob,
    policy_scores,
    rotate,
    sample_policies,
    sample_policy,
    translate_x,
)
from jointsearch.autodiff import numerical_gradient, relative_error


def test_op_table():
    assert len(AUG_OPS) == 15
    assert [op.id for op in AUG_OPS] == list(range(15))
    free = {op.name for op in AUG_OPS if not op.uses_magnitude}
    assert free == {"auto_contrast", "invert", "equalize"}
    rot = AUG_OPS[4]
    assert rot.magnitude(0) == -30.0 and rot.magnitude(9) == 30.0


class TestSampling:
    def test_uniform_ops(self):
        params = AugParams.initial(k=1)
        draws = sample_policies(params, np.random.default_rng(0), 10**6)
        freq = np.bincount(draws.ops[:, 0], minlength=15) / 10**6
        assert np.all(np.abs(freq - 1 / 15) <= 0.005)

    def test_saturated_apply_logit(self):
        params = AugParams.initial(k=2, prob_logit=20.0)
        draws = sample_policies(params, np.random.default_rng(1), 10**5)
        assert draws.applies.all()

    def test_peaked_row(self):
        params = AugParams.initial(k=1)
        params.pi[0, 0] = 10.0
        draws = sample_policies(params, np.random.default_rng(2), 10**6)
        expected = math.exp(10) / (math.exp(10) + 14)
        assert abs(expected - 0.99936) < 1e-5
        assert abs(np.mean(draws.ops[:, 0] == 0) - expected) <= 0.0005

    def test_single_sample_is_a_policy(self):
        pol = sample_policy(AugParams.initial(k=3), np.random.default_rng(3))
        assert len(pol) == 3
        assert all(0 <= s.op < 15 and s.apply in (0, 1) and 0 <= s.bin < 10 for s in pol)

    def test_frequencies_match_enumeration(self):
        params = AugParams.random(np.random.default_rng(4), k=1, n_ops=2, n_bins=2)
        table, probs = enumerate_policy_arrays(params)
        draws = sample_policies(params, np.random.default_rng(5), 10**6)
        code = lambda b: (b.ops[:, 0] * 2 + b.applies[:, 0]) * 2 + b.bins[:, 0]
        freq = np.bincount(code(draws), minlength=8) / 10**6
        assert np.all(np.abs(freq - probs[np.argsort(code(table))]) <= 0.01)


class TestLogProb:
    def _tiny(self):
        return AugParams.initial(k=1, n_ops=2)

    def test_unapplied_uniform(self):
        logp, _ = policy_log_prob(self._tiny(), Policy.of((1, 0, 3)))
        assert logp == pytest.approx(2 * math.log(0.5), abs=1e-9)
        assert logp == pytest.approx(-1.3863, abs=1e-4)

    def test_applied_uniform(self):
        logp, _ = policy_log_prob(self._tiny(), Policy.of((0, 1, 7)))
        assert logp == pytest.approx(2 * math.log(0.5) + math.log(0.1), abs=1e-9)
        assert logp == pytest.approx(-3.6889, abs=1e-4)

    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        params = AugParams.random(rng, k=2)
        pol = sample_policy(params, rng)
        _, grad = policy_log_prob(params, pol)
        vec = params.flat()

        def f():
            return policy_log_prob(params.like(vec), pol)[0]

        fd = numerical_gradient(f, vec)
        assert relative_error(grad.flat(), fd) <= 1e-6

    def test_gradient_sparsity(self):
        params = AugParams.random(np.random.default_rng(9), k=2)
        pol = Policy.of((3, 1, 2), (7, 0, 5))
        _, g = policy_log_prob(params, pol)
        assert np.count_nonzero(g.prob_logits) == 2
        assert np.flatnonzero(g.prob_logits[0]).tolist() == [3]
        nz = np.argwhere(np.abs(g.delta).sum(axis=2) > 0)
        assert nz.tolist() == [[0, 3]]

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            policy_log_prob(AugParams.initial(k=1), Policy.of((15, 1, 0)))
        with pytest.raises(IndexError):
            policy_log_prob(AugParams.initial(k=1), Policy.of((0, 1, 10)))

    def test_batch_scores_match_scalar(self):
        rng = np.random.default_rng(11)
        params = AugParams.random(rng, k=2, n_ops=4, n_bins=3)
        batch = sample_policies(params, rng, 50)
        logp, grads = policy_scores(params, batch)
        for i in range(0, 50, 7):
            lp, g = policy_log_prob(params, batch[i])
            assert logp[i] == pytest.approx(lp, abs=1e-12)
            np.testing.assert_allclose(grads[i], g.flat(), atol=1e-12)

    def test_marginal_of_enumeration(self):
        # the closed-form likelihood is the enumerated joint summed over the unused bin
        params = AugParams.random(np.random.default_rng(12), k=1, n_ops=3, n_bins=4)
        table, probs = enumerate_policy_arrays(params)
        for i in range(len(table)):
            lp, _ = policy_log_prob(params, table[i])
            if table.applies[i, 0]:
                assert math.exp(lp) == pytest.approx(probs[i], rel=1e-12)
            else:
                same = (table.ops[:, 0] == table.ops[i, 0]) & (table.applies[:, 0] == 0)
                assert math.exp(lp) == pytest.approx(probs[same].sum(), rel=1e-12)


class TestEnumeration:
    def test_small_space(self):
        rows = enumerate_policy_space(AugParams.initial(k=1), n_ops=2, n_bins=2)
        assert len(rows) == 8
        assert sum(p for _, p in rows) == pytest.approx(1.0, abs=1e-12)

    def test_two_slots(self):
        params = AugParams.random(np.random.default_rng(0), k=2)
        rows = enumerate_policy_space(params, n_ops=3, n_bins=4)
        assert len(rows) == 576
        assert abs(sum(p for _, p in rows) - 1) <= 1e-9
        assert all(0 < p < 1 for _, p in rows)

    def test_cap(self):
        with pytest.raises(PolicySpaceTooLarge) as info:
            enumerate_policy_space(AugParams.initial(k=3))
        assert info.value.cardinality == 300**3
        with pytest.raises(PolicySpaceTooLarge):
            enumerate_policy_space(AugParams.initial(k=2), cap=1000)

    @settings(max_examples=30, deadline=None)
    @given(
        seed=st.integers(0, 2**31 - 1),
        k=st.sampled_from([1, 2]),
        n_ops=st.integers(1, 4),
        n_bins=st.integers(1, 4),
        scale=st.floats(0.1, 5.0),
    )
    def test_normalization(self, seed, k, n_ops, n_bins, scale):
        params = AugParams.random(np.random.default_rng(seed), k=k, n_ops=n_ops, n_bins=n_bins, scale=scale)
        _, probs = enumerate_policy_arrays(params)
        assert abs(probs.sum() - 1) <= 1e-9
        assert np.all(probs > 0) and np.all(probs < 1 + 1e-15)


def test_score_has_zero_mean():
    rng = np.random.default_rng(21)
    params = AugParams.random(rng, k=2, n_ops=3, n_bins=3)
    _, grads = policy_scores(params, sample_policies(params, rng, 10**5))
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1) / math.sqrt(len(grads))
    live = se > 0
    assert np.all(np.abs(mean[live]) <= 4 * se[live])
    assert np.all(mean[~live] == 0)


def _smooth_image(h=16, w=16, c=3):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    chans = [0.5 + 0.4 * np.sin(2 * np.pi * (xx + 0.3 * ch)) * np.cos(2 * np.pi * yy) for ch in range(c)]
    return np.stack(chans)[None]


class TestTransforms:
    def test_all_skipped_is_bitwise_identity(self):
        x = np.random.default_rng(0).random((4, 3, 16, 16))
        out = apply_policy(Policy.of((4, 0, 9), (14, 0, 9)), x, np.random.default_rng(1))
        assert out.tobytes() == x.tobytes()

    def test_zero_translation(self):
        x = np.random.default_rng(2).random((2, 3, 8, 8))
        assert np.array_equal(translate_x(x, 0.0), x)
        assert np.array_equal(rotate(x, 0.0), x)

    def test_invert(self):
        x = np.random.default_rng(3).random((2, 3, 8, 8))
        np.testing.assert_array_equal(invert(x), 1 - x)
        pol = Policy.of((6, 1, 4))
        np.testing.assert_array_equal(apply_policy(pol, x, np.random.default_rng(0)), 1 - x)

    def test_rotation_round_trip(self):
        x = _smooth_image(32, 32)
        back = rotate(rotate(x, 20.0), -20.0)
        interior = (slice(None), slice(None), slice(8, 24), slice(8, 24))
        assert np.mean(np.abs(back[interior] - x[interior])) <= 2 / 255

    def test_translation_direction(self):
        x = np.zeros((1, 1, 10, 10))
        x[0, 0, 5, 2] = 1.0
        out = translate_x(x, 0.3)
        assert np.argwhere(out[0, 0] > 0.5).tolist() == [[5, 5]]

    @pytest.mark.parametrize("op", [5, 6, 7])
    def test_magnitude_free_ops_ignore_bin(self, op):
        x = np.random.default_rng(op).random((2, 3, 8, 8))
        a = apply_policy(Policy.of((op, 1, 0)), x, np.random.default_rng(0))
        b = apply_policy(Policy.of((op, 1, 9)), x, np.random.default_rng(0))
        np.testing.assert_array_equal(a, b)

    def test_solarize_extremes(self):
        x = np.random.default_rng(4).random((1, 3, 8, 8))
        np.testing.assert_array_equal(apply_op(x, 8, 1.0, []), x)
        np.testing.assert_allclose(apply_op(x, 8, 0.0, []), 1 - x)

    def test_enhance_identity_factor(self):
        x = np.random.default_rng(5).random((2, 3, 8, 8))
        for op in (10, 11, 12, 13):
            np.testing.assert_allclose(apply_op(x, op, 1.0, []), x, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(op=st.integers(0, 14), b=st.integers(0, 9), seed=st.integers(0, 1000))
    def test_outputs_stay_in_unit_range(self, op, b, seed):
        x = np.random.default_rng(seed).random((2, 3, 8, 8))
        out = apply_policy(Policy.of((op, 1, b)), x, np.random.default_rng(seed))
        assert out.shape == x.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_per_image_streams_make_splitting_irrelevant(self):
        x = np.random.default_rng(6).random((6, 3, 8, 8))
        pol = Policy.of((14, 1, 6), (2, 1, 3))
        rngs = image_rngs(np.random.default_rng(7), 6)
        whole = apply_policy(pol, x, rngs=rngs)
        rngs = image_rngs(np.random.default_rng(7), 6)
        parts = [apply_policy(pol, x[i : i + 1], rngs=rngs[i : i + 1]) for i in range(6)]
        assert np.concatenate(parts).tobytes() == whole.tobytes()

    def test_cutout_area(self):
        rng = np.random.default_rng(8)
        frac = 0.5
        area = np.mean([cutout_mask(16, 16, frac, rng).mean() for _ in range(10**4)])
        expected = (round(frac * 16) / 16) ** 2
        assert abs(area - expected) <= 0.05 * expected
