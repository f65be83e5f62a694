import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphvqa.core import (
    AlignmentError,
    NoiseSpec,
    SequenceDistribution,
    StepDistribution,
    VisualTokens,
)
from glyphvqa.infotheory import (
    kl_divergence,
    make_mi_report,
    mutual_information,
    noise_augment,
    sequence_entropy,
    sequence_kl,
    step_entropy,
)


def dist(*probs) -> StepDistribution:
    return StepDistribution(probs=np.array(probs, dtype=float))


def seq(steps, tokens=None) -> SequenceDistribution:
    steps = tuple(steps)
    if tokens is None:
        tokens = tuple(int(np.argmax(s.probs)) for s in steps)
    return SequenceDistribution(steps=steps, realized_tokens=tokens)


def random_dist(rng, size) -> StepDistribution:
    return StepDistribution(probs=rng.dirichlet(np.ones(size)))


simplex = st.integers(min_value=2, max_value=12).flatmap(
    lambda n: st.lists(
        st.floats(min_value=1e-6, max_value=1.0), min_size=n, max_size=n
    )
)


class TestStepEntropy:
    def test_uniform_is_log_vocab(self):
        assert step_entropy(dist(0.25, 0.25, 0.25, 0.25)) == pytest.approx(
            math.log(4), abs=1e-9
        )

    def test_one_hot_is_zero(self):
        assert step_entropy(dist(1.0, 0.0, 0.0)) == 0.0

    def test_half_half_with_zeros(self):
        assert step_entropy(dist(0.5, 0.5, 0.0, 0.0)) == pytest.approx(
            math.log(2), abs=1e-9
        )

    @given(simplex)
    @settings(max_examples=200, deadline=None)
    def test_bounds_on_random_simplex(self, weights):
        p = np.array(weights) / sum(weights)
        h = step_entropy(StepDistribution(probs=p))
        assert -1e-12 <= h <= math.log(p.size) + 1e-12


class TestSequenceEntropy:
    def test_two_uniform_binary_steps(self):
        s = seq([dist(0.5, 0.5), dist(0.5, 0.5)])
        assert sequence_entropy(s) == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_empty_sequence(self):
        assert sequence_entropy(seq([])) == 0.0
        assert sequence_entropy(seq([]), mean=True) == 0.0

    def test_one_hot_then_uniform_matches_hand_sum(self):
        # Independent oracle: per-step Shannon entropy summed by hand.
        steps = [dist(0.0, 1.0, 0.0, 0.0), dist(0.25, 0.25, 0.25, 0.25)]
        expected = 0.0 + math.log(4)
        assert sequence_entropy(seq(steps)) == pytest.approx(expected, abs=1e-12)

    def test_mean_mode(self):
        s = seq([dist(0.5, 0.5), dist(1.0, 0.0)])
        assert sequence_entropy(s, mean=True) == pytest.approx(
            math.log(2) / 2, abs=1e-12
        )

    def test_additivity_over_concatenation(self):
        rng = np.random.default_rng(7)
        a = seq([random_dist(rng, 5) for _ in range(3)])
        b = seq([random_dist(rng, 5) for _ in range(4)])
        both = seq(a.steps + b.steps)
        assert sequence_entropy(both) == pytest.approx(
            sequence_entropy(a) + sequence_entropy(b), abs=1e-12
        )


class TestKL:
    def test_identical_is_zero(self):
        p = dist(0.3, 0.7)
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-9)

    def test_one_hot_vs_uniform(self):
        assert kl_divergence(dist(1.0, 0.0), dist(0.5, 0.5)) == pytest.approx(
            math.log(2), abs=1e-6
        )

    def test_hand_evaluated_case(self):
        # 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75) = 0.5 ln 2 + 0.5 ln(2/3)
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert kl_divergence(dist(0.5, 0.5), dist(0.25, 0.75)) == pytest.approx(
            expected, abs=1e-6
        )
        assert expected == pytest.approx(0.143841, abs=1e-6)

    def test_non_negative_on_random_smoothed_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n = int(rng.integers(2, 10))
            p, q = random_dist(rng, n), random_dist(rng, n)
            assert kl_divergence(p, q) >= -1e-12

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            p = random_dist(rng, 6)
            q = random_dist(rng, 6)
            assert kl_divergence(p, p) <= 1e-9
            if not np.allclose(p.probs, q.probs):
                assert kl_divergence(p, q) > 1e-9

    def test_vocab_mismatch(self):
        with pytest.raises(AlignmentError):
            kl_divergence(dist(0.5, 0.5), dist(0.5, 0.25, 0.25))

    def test_support_violation_without_smoothing(self):
        with pytest.raises(ValueError, match="support"):
            kl_divergence(dist(0.5, 0.5), dist(1.0, 0.0), smoothing=0.0)


class TestSequenceKL:
    def test_identical_sequences(self):
        rng = np.random.default_rng(3)
        s = seq([random_dist(rng, 4) for _ in range(3)])
        assert sequence_kl(s, s) == pytest.approx(0.0, abs=1e-9)

    def test_single_step_reduces_to_kl(self):
        p, q = dist(0.2, 0.8), dist(0.6, 0.4)
        assert sequence_kl(seq([p]), seq([q])) == kl_divergence(p, q)

    def test_matches_per_step_loop_oracle(self):
        rng = np.random.default_rng(17)
        ps = seq([random_dist(rng, 6) for _ in range(5)])
        qs = seq([random_dist(rng, 6) for _ in range(5)])
        oracle = sum(kl_divergence(a, b) for a, b in zip(ps.steps, qs.steps))
        assert sequence_kl(ps, qs) == pytest.approx(oracle, abs=1e-9)

    def test_mean_mode(self):
        rng = np.random.default_rng(19)
        ps = seq([random_dist(rng, 4) for _ in range(4)])
        qs = seq([random_dist(rng, 4) for _ in range(4)])
        assert sequence_kl(ps, qs, mean=True) == pytest.approx(
            sequence_kl(ps, qs) / 4, abs=1e-12
        )

    def test_length_mismatch(self):
        rng = np.random.default_rng(23)
        with pytest.raises(AlignmentError):
            sequence_kl(
                seq([random_dist(rng, 4)]),
                seq([random_dist(rng, 4), random_dist(rng, 4)]),
            )


class TestNoiseAugment:
    def test_zero_sigma_is_identity_with_flag(self):
        v = VisualTokens(embeddings=np.arange(6, dtype=float).reshape(2, 3))
        out = noise_augment(v, NoiseSpec(mean=0.0, stddev=0.0, seed=1))
        assert out.noisy
        np.testing.assert_array_equal(out.embeddings, v.embeddings)

    def test_same_seed_is_byte_identical(self):
        v = VisualTokens(embeddings=np.ones((3, 4)))
        spec = NoiseSpec(mean=0.5, stddev=2.0, seed=42)
        a = noise_augment(v, spec)
        b = noise_augment(v, spec)
        assert a.embeddings.tobytes() == b.embeddings.tobytes()

    def test_different_seeds_differ(self):
        v = VisualTokens(embeddings=np.ones((3, 4)))
        a = noise_augment(v, NoiseSpec(stddev=1.0, seed=1))
        b = noise_augment(v, NoiseSpec(stddev=1.0, seed=2))
        assert not np.array_equal(a.embeddings, b.embeddings)

    def test_rejects_already_noisy(self):
        v = VisualTokens(embeddings=np.ones((1, 2)), noisy=True)
        with pytest.raises(ValueError, match="already"):
            noise_augment(v, NoiseSpec(stddev=1.0, seed=0))


class TestMutualInformation:
    def test_equal_inputs_give_zero(self):
        rng = np.random.default_rng(5)
        s = seq([random_dist(rng, 4) for _ in range(2)])
        assert mutual_information(s, s).mi == 0.0

    def test_uniform_baseline_one_hot_conditional(self):
        uncond = seq([dist(0.25, 0.25, 0.25, 0.25)])
        cond = seq([dist(1.0, 0.0, 0.0, 0.0)])
        frag = mutual_information(cond, uncond)
        assert frag.mi == pytest.approx(math.log(4), abs=1e-9)

    def test_negative_values_are_representable(self):
        uncond = seq([dist(1.0, 0.0, 0.0, 0.0)])
        cond = seq([dist(0.25, 0.25, 0.25, 0.25)])
        assert mutual_information(cond, uncond).mi == pytest.approx(
            -math.log(4), abs=1e-9
        )

    def test_report_identity(self):
        rng = np.random.default_rng(29)
        cond = seq([random_dist(rng, 5) for _ in range(2)])
        uncond = seq([random_dist(rng, 5) for _ in range(3)])
        rep = make_mi_report("x", cond, uncond, correct=True)
        assert rep.mi == pytest.approx(rep.h_uncond - rep.h_cond, abs=1e-9)
        assert rep.cond_len == 2 and rep.uncond_len == 3
