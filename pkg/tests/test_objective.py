import math

import numpy as np
import pytest

from glyphvqa.core import (
    AlignmentError,
    NumericalError,
    SequenceDistribution,
    StepDistribution,
)
from glyphvqa.infotheory import sequence_kl
from glyphvqa.objective import (
    CE_ORDER,
    DirectionalBatch,
    DirectionalEntry,
    LossBreakdown,
    LossWeights,
    cross_entropy,
    forward_batch,
    loss_gradient,
    mvcl_mi_loss,
    objective_value,
)
from glyphvqa.toymodel import ModelState, init_state
from glyphvqa.trainer import directional_inputs


def dist(*probs):
    return StepDistribution(probs=np.array(probs, dtype=float))


def seq(steps, tokens=None):
    steps = tuple(steps)
    if tokens is None:
        tokens = tuple(int(np.argmax(s.probs)) for s in steps)
    return SequenceDistribution(steps=steps, realized_tokens=tokens)


def random_seq(rng, length, vocab):
    return seq([StepDistribution(probs=rng.dirichlet(np.ones(vocab))) for _ in range(length)])


def random_batch(rng, vocab=6, length=2):
    gold_src = tuple(int(t) for t in rng.integers(0, vocab, size=length))
    gold_tgt = tuple(int(t) for t in rng.integers(0, vocab, size=length))
    def entry(gold):
        return DirectionalEntry(dist=random_seq(rng, length, vocab), gold=gold)
    return DirectionalBatch(
        ss=entry(gold_src), ts=entry(gold_src),
        st=entry(gold_tgt), tt=entry(gold_tgt),
        image_id="b",
    )


@pytest.fixture
def small_inputs(small_task):
    return directional_inputs(small_task.splits.train, small_task.lexicon)


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.alpha, w.beta) == (1.0, 1.0)

    @pytest.mark.parametrize("bad", [{"alpha": -0.5}, {"beta": float("inf")}, {"alpha": float("nan")}])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            LossWeights(**bad)


class TestDirectionalBatch:
    def test_requires_shared_golds_per_answer_language(self):
        rng = np.random.default_rng(0)
        batch = random_batch(rng)
        with pytest.raises(AlignmentError):
            DirectionalBatch(
                ss=batch.ss,
                ts=DirectionalEntry(dist=batch.ts.dist, gold=(5, 5)),
                st=batch.st, tt=batch.tt,
            )

    def test_entry_length_must_match_gold(self):
        rng = np.random.default_rng(1)
        with pytest.raises(AlignmentError):
            DirectionalEntry(dist=random_seq(rng, 2, 4), gold=(1,))


class TestCrossEntropy:
    def test_probability_one_on_gold_is_zero(self):
        d = seq([dist(1.0, 0.0), dist(0.0, 1.0)], tokens=(0, 1))
        assert cross_entropy(d, (0, 1)) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_single_step(self):
        d = seq([dist(0.25, 0.25, 0.25, 0.25)])
        assert cross_entropy(d, (2,)) == pytest.approx(math.log(4), abs=1e-6)

    def test_matches_per_step_loop_oracle(self):
        rng = np.random.default_rng(3)
        d = random_seq(rng, 3, 5)
        gold = (1, 4, 0)
        eps = 1e-8
        oracle = -sum(
            math.log((1 - eps) * step.probs[g] + eps / 5)
            for step, g in zip(d.steps, gold)
        )
        assert cross_entropy(d, gold) == pytest.approx(oracle, abs=1e-9)

    def test_length_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(AlignmentError):
            cross_entropy(random_seq(rng, 2, 4), (0,))

    def test_out_of_vocabulary_gold(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError):
            cross_entropy(random_seq(rng, 1, 4), (4,))


class TestLoss:
    def test_perfect_batch_is_zero(self):
        one_hot_src = seq([dist(1.0, 0.0, 0.0)], tokens=(0,))
        one_hot_tgt = seq([dist(0.0, 1.0, 0.0)], tokens=(1,))
        batch = DirectionalBatch(
            ss=DirectionalEntry(dist=one_hot_src, gold=(0,)),
            ts=DirectionalEntry(dist=one_hot_src, gold=(0,)),
            st=DirectionalEntry(dist=one_hot_tgt, gold=(1,)),
            tt=DirectionalEntry(dist=one_hot_tgt, gold=(1,)),
        )
        bd = mvcl_mi_loss(batch, LossWeights())
        assert bd.total == pytest.approx(0.0, abs=1e-5)

    def test_zero_weights_reduce_to_ce_sum(self):
        rng = np.random.default_rng(7)
        batch = random_batch(rng)
        bd = mvcl_mi_loss(batch, LossWeights(0.0, 0.0))
        ce_sum = sum(
            cross_entropy(batch.entry_by_key(k).dist, batch.entry_by_key(k).gold)
            for k in CE_ORDER
        )
        assert bd.total == ce_sum

    def test_recomposition_oracle_on_random_batches(self):
        rng = np.random.default_rng(9)
        w = LossWeights(alpha=0.7, beta=1.3)
        for _ in range(100):
            batch = random_batch(rng, vocab=int(rng.integers(3, 8)),
                                 length=int(rng.integers(1, 4)))
            bd = mvcl_mi_loss(batch, w)
            recomposed = (
                sum(
                    cross_entropy(batch.entry_by_key(k).dist, batch.entry_by_key(k).gold)
                    for k in CE_ORDER
                )
                + w.alpha * sequence_kl(batch.st.dist, batch.tt.dist)
                + w.beta * sequence_kl(batch.ts.dist, batch.ss.dist)
            )
            assert bd.total == pytest.approx(recomposed, abs=1e-9)

    def test_breakdown_recomposition_enforced(self):
        with pytest.raises(ValueError, match="recompose"):
            LossBreakdown(
                ce_ss=1.0, ce_ts=1.0, ce_st=1.0, ce_tt=1.0,
                kl_to_tt=0.5, kl_to_ss=0.5, alpha=1.0, beta=1.0,
                total=3.0,
            )

    def test_components_non_negative(self):
        with pytest.raises(ValueError):
            LossBreakdown(
                ce_ss=-0.1, ce_ts=0.0, ce_st=0.0, ce_tt=0.0,
                kl_to_tt=0.0, kl_to_ss=0.0, alpha=1.0, beta=1.0, total=-0.1,
            )

    def test_objective_value_mask(self):
        rng = np.random.default_rng(11)
        bd = mvcl_mi_loss(random_batch(rng), LossWeights())
        masked = objective_value(bd, (1, 0, 0, 1))
        assert masked == pytest.approx(
            bd.ce_ss + bd.ce_tt + bd.kl_to_tt + bd.kl_to_ss, abs=1e-12
        )

    def test_kl_mean_mode_scales_kl_terms(self):
        rng = np.random.default_rng(13)
        batch = random_batch(rng, length=3)
        full = mvcl_mi_loss(batch, LossWeights())
        mean = mvcl_mi_loss(batch, LossWeights(), kl_mean=True)
        assert mean.kl_to_tt == pytest.approx(full.kl_to_tt / 3, abs=1e-12)
        assert mean.kl_to_ss == pytest.approx(full.kl_to_ss / 3, abs=1e-12)


class TestGradient:
    def test_zero_weights_equals_ce_only_gradient(self, small_task, small_inputs):
        state = init_state(small_task.model_config)
        _, g_zero = loss_gradient(state, small_inputs[0], LossWeights(0.0, 0.0))
        _, g_full = loss_gradient(state, small_inputs[0], LossWeights(1.0, 1.0))
        _, g_klonly = loss_gradient(
            state, small_inputs[0], LossWeights(1.0, 1.0), ce_mask=(0, 0, 0, 0)
        )
        np.testing.assert_allclose(g_zero + g_klonly, g_full, atol=1e-12)

    def test_zero_gradient_at_distillation_optimum(self, small_task, small_inputs):
        # When every direction shares one instruction, students equal their
        # teachers exactly and the distillation-only gradient vanishes.
        state = init_state(small_task.model_config)
        base = small_inputs[0]
        from dataclasses import replace

        inputs = replace(
            base,
            instr_st=base.instr_ss, instr_ts=base.instr_ss, instr_tt=base.instr_ss,
            gold_tgt=base.gold_src,
        )
        _, grad = loss_gradient(
            state, inputs, LossWeights(1.0, 1.0), ce_mask=(0, 0, 0, 0)
        )
        assert np.abs(grad).max() < 1e-12

    def test_analytic_matches_frozen_teacher_finite_differences(
        self, small_task, small_inputs
    ):
        state = init_state(small_task.model_config)
        w = LossWeights(alpha=0.7, beta=1.3)
        inputs = small_inputs[0]
        bd, grad = loss_gradient(state, inputs, w)
        assert math.isfinite(bd.total)

        base_batch = forward_batch(state, inputs)
        theta0 = state.params.copy()

        def frozen_loss(params):
            b = forward_batch(ModelState(state.config, params), inputs)
            ce = sum(
                cross_entropy(b.entry_by_key(k).dist, b.entry_by_key(k).gold)
                for k in CE_ORDER
            )
            return (
                ce
                + w.alpha * sequence_kl(b.st.dist, base_batch.tt.dist)
                + w.beta * sequence_kl(b.ts.dist, base_batch.ss.dist)
            )

        h = 1e-5
        rng = np.random.default_rng(0)
        for i in rng.choice(theta0.size, size=120, replace=False):
            plus, minus = theta0.copy(), theta0.copy()
            plus[i] += h
            minus[i] -= h
            fd = (frozen_loss(plus) - frozen_loss(minus)) / (2 * h)
            if max(abs(grad[i]), abs(fd)) < 1e-10:
                continue
            rel = abs(grad[i] - fd) / max(abs(grad[i]), abs(fd))
            assert rel < 1e-4

    def test_detached_teachers_diverge_from_naive_finite_differences(
        self, small_task, small_inputs
    ):
        # Differentiating through the teachers would give a different
        # gradient; this guards the stop-gradient against regressions.
        state = init_state(small_task.model_config)
        w = LossWeights(alpha=1.0, beta=1.0)
        inputs = small_inputs[0]
        _, grad = loss_gradient(state, inputs, w)
        theta0 = state.params.copy()

        def naive_loss(params):
            b = forward_batch(ModelState(state.config, params), inputs)
            return mvcl_mi_loss(b, w).total

        h = 1e-5
        diffs = []
        for i in range(0, theta0.size, 7):
            plus, minus = theta0.copy(), theta0.copy()
            plus[i] += h
            minus[i] -= h
            fd = (naive_loss(plus) - naive_loss(minus)) / (2 * h)
            diffs.append(abs(fd - grad[i]))
        assert max(diffs) > 1e-4

    def test_non_finite_parameters_raise_numerical_error(self, small_task, small_inputs):
        state = init_state(small_task.model_config)
        params = state.params.copy()
        params[:] = np.nan
        bad = object.__new__(ModelState)
        bad.config = state.config
        bad.params = params
        bad.step = 0
        with pytest.raises(NumericalError):
            loss_gradient(bad, small_inputs[0], LossWeights())
