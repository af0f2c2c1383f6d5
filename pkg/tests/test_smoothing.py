import math

import numpy as np
import pytest

from weam import autodiff as ad
from weam import smoothing as S
from weam.autodiff import Tensor
from weam.errors import ConfigurationError, DimensionError, VocabularyError
from weam.layers import EmbeddingTable, embed

N_TRIALS = 1000


def random_dists(seed, n=N_TRIALS, vmax=12):
    """Random distributions of random width, peaked to varying degrees."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        v = int(rng.integers(2, vmax + 1))
        logits = rng.normal(scale=rng.uniform(0.1, 5.0), size=v)
        p = np.exp(logits - logits.max())
        yield rng, p / p.sum()


def first_argmax(x):
    return int(np.flatnonzero(x == x.max())[0])


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(mode="beam"), dict(epsilon=-1.0), dict(tau=0.0), dict(tau=1.5), dict(mode="rweam", tau=0.3), dict(xi=2.0)],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigurationError):
            S.SmoothingConfig(**kwargs)

    def test_defaults(self):
        cfg = S.SmoothingConfig()
        assert (cfg.mode, cfg.epsilon, cfg.xi, cfg.use_reestimated_loss) == ("mweam", 1.0, 0.5, True)


class TestMix:
    def test_one_hot_is_lookup(self, rng):
        table = EmbeddingTable(5, 3, rng)
        np.testing.assert_array_equal(S.mix_embedding(np.eye(5)[3], table).data, table.matrix.data[3])

    def test_midpoint_and_centroid(self, f64, rng):
        table = EmbeddingTable(4, 3, rng)
        m = table.matrix.data
        np.testing.assert_allclose(S.mix_embedding([0.5, 0.5, 0, 0], table).data, (m[0] + m[1]) / 2)
        np.testing.assert_allclose(S.mix_embedding(np.full(4, 0.25), table).data, m.mean(0))

    def test_length_mismatch(self, rng):
        with pytest.raises(DimensionError):
            S.mix_embedding(np.ones(3) / 3, EmbeddingTable(4, 2, rng))

    def test_convex_hull(self, f64):
        table = EmbeddingTable(12, 6, np.random.default_rng(0))
        for rng, p in random_dists(1):
            v = len(p)
            t = EmbeddingTable(v, 6, rng)
            md = S.margin_mask(p, float(rng.uniform(0, 3)))
            out = S.mix_embedding(md.probs, t).data
            rows = t.matrix.data[md.mask]
            assert (out >= rows.min(0) - 1e-12).all() and (out <= rows.max(0) + 1e-12).all()
        assert table.vocab_size == 12


class TestRescale:
    def test_identity(self, f64):
        p = np.array([0.2, 0.3, 0.5])
        np.testing.assert_array_equal(S.rescale(p, 1.0).data, p)

    def test_hand_example(self, f64):
        # [0.25^2, 0.75^2] = [0.0625, 0.5625], total 0.625
        np.testing.assert_allclose(S.rescale([0.25, 0.75], 0.5).data, [0.0625 / 0.625, 0.5625 / 0.625], atol=1e-12)

    def test_sharp_limit(self, f64):
        q = S.rescale([0.2, 0.5, 0.3], 0.01).data
        assert np.delete(q, 1).max() < 1e-6

    def test_bad_tau(self):
        with pytest.raises(ConfigurationError):
            S.rescale([0.5, 0.5], 0.0)

    def test_tiny_masses_do_not_underflow(self, f64):
        p = np.array([1e-200, 1e-200 * 3])
        np.testing.assert_allclose(S.rescale(p / 1.0, 0.5).data, [0.1, 0.9], atol=1e-12)

    def test_argmax_and_order_preserved(self, f64):
        for rng, p in random_dists(2):
            q = S.rescale(p, float(rng.uniform(0.05, 1.0))).data
            assert first_argmax(q) == first_argmax(p)
            assert abs(q.sum() - 1) < 1e-6
            order = np.argsort(p, kind="stable")
            assert (np.diff(q[order]) >= -1e-15).all()


class TestMarginMask:
    def test_hand_example(self, f64):
        # threshold 0.6 / e ~= 0.2207 removes only the 0.1 word
        md = S.margin_mask([0.6, 0.3, 0.1], 1.0)
        assert md.mask.tolist() == [True, True, False]
        np.testing.assert_allclose(md.probs.data, [2 / 3, 1 / 3, 0], atol=1e-12)

    def test_zero_margin_is_argmax(self, f64):
        md = S.margin_mask([0.2, 0.5, 0.3], 0.0)
        assert md.mask.tolist() == [False, True, False]
        assert md.probs.data.tolist() == [0.0, 1.0, 0.0]

    def test_uniform_keeps_everything(self, f64):
        p = np.full(5, 0.2)
        md = S.margin_mask(p, 0.7)
        assert md.mask.all()
        np.testing.assert_allclose(md.probs.data, p)

    def test_support_monotone_in_epsilon(self):
        for rng, p in random_dists(3):
            e1, e2 = sorted(rng.uniform(0, 4, size=2))
            m1, m2 = S.margin_mask(p, e1).mask, S.margin_mask(p, e2).mask
            assert not (m1 & ~m2).any()

    def test_argmax_preserved_and_renormalised(self, f64):
        for rng, p in random_dists(4):
            md = S.margin_mask(p, float(rng.uniform(0, 4)))
            q = md.probs.data
            assert md.mask[first_argmax(p)]
            assert first_argmax(q) == first_argmax(p)
            assert abs(q.sum() - 1) < 1e-6
            assert not q[~md.mask].any()

    def test_batched_rows_independent(self, f64, rng):
        p = np.stack([d for _, d in random_dists(5, n=6)][:1] * 2)
        p[1] = p[1][::-1]
        md = S.margin_mask(p, 1.0)
        assert md.mask[1].tolist() == S.margin_mask(p[1], 1.0).mask.tolist()

    def test_log_probs_match_renormalised(self, f64, rng):
        logits = rng.normal(size=(3, 7))
        md = S.margin_mask(ad.softmax(logits), 1.0, ad.log_softmax(logits))
        np.testing.assert_allclose(md.log_probs.data[md.mask], np.log(md.probs.data[md.mask]), atol=1e-12)


class TestGoldThreshold:
    def test_hand_example(self, f64):
        # threshold 0.1 / e ~= 0.0368 keeps both words
        md = S.gold_threshold_mask([0.1, 0.9], 0, 1.0, r=0)
        assert md.mask.all()
        np.testing.assert_allclose(md.probs.data, [0.1, 0.9], atol=1e-12)

    def test_zero_margin_keeps_target(self, f64):
        md = S.gold_threshold_mask([0.2, 0.5, 0.3], 1, 0.0, r=0)
        assert md.mask[1]
        md = S.gold_threshold_mask([0.2, 0.5, 0.3], 0, 0.0, r=0)
        assert md.mask.tolist() == [True, True, True]

    def test_r1_is_margin_mask(self, f64):
        for rng, p in random_dists(6, n=200):
            eps = float(rng.uniform(0, 3))
            a = S.gold_threshold_mask(p, int(rng.integers(len(p))), eps, r=1)
            b = S.margin_mask(p, eps)
            assert (a.mask == b.mask).all()
            assert np.array_equal(a.probs.data, b.probs.data)

    def test_gold_inclusion(self):
        for rng, p in random_dists(7):
            target = int(rng.integers(len(p)))
            md = S.gold_threshold_mask(p, target, float(rng.uniform(0, 4)), r=0)
            assert md.mask[target]

    def test_target_out_of_range(self):
        with pytest.raises(VocabularyError):
            S.gold_threshold_mask([0.5, 0.5], 2, 1.0, r=0)

    def test_per_row_r(self, f64):
        p = np.array([[0.1, 0.05, 0.85], [0.1, 0.05, 0.85]])
        md = S.gold_threshold_mask(p, [1, 1], 1.0, r=[0, 1])
        assert md.mask.tolist() == [[True, True, True], [False, False, True]]


class TestBernoulli:
    def test_endpoints(self):
        st = S.SchedulerState(max_steps=10)
        assert not S.bernoulli_schedule(st, 0.0, size=1000).any()
        st.steps = 10
        assert S.bernoulli_schedule(st, 0.0, size=1000).all()

    def test_lowerbound_monte_carlo(self):
        st = S.SchedulerState(max_steps=10, steps=2, seed=3)
        assert abs(S.bernoulli_schedule(st, 0.5, size=100_000).mean() - 0.5) < 0.01

    def test_progress_monte_carlo(self):
        st = S.SchedulerState(max_steps=10, steps=7, seed=4)
        assert abs(S.bernoulli_schedule(st, 0.5, size=100_000).mean() - 0.7) < 0.01

    def test_deterministic_given_seed_and_step(self):
        draws = [S.bernoulli_schedule(S.SchedulerState(10, 5, seed=9), 0.0, size=50) for _ in range(2)]
        assert (draws[0] == draws[1]).all()

    def test_scalar_draw(self):
        assert S.bernoulli_schedule(S.SchedulerState(10, 10), 0.0) == 1

    def test_state_roundtrip(self):
        st = S.SchedulerState(100, 0, seed=5)
        S.bernoulli_schedule(st, 0.0, size=7)
        st.advance(3)
        clone = S.SchedulerState.from_state(st.get_state())
        assert clone.steps == 3
        assert (S.bernoulli_schedule(st, 0.5, size=20) == S.bernoulli_schedule(clone, 0.5, size=20)).all()

    def test_advance_clamps(self):
        st = S.SchedulerState(5)
        st.advance(9)
        assert st.steps == 5 and st.progress == 1.0

    def test_streams_are_independent(self):
        st = S.SchedulerState(10, 5, seed=1)
        a = st.rng.random(100)
        b = st.gold_rng.random(100)
        assert not np.array_equal(a, b)


class TestNextInput:
    def setup_table(self, rng, v=6, d=4):
        return EmbeddingTable(v, d, rng)

    def test_teacher_forcing(self, f64, rng):
        table = self.setup_table(rng)
        p = ad.softmax(rng.normal(size=(3, 6)))
        feed = S.next_input(S.SmoothingConfig("teacher_forcing"), p, [1, 2, 3], table)
        np.testing.assert_array_equal(feed.v.data, table.matrix.data[[1, 2, 3]])
        assert feed.p_for_loss.probs is p

    def test_weam_one_hot_is_teacher_forcing_on_prediction(self, f64, rng):
        table = self.setup_table(rng)
        feed = S.next_input(S.SmoothingConfig("weam"), np.eye(6)[[4, 0]], [1, 1], table)
        np.testing.assert_array_equal(feed.v.data, embed([4, 0], table).data)

    def test_rweam_tau_one_is_weam(self, f64, rng):
        table = self.setup_table(rng)
        p = ad.softmax(rng.normal(size=(5, 6)))
        a = S.next_input(S.SmoothingConfig("rweam", tau=1.0), p, [0] * 5, table).v.data
        b = S.next_input(S.SmoothingConfig("weam"), p, [0] * 5, table).v.data
        assert np.abs(a - b).max() < 1e-6

    def test_mweam_warmup_start_is_ground_truth(self, f64, rng):
        table = self.setup_table(rng)
        state = S.SchedulerState(100, 0, seed=0)
        p = ad.softmax(rng.normal(size=(64, 6)))
        tgt = rng.integers(6, size=64)
        feed = S.next_input(S.SmoothingConfig(), p, tgt, table, state)
        np.testing.assert_array_equal(feed.v.data, table.matrix.data[tgt])
        assert not feed.used_mixture.any()

    def test_mweam_zero_margin_is_greedy_feeding(self, f64, rng):
        table = self.setup_table(rng)
        state = S.SchedulerState(10, 10, seed=0)
        p = ad.softmax(rng.normal(scale=3, size=(32, 6)))
        feed = S.next_input(S.SmoothingConfig(epsilon=0.0), p, rng.integers(6, size=32), table, state)
        np.testing.assert_array_equal(feed.v.data, table.matrix.data[p.data.argmax(-1)])

    def test_reestimated_loss_and_fallback(self, f64, rng):
        table = self.setup_table(rng)
        # late in training, r is almost always 1: a low-probability target is masked out
        state = S.SchedulerState(10, 10, seed=0)
        p = Tensor(np.array([[0.9, 0.02, 0.02, 0.02, 0.02, 0.02]] * 2))
        feed = S.next_input(S.SmoothingConfig(), p, [1, 0], table, state)
        assert feed.fallback.tolist() == [True, False]
        assert feed.reestimated.tolist() == [False, True]
        np.testing.assert_array_equal(feed.p_for_loss.probs.data[0], p.data[0])
        np.testing.assert_allclose(feed.p_for_loss.probs.data[1], [1, 0, 0, 0, 0, 0])

    def test_without_reestimated_loss(self, f64, rng):
        table = self.setup_table(rng)
        p = ad.softmax(rng.normal(size=(4, 6)))
        feed = S.next_input(S.SmoothingConfig(use_reestimated_loss=False), p, [0] * 4, table, S.SchedulerState(1, 1))
        assert feed.p_for_loss.probs is p and feed.p_for_loss.mask.all()

    def test_needs_state(self, rng):
        with pytest.raises(ConfigurationError):
            S.next_input(S.SmoothingConfig(), np.full(6, 1 / 6), 0, self.setup_table(rng))

    def test_mweam_gradient_with_constant_mask(self, f64):
        rng = np.random.default_rng(11)
        table = EmbeddingTable(8, 3, rng)
        table.matrix.data[...] = rng.normal(size=(8, 3))
        logits = Tensor(rng.normal(scale=2, size=(5, 8)), requires_grad=True)
        target = rng.integers(8, size=5)
        w = rng.normal(size=(5, 3))
        cfg = S.SmoothingConfig(epsilon=1.0)

        # stay well clear of the threshold so finite differences never flip the mask
        p0 = ad.softmax(logits.data).data
        for r in (0, 1):
            ref = p0.max(-1) if r else p0[np.arange(5), target]
            assert np.abs(np.log(p0) - np.log(ref)[:, None] + 1.0).min() > 1e-3

        def f():
            state = S.SchedulerState(10, 6, seed=2)
            feed = S.next_input(cfg, ad.softmax(logits), target, table, state, ad.log_softmax(logits))
            return ad.add(ad.sum(ad.mul(feed.v, w)), ad.sum(feed.p_for_loss.log_on_support()[:, :2]))

        state = S.SchedulerState(10, 6, seed=2)
        feed = S.next_input(cfg, ad.softmax(logits), target, table, state)
        assert feed.used_mixture.any() and not feed.p_for_loss.mask.all()
        assert ad.grad_check(f, [logits, table.matrix]) < 1e-4


def test_log_floor_constant():
    assert S.LOG_FLOOR == pytest.approx(math.log(1e-10))
