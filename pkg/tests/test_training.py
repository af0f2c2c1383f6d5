import math

import numpy as np
import pytest

from weam import autodiff as ad
from weam import training as T
from weam.autodiff import Tensor
from weam.data import build_vocab
from weam.errors import ConfigurationError, DivergenceError, VocabularyError
from weam.losses import smoothed_cross_entropy, total_loss
from weam.model import LossOutput, ModelConfig, Seq2SeqVAE, translate
from weam.smoothing import MaskedDistribution, SmoothingConfig, margin_mask


class TestCrossEntropy:
    def test_perfect_prediction(self, f64):
        assert smoothed_cross_entropy(np.eye(4)[2], 2, rate=0.0).item() == 0.0

    def test_uniform(self, f64):
        assert smoothed_cross_entropy(np.full(6, 1 / 6), 1, rate=0.0).item() == pytest.approx(math.log(6))

    def test_hand_example(self, f64):
        q = [0.9 + 0.1 / 4] + [0.1 / 4] * 3
        p = [0.7, 0.1, 0.1, 0.1]
        expected = -sum(qi * math.log(pi) for qi, pi in zip(q, p))
        got = smoothed_cross_entropy(p, 0, rate=0.1).item()
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.5026, abs=1e-4)

    def test_masked_off_support_uses_floor(self, f64):
        md = margin_mask([0.6, 0.3, 0.1], 1.0)
        got = smoothed_cross_entropy(md, 0, rate=0.3).item()
        q = [0.7 + 0.1, 0.1, 0.1]
        expected = -(q[0] * math.log(2 / 3) + q[1] * math.log(1 / 3) + q[2] * math.log(1e-10))
        assert got == pytest.approx(expected, abs=1e-10)

    def test_no_gradient_to_masked_words(self, f64):
        logits = Tensor([[2.0, 1.0, -3.0]], requires_grad=True)
        md = margin_mask(ad.softmax(logits), 1.0, ad.log_softmax(logits))
        ad.backward(ad.sum(smoothed_cross_entropy(md, [0], rate=0.1)))
        # the normaliser terms cancel analytically; only round-off remains
        assert abs(logits.grad[0, 2]) < 1e-12

    def test_gibbs_inequality(self, f64):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            v = int(rng.integers(2, 10))
            p = rng.dirichlet(np.ones(v))
            t, rate = int(rng.integers(v)), float(rng.uniform(0, 0.5))
            q = np.full(v, rate / v)
            q[t] += 1 - rate
            entropy = -float(np.sum(q * np.log(q)))
            assert smoothed_cross_entropy(p, t, rate).item() >= entropy - 1e-12

    def test_batched_rows(self, f64):
        p = np.array([[0.7, 0.1, 0.1, 0.1], [0.25] * 4])
        rows = smoothed_cross_entropy(p, [0, 3], rate=0.1).data
        assert rows.shape == (2,)
        assert rows[1] == pytest.approx(math.log(4))

    def test_target_range(self):
        with pytest.raises(VocabularyError):
            smoothed_cross_entropy([0.5, 0.5], 2)

    def test_explicit_masked_distribution(self, f64):
        md = MaskedDistribution(np.array([True, False]), Tensor([1.0, 0.0]))
        assert smoothed_cross_entropy(md, 0, 0.0).item() == 0.0


class TestTotalLoss:
    def test_examples(self):
        ce, kl = Tensor(1.0), Tensor(0.5)
        assert total_loss(ce, kl, 0.0).item() == 1.0
        assert total_loss(ce, Tensor(0.0), 1.0).item() == 1.0
        assert total_loss(ce, kl, 0.5).item() == 1.25


class TestSchedule:
    def test_peak(self):
        assert T.lr_at(200, 200) == pytest.approx(0.001)

    def test_ramp_and_decay(self):
        assert T.lr_at(100, 200) == pytest.approx(0.0005)
        # sqrt(200 / 800) = 0.5
        assert T.lr_at(800, 200) == pytest.approx(0.0005)

    def test_continuous_at_warmup(self):
        w = 4000
        assert abs(T.lr_at(w + 1e-9, w) - T.lr_at(w - 1e-9, w)) < 1e-12

    def test_kl_weight(self):
        assert [T.kl_weight_at(s, 4) for s in (0, 2, 4, 8)] == [0.0, 0.5, 1.0, 1.0]
        assert T.kl_weight_at(0, 4, anneal=False) == 1.0

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            T.TrainConfig(warmup=0)
        with pytest.raises(ConfigurationError):
            T.TrainConfig(label_smoothing=1.0)


def params_of(*arrays):
    return {f"p{i}": Tensor(np.array(a, dtype=np.float64), requires_grad=True, dtype=np.float64) for i, a in enumerate(arrays)}


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        ps = params_of([1.0, -2.0, 3.0])
        st = T.AdamState(ps)
        g = np.array([0.3, -5.0, 1e-3])
        T.adam_step(st, ps, {"p0": g}, lr=1e-3)
        # m_hat = g and v_hat = g^2 after bias correction
        expected = np.array([1.0, -2.0, 3.0]) - 1e-3 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(ps["p0"].data, expected, rtol=0, atol=1e-15)

    def test_zero_grad(self):
        ps = params_of([1.0, 2.0])
        st = T.AdamState(ps)
        T.adam_step(st, ps, {"p0": np.array([1.0, 1.0])}, 1e-3)
        m, v, before = st.m["p0"].copy(), st.v["p0"].copy(), ps["p0"].data.copy()
        T.adam_step(st, ps, {"p0": np.zeros(2)}, 0.0)
        np.testing.assert_array_equal(ps["p0"].data, before)
        np.testing.assert_allclose(st.m["p0"], 0.9 * m)
        np.testing.assert_allclose(st.v["p0"], 0.999 * v)

    def test_groups_independent(self):
        ps = params_of([1.0], [1.0])
        st = T.AdamState(ps)
        T.adam_step(st, ps, {"p0": np.array([1.0]), "p1": None}, 1e-3)
        assert ps["p1"].data.tolist() == [1.0]
        assert ps["p0"].data[0] < 1.0

    def test_sign_flip_symmetry(self):
        rng = np.random.default_rng(0)
        a, b = params_of(np.zeros(5)), params_of(np.zeros(5))
        sa, sb = T.AdamState(a), T.AdamState(b)
        for _ in range(5):
            g = rng.normal(size=5)
            T.adam_step(sa, a, {"p0": g}, 1e-2)
            T.adam_step(sb, b, {"p0": -g}, 1e-2)
        np.testing.assert_allclose(a["p0"].data, -b["p0"].data, atol=1e-15)

    def test_nan_skips(self):
        ps = params_of([1.0])
        st = T.AdamState(ps)
        assert not T.adam_step(st, ps, {"p0": np.array([np.nan])}, 1e-3)
        assert st.step == 0 and ps["p0"].data.tolist() == [1.0]


class TestClip:
    def test_global_norm_bound(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            grads = {i: rng.normal(scale=rng.uniform(0.01, 20), size=rng.integers(1, 6)) for i in range(3)}
            T.clip_grad_norm(grads, 5.0)
            assert math.sqrt(sum((g**2).sum() for g in grads.values())) <= 5.0 + 1e-6

    def test_small_norm_untouched(self):
        g = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}
        assert T.clip_grad_norm(g, 5.0) == 5.0
        assert g["a"].tolist() == [3.0, 0.0]


def toy_pairs(n=10, seed=0):
    rng = np.random.default_rng(seed)
    toks = [f"t{i}" for i in range(8)]
    out = []
    for _ in range(n):
        s = [toks[i] for i in rng.integers(0, 8, size=int(rng.integers(2, 5)))]
        out.append((s, s[::-1]))
    return out


def small_model(pairs, d=32, seed=0, dropout=0.0):
    vs, vt = build_vocab(s for s, _ in pairs), build_vocab(t for _, t in pairs)
    m = Seq2SeqVAE(ModelConfig(len(vs), len(vt), d=d, layers=1, dropout=dropout, max_len=16), np.random.default_rng(seed))
    return m, vs, vt


class TestFit:
    def test_zero_epochs(self):
        pairs = toy_pairs()
        m, vs, vt = small_model(pairs)
        before = {n: p.data.copy() for n, p in m.named_parameters()}
        res = T.fit(m, pairs, vs, vt, T.TrainConfig(epochs=0))
        assert res.final_step == 0 and res.log == []
        for n, p in m.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])

    def test_same_seed_same_log(self):
        pairs = toy_pairs()
        logs = []
        for _ in range(2):
            m, vs, vt = small_model(pairs, d=16, dropout=0.3)
            cfg = T.TrainConfig(epochs=2, batch_size=4, seed=3, smoothing=SmoothingConfig("mweam"))
            logs.append(T.fit(m, pairs, vs, vt, cfg, valid_pairs=pairs[:3]).log)
        assert logs[0] == logs[1] and len(logs[0]) == 2 * 3 + 2

    def test_memorises_small_corpus(self):
        pairs = toy_pairs()
        m, vs, vt = small_model(pairs)
        cfg = T.TrainConfig(epochs=500, max_steps=500, batch_size=10, warmup=50, max_lr=1e-2, label_smoothing=0.0,
                            smoothing=SmoothingConfig("teacher_forcing"))
        ces = []
        T.fit(m, pairs, vs, vt, cfg, on_record=lambda line: ces.append(float(line.split("ce=")[1].split()[0])))
        assert min(ces) < 0.1
        hyps = translate(m, [vs.encode(s) for s, _ in pairs[:1]])
        assert vt.decode(hyps[0]) == pairs[0][1]

    def test_divergence_aborts(self, monkeypatch):
        pairs = toy_pairs()
        m, vs, vt = small_model(pairs, d=8)
        calls = iter(range(10**6))
        real = T.forward_loss

        def exploding(*args, **kwargs):
            out = real(*args, **kwargs)
            k = next(calls)
            if k == 0:
                return out
            return LossOutput(ad.shift(out.ce, 1e3), out.kl, out.tokens)

        monkeypatch.setattr(T, "forward_loss", exploding)
        with pytest.raises(DivergenceError):
            T.fit(m, pairs, vs, vt, T.TrainConfig(epochs=200, batch_size=10))
        assert next(calls) == 101

    def test_nonfinite_gradient_skipped(self, monkeypatch):
        pairs = toy_pairs()
        m, vs, vt = small_model(pairs, d=8)
        real = T.adam_step
        seen = []

        def poisoned(state, params, grads, lr):
            if not seen:
                seen.append(1)
                grads = {k: np.full_like(g, np.nan) if g is not None else g for k, g in grads.items()}
            return real(state, params, grads, lr)

        monkeypatch.setattr(T, "adam_step", poisoned)
        res = T.fit(m, pairs, vs, vt, T.TrainConfig(epochs=1, batch_size=5))
        assert res.skipped == 1 and res.final_step == 1
        assert res.log[0] == "step=1 skipped=nonfinite_grad"

    def test_empty_corpus(self):
        m, vs, vt = small_model(toy_pairs())
        with pytest.raises(ConfigurationError):
            T.fit(m, [], vs, vt, T.TrainConfig())

    def test_streams_are_named_and_stable(self):
        a = T.streams(1, "x", "y")
        b = T.streams(1, "y")
        assert a["y"].random() == b["y"].random()
        assert T.streams(1, "x")["x"].random() != T.streams(1, "y")["y"].random()
