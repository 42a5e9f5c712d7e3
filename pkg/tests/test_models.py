"""Model assembly: shapes, reference forward passes, gradients, trainability."""

import math

import numpy as np
import pytest

from robomal import models, numcore
from robomal.featurize import PAD_TOKEN, SEQUENCE_LENGTH, featurize
from robomal.numcore import AdamState, adam_step, evaluate, gradients

from fd_oracle import central_difference, assert_gradients_match


def tiny_config(kind):
    return models.ModelConfig.for_kind(
        kind, vocab_size=9, embedding_dim=3, hidden_units=4,
        cnn_channels=(3, 4, 4), cnn_kernel=3, pool_out=2, ann_dims=(8, 5, 5))


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestConfig:
    def test_kind_defaults(self):
        assert models.ModelConfig.for_kind("lstm").dropout == 0.0
        assert models.ModelConfig.for_kind("gru").dropout == 0.30
        assert models.ModelConfig.for_kind("cnn").dropout == 0.20
        assert models.ModelConfig.for_kind("ann").dropout == 0.0

    def test_pooled_dims(self):
        assert models.ModelConfig.for_kind("lstm").pooled_dim == 16
        assert models.ModelConfig.for_kind("gru").pooled_dim == 16
        assert models.ModelConfig.for_kind("cnn").pooled_dim == 480
        assert models.ModelConfig.for_kind("ann").pooled_dim == 200

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            models.ModelConfig(kind="transformer")

    def test_odd_lstm_hidden_rejected(self):
        with pytest.raises(ValueError):
            models.ModelConfig(kind="lstm", hidden_units=15)


class TestInitParams:
    def test_deterministic(self):
        cfg = models.ModelConfig.for_kind("lstm")
        a = models.init_params(cfg, seed=5)
        b = models.init_params(cfg, seed=5)
        assert set(a) == set(b)
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_seed_changes_weights(self):
        cfg = models.ModelConfig.for_kind("gru")
        a = models.init_params(cfg, seed=1)
        b = models.init_params(cfg, seed=2)
        assert not np.array_equal(a["gru_wx"], b["gru_wx"])

    def test_lstm_embedding_table_shape(self):
        params = models.init_params(models.ModelConfig.for_kind("lstm"), 0)
        assert params["embedding"].shape == (257, 16)

    def test_cnn_dense_input_is_480(self):
        params = models.init_params(models.ModelConfig.for_kind("cnn"), 0)
        assert params["dense_w"].shape == (480, 1)

    def test_biases_zero_and_bn_identity(self):
        params = models.init_params(models.ModelConfig.for_kind("cnn"), 3)
        assert np.all(params["dense_b"] == 0.0)
        assert np.all(params["bn1_shift"] == 0.0)
        assert np.all(params["bn1_scale"] == 1.0)
        assert np.all(params["bn2_mean"] == 0.0)
        assert np.all(params["bn2_var"] == 1.0)
        lstm = models.init_params(models.ModelConfig.for_kind("lstm"), 3)
        assert np.all(lstm["lstm_b_fwd"] == 0.0)
        assert not np.all(lstm["lstm_wx_bwd"] == 0.0)

    def test_all_finite(self):
        for kind in models.MODEL_KINDS:
            params = models.init_params(models.ModelConfig.for_kind(kind), 11)
            for arr in params.values():
                assert np.all(np.isfinite(arr))


def _rand_batch(rng, cfg, batch, t_max):
    tokens = rng.integers(0, cfg.vocab_size, size=(batch, t_max))
    lengths = rng.integers(1, t_max + 1, size=batch)
    lengths[0] = t_max
    return tokens, lengths


class TestForward:
    def test_zero_weight_lstm_gives_zero_logit(self):
        cfg = tiny_config("lstm")
        params = {k: np.zeros_like(v) for k, v in models.init_params(cfg, 0).items()}
        rng = np.random.default_rng(0)
        tokens, lengths = _rand_batch(rng, cfg, 3, 8)
        mg = models.build_graph(cfg)
        evaluate(mg.graph, {**params, **models.batch_bindings(cfg, tokens, lengths)})
        np.testing.assert_array_equal(mg.graph.value(mg.logit_node), np.zeros(3))

    def test_eval_forward_deterministic(self):
        for kind in models.MODEL_KINDS:
            cfg = tiny_config(kind)
            params = models.init_params(cfg, 1)
            rng = np.random.default_rng(2)
            tokens, lengths = _rand_batch(rng, cfg, 2, 8)
            bindings = models.batch_bindings(cfg, tokens, lengths)
            mg = models.build_graph(cfg)
            a = evaluate(mg.graph, {**params, **bindings})
            b = evaluate(mg.graph, {**params, **bindings})
            assert a.tobytes() == b.tobytes(), kind

    def test_single_timestep_lstm_matches_gate_equations(self):
        # straight-line recomputation of the cell update on the same weights
        cfg = tiny_config("lstm")
        h = cfg.hidden_units // 2
        params = models.init_params(cfg, 7)
        tokens = np.array([[4], [6]])
        lengths = np.array([1, 1])
        mg = models.build_graph(cfg)
        evaluate(mg.graph, {**params, **models.batch_bindings(cfg, tokens, lengths)})
        got = mg.graph.value(mg.logit_node)

        for b_i, tok in enumerate([4, 6]):
            x = params["embedding"][tok]
            halves = []
            for d in ("fwd", "bwd"):
                pre = x @ params[f"lstm_wx_{d}"] + params[f"lstm_b_{d}"]
                i, f, o = _sig(pre[:h]), _sig(pre[h:2 * h]), _sig(pre[2 * h:3 * h])
                g = np.tanh(pre[3 * h:])
                c = i * g
                halves.append(o * np.tanh(c))
            m_prime = np.concatenate(halves)
            want = m_prime @ params["dense_w"][:, 0] + params["dense_b"][0]
            assert abs(got[b_i] - want) < 1e-12

    def test_lstm_logit_invariant_to_pad_content(self):
        cfg = tiny_config("lstm")
        params = models.init_params(cfg, 3)
        rng = np.random.default_rng(4)
        tokens, lengths = _rand_batch(rng, cfg, 4, 10)
        out1 = _logits(cfg, params, tokens, lengths)
        mutated = tokens.copy()
        for b, n in enumerate(lengths):
            mutated[b, n:] = rng.integers(0, cfg.vocab_size, size=10 - n)
        out2 = _logits(cfg, params, mutated, lengths)
        np.testing.assert_array_equal(out1, out2)

    def test_lstm_direction_symmetry(self):
        # reversed sequences with swapped direction weights and swapped dense
        # halves produce the identical logit
        cfg = tiny_config("lstm")
        h = cfg.hidden_units // 2
        params = models.init_params(cfg, 9)
        rng = np.random.default_rng(5)
        tokens = rng.integers(0, cfg.vocab_size, size=(3, 8))
        lengths = np.full(3, 8)
        swapped = dict(params)
        for a, b in (("lstm_wx_fwd", "lstm_wx_bwd"), ("lstm_wh_fwd", "lstm_wh_bwd"),
                     ("lstm_b_fwd", "lstm_b_bwd")):
            swapped[a], swapped[b] = params[b], params[a]
        dw = params["dense_w"].copy()
        swapped["dense_w"] = np.concatenate([dw[h:], dw[:h]])
        out = _logits(cfg, params, tokens, lengths)
        out_sw = _logits(cfg, swapped, tokens[:, ::-1], lengths)
        np.testing.assert_allclose(out_sw, out, rtol=1e-12, atol=1e-14)

    def test_cnn_pooled_dim_480_for_varied_lengths(self):
        cfg = models.ModelConfig.for_kind("cnn")
        params = models.init_params(cfg, 1)
        for payload_len in (1000, 1300, 2000):
            seqs = [featurize(bytes([i % 256 for i in range(payload_len)]))]
            out = models.forward(cfg, params, seqs)
            assert out.pooled.shape == (1, 480)

    def test_forward_output_shapes(self):
        rng = np.random.default_rng(8)
        for kind in models.MODEL_KINDS:
            cfg = models.ModelConfig.for_kind(kind)
            params = models.init_params(cfg, 2)
            seqs = [featurize(bytes(rng.integers(0, 256, size=1100, dtype=np.uint8)))
                    for _ in range(2)]
            out = models.forward(cfg, params, seqs)
            assert out.logits.shape == (2,)
            assert out.pooled.shape == (2, cfg.pooled_dim)
            assert np.all(np.isfinite(out.logits))


def _logits(cfg, params, tokens, lengths):
    mg = models.build_graph(cfg)
    evaluate(mg.graph, {**params, **models.batch_bindings(cfg, tokens, lengths)})
    return mg.graph.value(mg.logit_node).copy()


class TestLoss:
    def test_ln2_at_logit_zero(self):
        assert models.loss([0.0], [1.0]) == pytest.approx(math.log(2.0), rel=1e-12)
        assert models.loss([0.0], [0.0]) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_confident_correct_logit(self):
        assert models.loss([10.0], [1.0]) == pytest.approx(4.539889921686465e-05, rel=1e-12)

    def test_batch_mean(self):
        assert models.loss([0.0, 0.0], [1.0, 0.0]) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_label_validation(self):
        with pytest.raises(ValueError):
            models.loss([0.0], [0.3])
        with pytest.raises(ValueError):
            models.loss([0.0, 1.0], [1.0])


class TestFullModelGradients:
    @pytest.mark.parametrize("kind", models.MODEL_KINDS)
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_gradient_matches_finite_differences(self, kind, seed):
        cfg = tiny_config(kind)
        params = models.init_params(cfg, seed + 100)
        rng = np.random.default_rng(seed)
        tokens, lengths = _rand_batch(rng, cfg, 2, 8)
        labels = rng.integers(0, 2, size=2).astype(np.float64)
        mg = models.build_graph(cfg, with_loss=True)
        bindings = {**params, **models.batch_bindings(cfg, tokens, lengths), "y": labels}
        evaluate(mg.graph, bindings, mode="train", dropout_seed=(seed, 0))
        analytic = gradients(mg.graph)
        trainable = {k: v for k, v in params.items() if models.is_trainable(k)}
        numeric = central_difference(
            lambda: evaluate(mg.graph, bindings, mode="train", dropout_seed=(seed, 0)),
            trainable)
        assert_gradients_match(analytic, numeric, rtol=1e-5, atol=1e-8)


class TestTrainability:
    @pytest.mark.parametrize("kind", models.MODEL_KINDS)
    def test_hundred_steps_separate_toy_set(self, kind):
        # 10 samples whose first token decides the class: loss must fall
        # below 0.1 within 100 full-batch Adam steps
        cfg = tiny_config(kind)
        rng = np.random.default_rng(42)
        tokens = rng.integers(0, cfg.vocab_size, size=(10, 8))
        labels = np.array([1.0] * 5 + [0.0] * 5)
        tokens[:5, 0] = 1
        tokens[5:, 0] = 7
        lengths = np.full(10, 8)
        params = models.init_params(cfg, 0)
        mg = models.build_graph(cfg, with_loss=True)
        bindings = models.batch_bindings(cfg, tokens, lengths)
        state = AdamState(lr=0.02)
        for step in range(100):
            evaluate(mg.graph, {**params, **bindings, "y": labels},
                     mode="train", dropout_seed=(0, step))
            grads = gradients(mg.graph)
            adam_step(params, grads, state)
        # fit measured without dropout noise
        final = evaluate(mg.graph, {**params, **bindings, "y": labels}, mode="eval")
        assert float(final) < 0.1, f"{kind} failed to fit toy set: loss {float(final):.4f}"
