"""Fold planning, the training loop, checkpoints, and cross-validation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robomal import models
from robomal.featurize import PAD_TOKEN, SEQUENCE_LENGTH, TokenSequence
from robomal.numcore import AdamState, adam_step, evaluate, gradients
from robomal.trainer import (
    BATCH_SIZES, DESK_MAX_STEPS, PAPER_MAX_STEPS, WEIGHT_DECAY, Checkpoint,
    CheckpointError, CheckpointVersionError, DegenerateSplitError, Fold,
    LabeledDataset, TrainConfig, crossval, evaluate_fold, load_checkpoint,
    make_folds, save_checkpoint, train)


def tiny_model(kind="lstm"):
    return models.ModelConfig.for_kind(
        kind, vocab_size=257, embedding_dim=3, hidden_units=4,
        cnn_channels=(3, 4, 4), cnn_kernel=3, pool_out=2,
        ann_dims=(SEQUENCE_LENGTH, 5, 5))


def make_sequence(rng, body_len, first_byte):
    tokens = np.full(SEQUENCE_LENGTH, PAD_TOKEN, dtype=np.int16)
    tokens[:body_len] = rng.integers(0, 256, size=body_len)
    tokens[0] = first_byte
    return TokenSequence(tokens=tokens, true_length=body_len)


def make_dataset(n, seed=0):
    """Separable toy data: the first byte encodes the class."""
    rng = np.random.default_rng(seed)
    seqs, labels = [], []
    for i in range(n):
        label = i % 2
        body = int(rng.integers(18, 40))
        seqs.append(make_sequence(rng, body, 0xF0 if label else 0x10))
        labels.append(label)
    return LabeledDataset(sequences=seqs, labels=np.array(labels))


class TestTrainConfig:
    def test_per_kind_defaults(self):
        for kind, bs in BATCH_SIZES.items():
            cfg = TrainConfig.for_kind(kind)
            assert cfg.batch_size == bs
            assert cfg.max_steps == DESK_MAX_STEPS
            assert cfg.lr == 0.001
            assert cfg.weight_decay == WEIGHT_DECAY[kind]
            assert cfg.folds == 10

    def test_paper_scale_steps(self):
        assert TrainConfig.for_kind("lstm", paper_steps=True).max_steps == 100_000
        assert TrainConfig.for_kind("gru", paper_steps=True).max_steps == 100_000
        assert TrainConfig.for_kind("cnn", paper_steps=True).max_steps == 50_000
        assert TrainConfig.for_kind("ann", paper_steps=True).max_steps == 50_000
        assert PAPER_MAX_STEPS["lstm"] == 100_000

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(kind="lstm", batch_size=36, max_steps=0)


class TestMakeFolds:
    def test_each_sample_once_when_k_equals_n(self):
        plan = make_folds(10, 10, seed=0)
        assert all(len(f.test_indices) == 1 for f in plan.folds)

    def test_450_by_10(self):
        plan = make_folds(450, 10, seed=0)
        assert all(len(f.test_indices) == 45 for f in plan.folds)
        assert all(len(f.train_indices) == 405 for f in plan.folds)

    def test_deterministic(self):
        a = make_folds(37, 5, seed=9)
        b = make_folds(37, 5, seed=9)
        for fa, fb in zip(a.folds, b.folds):
            np.testing.assert_array_equal(fa.test_indices, fb.test_indices)
            np.testing.assert_array_equal(fa.train_indices, fb.train_indices)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            make_folds(5, 6, seed=0)

    @given(st.integers(2, 12), st.integers(2, 80), st.integers(0, 2**20))
    @settings(max_examples=200)
    def test_partition_properties(self, k, extra, seed):
        n = k + extra
        plan = make_folds(n, k, seed)
        all_test = np.concatenate([f.test_indices for f in plan.folds])
        assert len(all_test) == n
        assert len(np.unique(all_test)) == n  # disjoint and covering
        sizes = [len(f.test_indices) for f in plan.folds]
        assert max(sizes) - min(sizes) <= 1
        for f in plan.folds:
            assert len(np.intersect1d(f.test_indices, f.train_indices)) == 0
            assert len(f.test_indices) + len(f.train_indices) == n


class TestTrain:
    def test_single_step_matches_manual_update(self):
        ds = make_dataset(12)
        fold = Fold(train_indices=np.arange(10), test_indices=np.arange(10, 12))
        mc = tiny_model()
        cfg = TrainConfig(kind="lstm", batch_size=4, max_steps=1, seed=3, folds=2)
        ckpt = train(cfg, ds, fold, model_config=mc)
        assert ckpt.steps == 1
        assert len(ckpt.loss_curve) == 1

        params = models.init_params(mc, seed=3)
        order = np.random.default_rng((3, 0x5EED)).permutation(fold.train_indices)
        idx = order[:4]
        tokens, lengths = ds.stacked()
        mg = models.build_graph(mc, with_loss=True)
        bindings = models.batch_bindings(mc, tokens[idx], lengths[idx])
        bindings.update(params)
        bindings["y"] = ds.labels[idx].astype(np.float64)
        evaluate(mg.graph, bindings, mode="train", dropout_seed=(3, 0))
        adam_step(params, gradients(mg.graph), AdamState(lr=cfg.lr))
        for name, arr in params.items():
            assert arr.tobytes() == ckpt.params[name].tobytes(), name

    def test_deterministic_checkpoints(self):
        ds = make_dataset(14)
        fold = Fold(train_indices=np.arange(12), test_indices=np.arange(12, 14))
        cfg = TrainConfig(kind="gru", batch_size=6, max_steps=12, seed=5, folds=2)
        a = train(cfg, ds, fold, model_config=tiny_model("gru"))
        b = train(cfg, ds, fold, model_config=tiny_model("gru"))
        assert a.loss_curve.tobytes() == b.loss_curve.tobytes()
        for name in a.params:
            assert a.params[name].tobytes() == b.params[name].tobytes()

    def test_single_class_split_rejected(self):
        ds = make_dataset(10)
        even = np.array([0, 2, 4, 6])
        with pytest.raises(DegenerateSplitError):
            train(TrainConfig(kind="lstm", batch_size=2, max_steps=1, folds=2),
                  ds, Fold(train_indices=even, test_indices=np.array([1])),
                  model_config=tiny_model())

    def test_loss_curve_decimation(self):
        ds = make_dataset(12)
        fold = Fold(train_indices=np.arange(10), test_indices=np.arange(10, 12))
        cfg = TrainConfig(kind="lstm", batch_size=5, max_steps=25, seed=0, folds=2)
        ckpt = train(cfg, ds, fold, model_config=tiny_model())
        # steps 0, 10, 20 recorded plus the final step 24
        assert len(ckpt.loss_curve) == 4
        assert ckpt.final_loss == ckpt.loss_curve[-1]

    def test_training_reduces_loss_on_separable_data(self):
        ds = make_dataset(20)
        fold = Fold(train_indices=np.arange(16), test_indices=np.arange(16, 20))
        cfg = TrainConfig(kind="lstm", batch_size=8, max_steps=600, seed=1, folds=2)
        ckpt = train(cfg, ds, fold, model_config=tiny_model())
        assert ckpt.loss_curve[-1] < 0.5 * ckpt.loss_curve[0]


class TestEvaluateFold:
    def test_zero_logit_predicts_malware_at_threshold(self):
        mc = tiny_model()
        params = {k: np.zeros_like(v) for k, v in models.init_params(mc, 0).items()}
        ckpt = Checkpoint(version=1, model_config=mc, params=params, seed=0,
                          steps=1, final_loss=0.7, loss_curve=np.array([0.7]))
        ds = make_dataset(6)
        result = evaluate_fold(ckpt, ds, Fold(train_indices=np.arange(3),
                                              test_indices=np.arange(3, 6)))
        np.testing.assert_array_equal(result.probabilities, [0.5, 0.5, 0.5])
        np.testing.assert_array_equal(result.predicted, [1, 1, 1])

    def test_empty_test_split(self):
        mc = tiny_model()
        ckpt = Checkpoint(version=1, model_config=mc,
                          params=models.init_params(mc, 0), seed=0, steps=1,
                          final_loss=0.7, loss_curve=np.array([0.7]))
        result = evaluate_fold(ckpt, make_dataset(4),
                               Fold(train_indices=np.arange(4), test_indices=np.array([], dtype=int)))
        assert len(result.probabilities) == 0

    def test_probabilities_in_unit_interval(self):
        ds = make_dataset(10)
        fold = Fold(train_indices=np.arange(8), test_indices=np.arange(8, 10))
        cfg = TrainConfig(kind="lstm", batch_size=4, max_steps=10, folds=2)
        ckpt = train(cfg, ds, fold, model_config=tiny_model())
        result = evaluate_fold(ckpt, ds, fold)
        assert np.all(result.probabilities >= 0.0)
        assert np.all(result.probabilities <= 1.0)
        assert result.rows()[0][0] == result.probabilities[0]


class TestCheckpointFiles:
    def _trained(self, tmp_path):
        ds = make_dataset(10)
        fold = Fold(train_indices=np.arange(8), test_indices=np.arange(8, 10))
        cfg = TrainConfig(kind="lstm", batch_size=4, max_steps=5, seed=2, folds=2)
        return train(cfg, ds, fold, model_config=tiny_model()), ds, fold

    def test_roundtrip_preserves_logits(self, tmp_path):
        ckpt, ds, fold = self._trained(tmp_path)
        path = tmp_path / "model.rmck"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        before = evaluate_fold(ckpt, ds, fold)
        after = evaluate_fold(loaded, ds, fold)
        assert before.probabilities.tobytes() == after.probabilities.tobytes()
        assert loaded.model_config == ckpt.model_config
        assert loaded.seed == ckpt.seed
        assert loaded.steps == ckpt.steps
        np.testing.assert_array_equal(loaded.loss_curve, ckpt.loss_curve)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.rmck"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_version(self, tmp_path):
        ckpt, _, _ = self._trained(tmp_path)
        path = tmp_path / "model.rmck"
        save_checkpoint(ckpt, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_truncations_raise_cleanly(self, tmp_path):
        ckpt, _, _ = self._trained(tmp_path)
        path = tmp_path / "model.rmck"
        save_checkpoint(ckpt, path)
        raw = path.read_bytes()
        cut_path = tmp_path / "cut.rmck"
        for cut in range(0, len(raw), max(1, len(raw) // 40)):
            cut_path.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(cut_path)

    def test_trailing_garbage_rejected(self, tmp_path):
        ckpt, _, _ = self._trained(tmp_path)
        path = tmp_path / "model.rmck"
        save_checkpoint(ckpt, path)
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestCrossval:
    def test_parallel_matches_sequential(self):
        ds = make_dataset(16)
        cfg = TrainConfig(kind="lstm", batch_size=4, max_steps=8, seed=7, folds=4)
        seq = crossval(cfg, ds, model_config=tiny_model(), workers=1)
        par = crossval(cfg, ds, model_config=tiny_model(), workers=2)
        for a, b in zip(seq.per_fold, par.per_fold):
            assert a.as_dict() == b.as_dict()
        for ca, cb in zip(seq.checkpoints, par.checkpoints):
            for name in ca.params:
                assert ca.params[name].tobytes() == cb.params[name].tobytes()

    def test_fold_plan_independent_of_model_kind(self):
        ds = make_dataset(16)
        a = crossval(TrainConfig(kind="lstm", batch_size=4, max_steps=4, seed=3, folds=4),
                     ds, model_config=tiny_model("lstm"))
        b = crossval(TrainConfig(kind="ann", batch_size=4, max_steps=4, seed=3, folds=4),
                     ds, model_config=tiny_model("ann"))
        assert a.fold_sizes == b.fold_sizes

    def test_too_small_dataset_rejected(self):
        with pytest.raises(ValueError):
            crossval(TrainConfig(kind="lstm", batch_size=4, max_steps=4, folds=10),
                     make_dataset(6), model_config=tiny_model())

    def test_per_fold_seeds_differ(self):
        ds = make_dataset(16)
        cfg = TrainConfig(kind="lstm", batch_size=4, max_steps=4, seed=11, folds=4)
        result = crossval(cfg, ds, model_config=tiny_model())
        seeds = [c.seed for c in result.checkpoints]
        assert seeds == [11, 12, 13, 14]
