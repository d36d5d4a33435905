import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aunet.data import load_dataset
from aunet.model import ModelConfig, ParamStore, load_checkpoint
from aunet.synth import SynthConfig, generate_dataset
from aunet.train import (
    STATUS_COMPLETED,
    STATUS_DIVERGED,
    TrainConfig,
    TrainingError,
    assemble_sequence,
    fit_model,
    make_velocity,
    sgd_momentum_step,
    train_run,
    train_split,
)

TINY_MODEL = dict(image_size=(16, 16), backbone=((4, 3, 2), (6, 3, 2)), roi_conv_layers=1,
                  roi_channels=4, d_roi=4, global_feature_len=16, lstm_hidden=6, sequence_len=6)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_ds")
    config = SynthConfig(subjects=3, sessions=1, frames=30, image_size=(16, 16))
    manifest = generate_dataset(config, seed=21, out_dir=out)
    return load_dataset(manifest)


class TestSgdStep:
    def _store(self, value):
        store = ParamStore()
        store.add("p", np.array([value]))
        return store

    def test_zero_gradient_keeps_params(self):
        store = self._store(1.0)
        store["p"].grad = np.zeros(1)
        v = make_velocity(store)
        sgd_momentum_step(store, v, lr=0.1, momentum=0.9)
        assert store["p"].data[0] == 1.0

    def test_two_steps_with_momentum(self):
        # v = 0.9 v - 0.1 g: first step v=-0.1 p=0.9; second v=-0.19 p=0.71
        store = self._store(1.0)
        v = make_velocity(store)
        store["p"].grad = np.ones(1)
        sgd_momentum_step(store, v, lr=0.1, momentum=0.9)
        assert store["p"].data[0] == pytest.approx(0.9, abs=1e-15)
        store["p"].grad = np.ones(1)
        sgd_momentum_step(store, v, lr=0.1, momentum=0.9)
        assert store["p"].data[0] == pytest.approx(0.71, abs=1e-15)

    def test_nonfinite_gradient_names_parameter(self):
        store = self._store(1.0)
        v = make_velocity(store)
        store["p"].grad = np.array([np.nan])
        with pytest.raises(TrainingError, match="p"):
            sgd_momentum_step(store, v, lr=0.1, momentum=0.9)

    def test_frozen_parameters_untouched(self):
        store = ParamStore()
        store.add("a", np.ones(2))
        store.add("b", np.ones(2), trainable=False)
        v = make_velocity(store)
        assert "b" not in v
        store["a"].grad = np.ones(2)
        store["b"].grad = np.ones(2)
        sgd_momentum_step(store, v, lr=0.5, momentum=0.0)
        np.testing.assert_array_equal(store["b"].data, np.ones(2))
        np.testing.assert_array_equal(store["a"].data, np.full(2, 0.5))

    @settings(max_examples=60, deadline=None)
    @given(lr=st.floats(1e-4, 1.0), g=st.floats(-5, 5), p=st.floats(-5, 5))
    def test_zero_momentum_is_vanilla_sgd(self, lr, g, p):
        store = ParamStore()
        store.add("p", np.array([p]))
        v = make_velocity(store)
        store["p"].grad = np.array([g])
        sgd_momentum_step(store, v, lr=lr, momentum=0.0)
        assert store["p"].data[0] == pytest.approx(p - lr * g, rel=1e-12, abs=1e-15)


class TestSequenceAssembly:
    def test_exactly_enough_priors(self, dataset):
        session = dataset.sessions_of(range(len(dataset)))[0]
        anchor = session[23] if len(session) > 23 else session[-1]
        seq = assemble_sequence(dataset, anchor, 24, np.random.default_rng(0))
        assert len(seq) == 24
        assert seq[-1] == anchor
        # with exactly 23 priors all of them appear, sorted
        priors = dataset.priors_of(anchor)
        if len(priors) == 23:
            assert seq[:23] == priors

    def test_padding_short_history(self, dataset):
        session = dataset.sessions_of(range(len(dataset)))[0]
        anchor = session[5]
        seq = assemble_sequence(dataset, anchor, 24, np.random.default_rng(0))
        assert len(seq) == 24
        assert seq[-1] == anchor
        assert seq[:19] == [session[0]] * 19
        assert seq[19:23] == session[1:5]

    def test_deterministic_sampling(self, dataset):
        session = dataset.sessions_of(range(len(dataset)))[0]
        anchor = session[-1]
        a = assemble_sequence(dataset, anchor, 10, np.random.default_rng(7))
        b = assemble_sequence(dataset, anchor, 10, np.random.default_rng(7))
        assert a == b

    def test_sorted_ascending(self, dataset):
        session = dataset.sessions_of(range(len(dataset)))[0]
        seq = assemble_sequence(dataset, session[-1], 10, np.random.default_rng(3))
        ids = [dataset.frames[i].frame_id for i in seq]
        assert ids == sorted(ids)

    def test_anchor_without_priors_rejected(self, dataset):
        session = dataset.sessions_of(range(len(dataset)))[0]
        with pytest.raises(TrainingError, match="no prior"):
            assemble_sequence(dataset, session[0], 24, np.random.default_rng(0))


class TestFitModel:
    def test_loss_decreases_static(self, dataset):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi", max_iterations=60, lr=0.001, seed=0)
        res = fit_model(tc, mc, dataset, range(len(dataset)))
        assert res.status == STATUS_COMPLETED
        first = np.mean([r[1] for r in res.log_rows[:10]])
        last = np.mean([r[1] for r in res.log_rows[-10:]])
        assert last < first

    def test_single_batch_overfit(self, dataset):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi", max_iterations=250, lr=0.0005, seed=0,
                         fixed_batch=True, batch_size=4, lr_patience=10 ** 9)
        res = fit_model(tc, mc, dataset, range(len(dataset)))
        assert res.log_rows[-1][1] < 0.01

    def test_determinism(self, dataset):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi", max_iterations=15, lr=0.001, seed=3)
        a = fit_model(tc, mc, dataset, range(len(dataset)))
        b = fit_model(tc, mc, dataset, range(len(dataset)))
        assert a.log_rows == b.log_rows
        for name in a.store.names():
            np.testing.assert_array_equal(a.store[name].data, b.store[name].data)

    def test_freeze_stages_bit_identical(self, dataset):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi", max_iterations=25, lr=0.002, seed=0, freeze_stages=1)
        from aunet.model import init_params

        before = init_params(mc, "roi", np.random.default_rng(0))
        res = fit_model(tc, mc, dataset, range(len(dataset)))
        for name in res.store.names():
            if name.startswith("backbone.stage0."):
                np.testing.assert_array_equal(res.store[name].data, before[name].data)
            elif name.startswith("backbone.stage1."):
                assert not np.array_equal(res.store[name].data, before[name].data)

    def test_temporal_mode_runs(self, dataset):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi_lstm2", max_iterations=4, lr=0.001, seed=0,
                         sequence_len=6, sequence_batch=2)
        res = fit_model(tc, mc, dataset, range(len(dataset)))
        assert res.status == STATUS_COMPLETED
        assert len(res.log_rows) == 4

    def test_single_au_balanced_batches(self, dataset):
        # every sampled batch must hold equal positive and negative counts
        mc = ModelConfig(**TINY_MODEL)
        labels = dataset.label_matrix()
        rng = np.random.default_rng(0)
        train_indices = list(range(len(dataset)))
        col = 0
        pos_pool = [i for i in train_indices if labels[i, col] == 1]
        neg_pool = [i for i in train_indices if labels[i, col] == 0]
        assert pos_pool and neg_pool
        for _ in range(20):
            half = 4
            pos = rng.choice(len(pos_pool), size=half, replace=True)
            neg = rng.choice(len(neg_pool), size=half, replace=True)
            idx = [pos_pool[i] for i in pos] + [neg_pool[i] for i in neg]
            batch_labels = labels[idx, col]
            assert batch_labels.sum() == half

    def test_single_au_mode_trains_all_heads(self, dataset):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="single_au", max_iterations=3, lr=0.001, seed=0)
        res = fit_model(tc, mc, dataset, range(len(dataset)))
        assert res.status == STATUS_COMPLETED
        heads = [n for n in res.store.names() if n.endswith("head.w")]
        assert len(heads) == dataset.num_aus

    def test_divergence_aborts(self, dataset):
        # lr large enough to overflow parameters to inf, making the next
        # forward pass non-finite
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi", max_iterations=200, lr=1e200, seed=0)
        with np.errstate(all="ignore"):
            res = fit_model(tc, mc, dataset, range(len(dataset)))
        assert res.status == STATUS_DIVERGED
        assert res.iterations_run < 200


class TestTrainRun:
    def test_writes_artifacts(self, dataset, tmp_path):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi", max_iterations=8, lr=0.001, seed=0)
        summary = train_run(tc, mc, dataset, tmp_path / "run", fold=0)
        assert summary["status"] == STATUS_COMPLETED
        for name in ("checkpoint.bin", "loss.log", "run.json", "timing.txt"):
            assert (tmp_path / "run" / name).exists()
        lines = (tmp_path / "run" / "loss.log").read_text().splitlines()
        assert len(lines) == 8
        it, loss, lr = lines[0].split()
        assert it == "1"
        float(loss), float(lr)

    def test_byte_identical_reruns(self, dataset, tmp_path):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi", max_iterations=6, lr=0.001, seed=5)
        train_run(tc, mc, dataset, tmp_path / "a", fold=0)
        train_run(tc, mc, dataset, tmp_path / "b", fold=0)
        for name in ("checkpoint.bin", "loss.log", "run.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_checkpoint_reloads(self, dataset, tmp_path):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi", max_iterations=4, lr=0.001, seed=0)
        train_run(tc, mc, dataset, tmp_path / "run", fold=0)
        store, config, mode, iteration, _ = load_checkpoint(tmp_path / "run" / "checkpoint.bin")
        assert mode == "roi"
        assert iteration == 4
        assert config == mc

    def test_periodic_checkpoints(self, dataset, tmp_path):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="fvgg", max_iterations=6, lr=0.001, seed=0, checkpoint_every=2)
        train_run(tc, mc, dataset, tmp_path / "run", fold=0)
        for it in (2, 4, 6):
            assert (tmp_path / "run" / f"checkpoint_iter{it}.bin").exists()

    def test_divergence_keeps_last_finite_params(self, dataset):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi", max_iterations=50, lr=1e200, seed=0)
        with np.errstate(all="ignore"):
            res = fit_model(tc, mc, dataset, range(len(dataset)))
        assert res.status == STATUS_DIVERGED
        for name in res.store.names():
            assert np.isfinite(res.store[name].data).all(), name

    def test_fold_split_subject_disjoint(self, dataset):
        train_idx, test_idx = train_split(dataset, 0, 3, 0)
        train_subjects = {dataset.frames[i].subject for i in train_idx}
        test_subjects = {dataset.frames[i].subject for i in test_idx}
        assert not (train_subjects & test_subjects)
        assert len(train_idx) + len(test_idx) == len(dataset)


class TestTransfer:
    def test_transfer_static_and_temporal(self, dataset, tmp_path):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="roi", max_iterations=4, lr=0.001, seed=0)
        train_run(tc, mc, dataset, tmp_path / "src", fold=0)
        src = str(tmp_path / "src" / "checkpoint.bin")
        for temporal in (False, True):
            cfg = TrainConfig(mode="transfer", max_iterations=5, lr=0.01, seed=0,
                              source_checkpoint=src, transfer_temporal=temporal,
                              sequence_len=6)
            res = fit_model(cfg, mc, dataset, range(len(dataset)))
            assert res.status == STATUS_COMPLETED
            assert "transfer_head.w" in res.store
            assert res.extra["transfer_temporal"] is temporal
            if temporal:
                assert "transfer_lstm.layer0.Wf" in res.store
            # source weights are frozen in the merged store
            assert not res.store.is_trainable("backbone.stage0.w")

    def test_transfer_requires_source(self):
        with pytest.raises(ValueError, match="source_checkpoint"):
            TrainConfig(mode="transfer")

    def test_transfer_rejects_fvgg_source(self, dataset, tmp_path):
        mc = ModelConfig(**TINY_MODEL)
        tc = TrainConfig(mode="fvgg", max_iterations=3, lr=0.001, seed=0)
        train_run(tc, mc, dataset, tmp_path / "src", fold=0)
        cfg = TrainConfig(mode="transfer", max_iterations=3, lr=0.01, seed=0,
                          source_checkpoint=str(tmp_path / "src" / "checkpoint.bin"))
        with pytest.raises(TrainingError, match="global-feature"):
            fit_model(cfg, mc, dataset, range(len(dataset)))
