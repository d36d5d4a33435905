import json

import numpy as np
import pytest

from aunet.data import load_dataset
from aunet.evaluate import (
    _session_windows,
    evaluate_checkpoint,
    metrics_table,
    predict_probabilities,
    write_metrics,
)
from aunet.model import ModelConfig
from aunet.synth import SynthConfig, generate_dataset
from aunet.train import TrainConfig, train_run, train_split

TINY_MODEL = dict(image_size=(16, 16), backbone=((4, 3, 2), (6, 3, 2)), roi_conv_layers=1,
                  roi_channels=4, d_roi=4, global_feature_len=16, lstm_hidden=6, sequence_len=6)


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    out = tmp_path_factory.mktemp("eval_ds")
    config = SynthConfig(subjects=3, sessions=1, frames=26, image_size=(16, 16))
    manifest = generate_dataset(config, seed=31, out_dir=out)
    dataset = load_dataset(manifest)
    mc = ModelConfig(**TINY_MODEL)
    runs = {}
    for mode in ("fvgg", "roi", "roi_lstm1", "single_au"):
        iters = 3 if mode == "single_au" else 5
        tc = TrainConfig(mode=mode, max_iterations=iters, lr=0.001, seed=0, sequence_len=6)
        run_dir = out / f"run_{mode}"
        train_run(tc, mc, dataset, run_dir, fold=0)
        runs[mode] = str(run_dir / "checkpoint.bin")
    return dataset, mc, runs


class TestSessionWindows:
    def test_exact_multiple(self):
        windows = _session_windows(list(range(12)), 6)
        assert [w[0] for w in windows] == [list(range(6)), list(range(6, 12))]
        assert all(w[1] == 0 for w in windows)

    def test_short_tail_padded_in_front(self):
        windows = _session_windows(list(range(8)), 6)
        assert windows[0][0] == [0, 1, 2, 3, 4, 5]
        tail, kept_from, start = windows[1]
        assert tail == [6, 6, 6, 6, 6, 7]
        assert kept_from == 4
        assert start == 6

    def test_session_shorter_than_window(self):
        windows = _session_windows([3, 4], 6)
        win, kept_from, _ = windows[0]
        assert win == [3, 3, 3, 3, 3, 4]
        assert kept_from == 4

    def test_every_frame_scored_once(self):
        for n in (5, 6, 7, 12, 13, 25):
            covered = []
            for win, kept_from, _ in _session_windows(list(range(n)), 6):
                covered.extend(win[kept_from:])
            assert covered == list(range(n))


class TestPredictions:
    def test_all_modes_produce_full_matrices(self, setup):
        dataset, mc, runs = setup
        _, test_idx = train_split(dataset, 0, 3, 0)
        from aunet.model import load_checkpoint

        for mode, ckpt in runs.items():
            store, config, m, _, header = load_checkpoint(ckpt)
            probs = predict_probabilities(store, config, m, dataset, test_idx,
                                          extra=header.get("extra"))
            assert probs.shape == (len(test_idx), dataset.num_aus)
            assert np.isfinite(probs).all()
            assert (probs > 0).all() and (probs < 1).all()

    def test_temporal_scores_match_manual_windows(self, setup):
        dataset, mc, runs = setup
        _, test_idx = train_split(dataset, 0, 3, 0)
        from aunet.model import load_checkpoint, sequence_probs
        from aunet.tensor import Tensor
        from aunet import geometry

        store, config, mode, _, _ = load_checkpoint(runs["roi_lstm1"])
        probs = predict_probabilities(store, config, mode, dataset, test_idx)
        # recompute the first full window by hand
        session = dataset.sessions_of(test_idx)[0]
        win = session[:config.sequence_len]
        images = dataset.images(win).reshape(1, config.sequence_len, 1, 16, 16)
        tops = dataset.window_tops(win, config.grid_size(), geometry.default_rules(),
                                   config.roi_window).reshape(1, config.sequence_len, 20, 2)
        manual = sequence_probs(store.detached(), config, 1, Tensor(images), tops).data[0]
        order = {idx: row for row, idx in enumerate(test_idx)}
        for step, frame_idx in enumerate(win):
            np.testing.assert_allclose(probs[order[frame_idx]], manual[step], atol=1e-12)


class TestEvaluateCheckpoint:
    def test_record_shape_and_table(self, setup):
        dataset, mc, runs = setup
        record = evaluate_checkpoint(runs["roi"], dataset, fold=0)
        assert record["mode"] == "roi"
        assert len(record["f1"]) == 12
        assert 0.0 <= record["average_f1"] <= 1.0
        table = metrics_table(record)
        lines = table.splitlines()
        assert len(lines) == 14  # header + 12 AUs + average
        assert lines[-1].startswith(" Avg")

    def test_threshold_affects_predictions(self, setup):
        dataset, mc, runs = setup
        low = evaluate_checkpoint(runs["roi"], dataset, fold=0, threshold=0.05)
        high = evaluate_checkpoint(runs["roi"], dataset, fold=0, threshold=0.95)
        assert low["f1"] != high["f1"]

    def test_write_metrics_round_trip(self, setup, tmp_path):
        dataset, mc, runs = setup
        record = evaluate_checkpoint(runs["fvgg"], dataset, fold=0)
        write_metrics(tmp_path, record)
        back = json.loads((tmp_path / "metrics.json").read_text())
        assert back["f1"] == record["f1"]
        assert (tmp_path / "metrics.txt").read_text().rstrip("\n") == metrics_table(record)

    def test_deterministic(self, setup):
        dataset, mc, runs = setup
        a = evaluate_checkpoint(runs["roi_lstm1"], dataset, fold=0)
        b = evaluate_checkpoint(runs["roi_lstm1"], dataset, fold=0)
        assert a == b
