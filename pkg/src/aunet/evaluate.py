"""Checkpoint evaluation: per-frame probabilities for every mode, per-AU F1
tables, and fold handling.

Recurrent checkpoints score sessions in consecutive non-overlapping
windows, so every timestep output contributes one per-frame prediction; a
session shorter than one window is front-padded with its first frame and
only the real frames keep predictions.
"""

from __future__ import annotations

import json
import os
from typing import List, Optional, Sequence

import numpy as np

from . import geometry
from .data import Dataset
from .lstm import run_stack
from .metrics import f1_per_label
from .model import (
    ModelConfig,
    ParamStore,
    extract_features,
    fvgg_probs,
    load_checkpoint,
    lstm_depth,
    multilabel_probs,
    predict_probs,
    sequence_probs,
    single_au_prob,
)
from .tensor import Tensor
from .train import train_split

EVAL_BATCH = 64


def _static_probs(kind, store, config, dataset, indices, rules):
    grid = config.grid_size()
    out = np.empty((len(indices), dataset.num_aus))
    for lo in range(0, len(indices), EVAL_BATCH):
        chunk = list(indices[lo:lo + EVAL_BATCH])
        images = Tensor(dataset.images(chunk))
        if kind == "fvgg":
            probs = fvgg_probs(store, config, images)
        else:
            tops = dataset.window_tops(chunk, grid, rules, config.roi_window)
            probs = multilabel_probs(store, config, images, tops)
        out[lo:lo + len(chunk)] = probs.data
    return out


def _single_au_probs(store, config, dataset, indices, rules):
    grid = config.grid_size()
    out = np.empty((len(indices), dataset.num_aus))
    for lo in range(0, len(indices), EVAL_BATCH):
        chunk = list(indices[lo:lo + EVAL_BATCH])
        images = Tensor(dataset.images(chunk))
        tops = dataset.window_tops(chunk, grid, rules, config.roi_window)
        for col, au in enumerate(dataset.au_list):
            probs = single_au_prob(store, config, images, tops, au, rules)
            out[lo:lo + len(chunk), col] = probs.data[:, 0]
    return out


def _session_windows(session_indices: List[int], t: int):
    """Consecutive windows covering the session; (window, rows_kept) pairs.

    ``rows_kept`` maps timestep -> position in session order for frames whose
    prediction this window owns.
    """
    n = len(session_indices)
    windows = []
    start = 0
    while start < n:
        end = min(start + t, n)
        win = session_indices[start:end]
        kept_from = 0
        if len(win) < t:
            pad = [win[0]] * (t - len(win))
            kept_from = t - len(win)
            win = pad + win
        windows.append((win, kept_from, start))
        start = end
    return windows


def _temporal_probs(store, config, depth, dataset, indices, rules,
                    lstm_prefix="lstm.layer", head="lstm_head",
                    feature_lookup=None):
    grid = config.grid_size()
    t = config.sequence_len
    order = {idx: row for row, idx in enumerate(indices)}
    out = np.empty((len(indices), dataset.num_aus))
    for session in dataset.sessions_of(indices):
        for win, kept_from, start in _session_windows(session, t):
            if feature_lookup is None:
                images = dataset.images(win).reshape(1, t, *dataset.frames[0].image.shape)
                tops = dataset.window_tops(win, grid, rules, config.roi_window)
                tops = tops.reshape(1, t, geometry.NUM_REGIONS, 2)
                probs = sequence_probs(store, config, depth, Tensor(images), tops).data[0]
            else:
                feats = np.stack([feature_lookup[i] for i in win])
                layer = store.lstm_layer(f"{lstm_prefix}0", config.global_feature_len,
                                         config.lstm_hidden)
                layers = [layer] + [store.lstm_layer(f"{lstm_prefix}{l}", config.lstm_hidden,
                                                     config.lstm_hidden)
                                    for l in range(1, depth)]
                outs = run_stack([Tensor(feats[i:i + 1]) for i in range(t)], layers)
                probs = np.stack([predict_probs(store, h, head=head).data[0] for h in outs])
            for step in range(kept_from, t):
                frame_idx = win[step]
                out[order[frame_idx]] = probs[step]
    return out


def predict_probabilities(store: ParamStore, config: ModelConfig, mode: str,
                          dataset: Dataset, indices: Sequence[int],
                          rules: Optional[Sequence[geometry.AuCenterRule]] = None,
                          extra: Optional[dict] = None) -> np.ndarray:
    """Per-AU probabilities (len(indices), num_aus) in the order given."""
    rules = geometry.default_rules() if rules is None else rules
    indices = list(indices)
    frozen = store.detached()
    if mode == "fvgg":
        return _static_probs("fvgg", frozen, config, dataset, indices, rules)
    if mode == "roi":
        return _static_probs("roi", frozen, config, dataset, indices, rules)
    if mode == "single_au":
        return _single_au_probs(frozen, config, dataset, indices, rules)
    if mode.startswith("roi_lstm"):
        return _temporal_probs(frozen, config, lstm_depth(mode), dataset, indices, rules)
    if mode == "transfer":
        tops = dataset.window_tops(indices, config.grid_size(), rules, config.roi_window)
        feats = extract_features(frozen, config, dataset.images(indices), tops)
        if extra and extra.get("transfer_temporal"):
            lookup = {i: f for i, f in zip(indices, feats)}
            return _temporal_probs(frozen, config, 1, dataset, indices, rules,
                                   lstm_prefix="transfer_lstm.layer", head="transfer_head",
                                   feature_lookup=lookup)
        out = np.empty((len(indices), dataset.num_aus))
        for lo in range(0, len(indices), EVAL_BATCH):
            chunk = feats[lo:lo + EVAL_BATCH]
            out[lo:lo + len(chunk)] = predict_probs(frozen, Tensor(chunk), head="transfer_head").data
        return out
    raise ValueError(f"unknown mode {mode!r}")


def evaluate_checkpoint(checkpoint_path, dataset: Dataset, fold: int, folds: int = 3,
                        fold_seed: int = 0, threshold: float = 0.5,
                        rules: Optional[Sequence[geometry.AuCenterRule]] = None) -> dict:
    """Score a checkpoint on its held-out fold; returns the metrics record."""
    store, config, mode, iteration, header = load_checkpoint(checkpoint_path)
    _, test_idx = train_split(dataset, fold, folds, fold_seed)
    probs = predict_probabilities(store, config, mode, dataset, test_idx, rules=rules,
                                  extra=header.get("extra"))
    labels = dataset.label_matrix(test_idx)
    scores, average = f1_per_label(probs, labels, threshold=threshold)
    return {
        "mode": mode,
        "iteration": iteration,
        "fold": fold,
        "folds": folds,
        "fold_seed": fold_seed,
        "threshold": threshold,
        "frames": len(test_idx),
        "au_list": list(dataset.au_list),
        "f1": [round(float(v), 6) for v in scores],
        "average_f1": round(float(average), 6),
    }


def metrics_table(record: dict) -> str:
    lines = [f"{'AU':>4}  {'F1':>7}"]
    for au, score in zip(record["au_list"], record["f1"]):
        lines.append(f"{au:>4}  {score:7.3f}")
    lines.append(f"{'Avg':>4}  {record['average_f1']:7.3f}")
    return "\n".join(lines)


def write_metrics(out_dir, record: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_table(record) + "\n")
