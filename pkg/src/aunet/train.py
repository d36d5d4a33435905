"""Training loops: SGD with momentum over the offset loss, for static,
single-AU, recurrent and frozen-feature transfer modes.

Every run is a pure function of (configs, dataset, seed): batches are drawn
from one seeded generator, the optimizer mutates parameters in a fixed
order, and logs echo floats with round-trip formatting, so identical runs
produce byte-identical artifacts. Wall-clock timing goes to a separate
file and never touches the deterministic outputs.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .data import Dataset
from .losses import offset_cross_entropy
from .lstm import run_stack
from .metrics import fold_members, subject_kfold_split
from .model import (
    MODES,
    ModelConfig,
    ParamStore,
    TEMPORAL_MODES,
    extract_features,
    freeze_prefix,
    fvgg_probs,
    init_params,
    load_checkpoint,
    lstm_depth,
    multilabel_probs,
    predict_probs,
    save_checkpoint,
    sequence_probs,
    single_au_prob,
)
from .tensor import Tensor

STATUS_COMPLETED = "completed"
STATUS_DIVERGED = "diverged"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "roi"
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    max_iterations: int = 500
    freeze_stages: int = 0
    seed: int = 0
    lr_patience: int = 200
    lr_factor: float = 0.5
    lr_min_improve: float = 0.01
    sequence_len: int = 24
    sequence_batch: int = 1
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    source_checkpoint: str = ""
    init_checkpoint: str = ""
    transfer_temporal: bool = False
    freeze_static: bool = False  # recurrent modes: train only the LSTM stack + head
    fixed_batch: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.sequence_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.mode == "transfer" and not self.source_checkpoint:
            raise ValueError("transfer mode needs source_checkpoint")


def make_velocity(store: ParamStore) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(t.data) for name, t in store.trainable_items()}


def sgd_momentum_step(store: ParamStore, velocity: Dict[str, np.ndarray],
                      lr: float, momentum: float) -> None:
    """v <- momentum*v - lr*g; p <- p + v, trainable parameters only."""
    for name, tensor in store.trainable_items():
        g = tensor.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name}")
        v = velocity[name]
        v *= momentum
        v -= lr * g
        tensor.data += v


def assemble_sequence(dataset: Dataset, anchor: int, sequence_len: int,
                      rng: np.random.Generator) -> List[int]:
    """Pick sequence_len-1 distinct prior frames of the anchor's session,
    sorted by time, anchor last; short histories repeat the earliest prior."""
    priors = dataset.priors_of(anchor)
    if not priors:
        raise TrainingError(f"frame index {anchor} has no prior frame in its session")
    want = sequence_len - 1
    if len(priors) > want:
        chosen = sorted(rng.choice(len(priors), size=want, replace=False).tolist())
        picked = [priors[i] for i in chosen]
    else:
        picked = list(priors)
    picked.sort(key=lambda i: dataset.frames[i].frame_id)
    while len(picked) < want:
        picked.insert(0, picked[0])
    return picked + [anchor]


@dataclass
class FitResult:
    store: ParamStore
    model_config: ModelConfig
    log_rows: List[Tuple[int, float, float]]
    status: str
    iterations_run: int
    extra: dict = field(default_factory=dict)


def _temporal_rows(dataset, anchors, train_cfg, rng):
    picks = rng.choice(len(anchors), size=train_cfg.sequence_batch, replace=True)
    rows = [assemble_sequence(dataset, anchors[p], train_cfg.sequence_len, rng) for p in picks]
    flat = [i for row in rows for i in row]
    b, t = len(rows), train_cfg.sequence_len
    labels = dataset.label_matrix(flat).astype(float).reshape(b, t, dataset.num_aus)
    return rows, labels


def _temporal_batch(dataset, anchors, train_cfg, rng, grid, rules, window):
    rows, labels = _temporal_rows(dataset, anchors, train_cfg, rng)
    flat = [i for row in rows for i in row]
    b, t = len(rows), train_cfg.sequence_len
    images = dataset.images(flat).reshape(b, t, *dataset.frames[0].image.shape)
    tops = dataset.window_tops(flat, grid, rules, window).reshape(b, t, geometry.NUM_REGIONS, 2)
    return images, tops, labels


def lstm_sequence_probs(store: ParamStore, model_cfg: ModelConfig, depth: int,
                        feats: np.ndarray, prefix: str = "lstm.layer",
                        head: str = "lstm_head") -> Tensor:
    """Per-timestep probabilities from precomputed features (B, T, G)."""
    from .tensor import concat as _concat

    b, t, _ = feats.shape
    layers = [store.lstm_layer(f"{prefix}{layer}",
                               model_cfg.global_feature_len if layer == 0 else model_cfg.lstm_hidden,
                               model_cfg.lstm_hidden)
              for layer in range(depth)]
    outs = run_stack([Tensor(feats[:, i, :]) for i in range(t)], layers)
    num_aus = store[f"{head}.w"].data.shape[1]
    return _concat([predict_probs(store, h, head=head).reshape(b, 1, num_aus) for h in outs],
                   axis=1)


def fit_model(train_cfg: TrainConfig, model_cfg: ModelConfig, dataset: Dataset,
              train_indices: Sequence[int],
              rules: Optional[Sequence[geometry.AuCenterRule]] = None,
              snapshot=None) -> FitResult:
    """Run the optimization loop in memory and return parameters plus the loss log.

    ``snapshot``, when given, is called as snapshot(iteration, store) every
    ``checkpoint_every`` iterations. On divergence the parameters roll back
    to the last finite state."""
    rules = geometry.default_rules() if rules is None else rules
    if train_cfg.mode == "transfer":
        return _fit_transfer(train_cfg, model_cfg, dataset, train_indices, rules)
    rng = np.random.default_rng(train_cfg.seed)
    store = init_params(model_cfg, train_cfg.mode, rng, rules=rules)
    if train_cfg.init_checkpoint:
        warm, _, _, _, _ = load_checkpoint(train_cfg.init_checkpoint, expect_config=model_cfg)
        for name in warm.names():
            if name in store:
                store[name].data[...] = warm[name].data
    if train_cfg.mode == "single_au":
        for au in sorted({a for r in rules for a in r.au_links}):
            freeze_prefix(store, model_cfg, 0, prefix=f"au{au:02d}.")
            if train_cfg.freeze_stages:
                freeze_prefix(store, model_cfg, train_cfg.freeze_stages, prefix=f"au{au:02d}.")
    elif train_cfg.freeze_stages:
        freeze_prefix(store, model_cfg, train_cfg.freeze_stages)

    grid = model_cfg.grid_size()
    window = model_cfg.roi_window
    train_indices = list(train_indices)
    if not train_indices:
        raise TrainingError("empty training set")
    labels_all = dataset.label_matrix(train_indices)

    temporal = train_cfg.mode in TEMPORAL_MODES
    anchors = None
    feat_of = None
    if temporal:
        anchors = [i for i in train_indices if dataset.priors_of(i)]
        if not anchors:
            raise TrainingError("temporal mode needs frames with prior history")
        if train_cfg.freeze_static:
            # the static net acts as a fixed feature extractor, so the
            # recurrent stack trains over cached per-frame features
            for static_prefix in ("backbone.", "roi.", "global."):
                store.freeze_prefix(static_prefix)
            tops_all = dataset.window_tops(train_indices, grid, rules, window)
            feats = extract_features(store, model_cfg, dataset.images(train_indices), tops_all)
            feat_of = {i: row for i, row in zip(train_indices, feats)}

    aus_sorted = list(dataset.au_list)
    au_columns = list(range(dataset.num_aus)) if train_cfg.mode == "single_au" else [None]
    velocity = make_velocity(store)
    log_rows: List[Tuple[int, float, float]] = []
    status = STATUS_COMPLETED
    iterations_run = 0
    fixed = None
    last_good = {}

    for au_col in au_columns:
        lr = train_cfg.lr
        window_losses: List[float] = []
        previous_window: Optional[float] = None
        if au_col is not None:
            pos_pool = [i for i, g in zip(train_indices, labels_all[:, au_col]) if g == 1]
            neg_pool = [i for i, g in zip(train_indices, labels_all[:, au_col]) if g == 0]
            if not pos_pool or not neg_pool:
                # nothing separable to learn for this AU; leave its head at init
                continue
        for it in range(train_cfg.max_iterations):
            if train_cfg.fixed_batch and fixed is not None:
                batch = fixed
            elif temporal and feat_of is not None:
                rows, seq_labels = _temporal_rows(dataset, anchors, train_cfg, rng)
                feats = np.stack([[feat_of[i] for i in row] for row in rows])
                batch = (feats, None, seq_labels)
            elif temporal:
                batch = _temporal_batch(dataset, anchors, train_cfg, rng, grid, rules, window)
            elif au_col is not None:
                half = max(train_cfg.batch_size // 2, 1)
                pos = rng.choice(len(pos_pool), size=half, replace=True)
                neg = rng.choice(len(neg_pool), size=half, replace=True)
                idx = [pos_pool[i] for i in pos] + [neg_pool[i] for i in neg]
                batch = (dataset.images(idx), dataset.window_tops(idx, grid, rules, window),
                         dataset.label_matrix(idx).astype(float)[:, au_col:au_col + 1])
            else:
                picks = rng.choice(len(train_indices), size=train_cfg.batch_size, replace=True)
                idx = [train_indices[p] for p in picks]
                batch = (dataset.images(idx), dataset.window_tops(idx, grid, rules, window),
                         dataset.label_matrix(idx).astype(float))
            if train_cfg.fixed_batch and fixed is None:
                fixed = batch
            images, tops, labels = batch

            if temporal and feat_of is not None:
                probs = lstm_sequence_probs(store, model_cfg, lstm_depth(train_cfg.mode), images)
                loss = offset_cross_entropy(probs, labels) * (1.0 / train_cfg.sequence_len)
            elif temporal:
                probs = sequence_probs(store, model_cfg, lstm_depth(train_cfg.mode),
                                       Tensor(images), tops)
                loss = offset_cross_entropy(probs, labels) * (1.0 / train_cfg.sequence_len)
            elif train_cfg.mode == "fvgg":
                probs = fvgg_probs(store, model_cfg, Tensor(images))
                loss = offset_cross_entropy(probs, labels)
            elif au_col is not None:
                probs = single_au_prob(store, model_cfg, Tensor(images), tops,
                                       aus_sorted[au_col], rules)
                loss = offset_cross_entropy(probs, labels)
            else:
                probs = multilabel_probs(store, model_cfg, Tensor(images), tops)
                loss = offset_cross_entropy(probs, labels)
            mean_loss = loss.item() * (train_cfg.sequence_len if temporal else 1.0) / labels.size
            if not np.isfinite(mean_loss):
                for name, saved in last_good.items():
                    store[name].data[...] = saved
                status = STATUS_DIVERGED
                break
            last_good = {name: t.data.copy() for name, t in store.trainable_items()}
            store.zero_grads()
            loss.backward()
            try:
                sgd_momentum_step(store, velocity, lr, train_cfg.momentum)
            except TrainingError:
                status = STATUS_DIVERGED
                break
            iterations_run += 1
            log_rows.append((iterations_run, mean_loss, lr))
            if snapshot is not None and train_cfg.checkpoint_every > 0 \
                    and iterations_run % train_cfg.checkpoint_every == 0:
                snapshot(iterations_run, store)
            window_losses.append(mean_loss)
            if len(window_losses) == train_cfg.lr_patience:
                current = float(np.mean(window_losses))
                window_losses.clear()
                if previous_window is not None and previous_window > 0:
                    if (previous_window - current) / previous_window < train_cfg.lr_min_improve:
                        lr *= train_cfg.lr_factor
                previous_window = current
        if status == STATUS_DIVERGED:
            break
    return FitResult(store, model_cfg, log_rows, status, iterations_run)


# ----------------------------------------------------------------------
# transfer mode: frozen source features + a fresh shallow head


def _fit_transfer(train_cfg, model_cfg, dataset, train_indices, rules) -> FitResult:
    src_store, src_cfg, src_mode, _, _ = load_checkpoint(train_cfg.source_checkpoint)
    if src_mode == "fvgg" or src_mode == "single_au":
        raise TrainingError(f"transfer needs a global-feature source model, not {src_mode!r}")
    rng = np.random.default_rng(train_cfg.seed)
    grid = src_cfg.grid_size()
    all_indices = list(train_indices)
    tops = dataset.window_tops(all_indices, grid, rules, src_cfg.roi_window)
    features = extract_features(src_store, src_cfg, dataset.images(all_indices), tops)
    feat_of = {idx: row for idx, row in zip(all_indices, features)}

    head = ParamStore()
    g_len = src_cfg.global_feature_len
    head_in = src_cfg.lstm_hidden if train_cfg.transfer_temporal else g_len
    head.add("transfer_head.w", rng.normal(0.0, np.sqrt(1.0 / head_in),
                                           size=(head_in, dataset.num_aus)))
    head.add("transfer_head.b", np.zeros(dataset.num_aus))
    if train_cfg.transfer_temporal:
        from .lstm import GATE_NAMES  # local import keeps module top uncluttered

        gate_std = np.sqrt(1.0 / (src_cfg.lstm_hidden + g_len))
        for gate in GATE_NAMES:
            if gate.startswith("W"):
                head.add(f"transfer_lstm.layer0.{gate}",
                         rng.normal(0.0, gate_std,
                                    size=(src_cfg.lstm_hidden, src_cfg.lstm_hidden + g_len)))
            else:
                head.add(f"transfer_lstm.layer0.{gate}",
                         np.full(src_cfg.lstm_hidden, 1.0 if gate == "bf" else 0.0))

    velocity = make_velocity(head)
    log_rows: List[Tuple[int, float, float]] = []
    status = STATUS_COMPLETED
    lr = train_cfg.lr
    window_losses: List[float] = []
    previous_window = None
    anchors = [i for i in all_indices if dataset.priors_of(i)] if train_cfg.transfer_temporal else None
    iterations_run = 0
    for it in range(train_cfg.max_iterations):
        if train_cfg.transfer_temporal:
            picks = rng.choice(len(anchors), size=train_cfg.sequence_batch, replace=True)
            rows = [assemble_sequence(dataset, anchors[p], train_cfg.sequence_len, rng) for p in picks]
            b, t = len(rows), train_cfg.sequence_len
            seq_feats = np.stack([[feat_of[i] for i in row] for row in rows])
            labels = dataset.label_matrix([i for row in rows for i in row]).astype(float)
            labels = labels.reshape(b, t, dataset.num_aus)
            layer = head.lstm_layer("transfer_lstm.layer0", g_len, src_cfg.lstm_hidden)
            steps = [Tensor(seq_feats[:, i, :]) for i in range(t)]
            outs = run_stack(steps, [layer])
            from .tensor import concat as _concat

            probs = _concat([predict_probs(head, h, head="transfer_head").reshape(b, 1, dataset.num_aus)
                             for h in outs], axis=1)
            loss = offset_cross_entropy(probs, labels) * (1.0 / t)
            mean_loss = loss.item() / (b * dataset.num_aus)
        else:
            picks = rng.choice(len(all_indices), size=train_cfg.batch_size, replace=True)
            idx = [all_indices[p] for p in picks]
            feats = np.stack([feat_of[i] for i in idx])
            labels = dataset.label_matrix(idx).astype(float)
            probs = predict_probs(head, Tensor(feats), head="transfer_head")
            loss = offset_cross_entropy(probs, labels)
            mean_loss = loss.item() / labels.size
        if not np.isfinite(mean_loss):
            status = STATUS_DIVERGED
            break
        head.zero_grads()
        loss.backward()
        try:
            sgd_momentum_step(head, velocity, lr, train_cfg.momentum)
        except TrainingError:
            status = STATUS_DIVERGED
            break
        iterations_run += 1
        log_rows.append((iterations_run, mean_loss, lr))
        window_losses.append(mean_loss)
        if len(window_losses) == train_cfg.lr_patience:
            current = float(np.mean(window_losses))
            window_losses.clear()
            if previous_window is not None and previous_window > 0:
                if (previous_window - current) / previous_window < train_cfg.lr_min_improve:
                    lr *= train_cfg.lr_factor
            previous_window = current

    merged = ParamStore()
    for name, tensor in src_store.items():
        merged.add(name, tensor.data, trainable=False)
    for name, tensor in head.items():
        merged.add(name, tensor.data, trainable=True)
    extra = {"transfer_temporal": train_cfg.transfer_temporal, "source_mode": src_mode}
    return FitResult(merged, src_cfg, log_rows, status, iterations_run, extra=extra)


# ----------------------------------------------------------------------
# file-producing entry point


def train_split(dataset: Dataset, fold: int, folds: int, fold_seed: int) -> Tuple[List[int], List[int]]:
    """(train_indices, test_indices) holding out the given subject fold."""
    assignment = subject_kfold_split(dataset.subjects(), k=folds, seed=fold_seed)
    held = set(fold_members(assignment, fold))
    train_idx = [i for i, f in enumerate(dataset.frames) if f.subject not in held]
    test_idx = [i for i, f in enumerate(dataset.frames) if f.subject in held]
    return train_idx, test_idx


def write_loss_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it, loss, lr in rows:
            fh.write(f"{it} {loss!r} {lr!r}\n")


def train_run(train_cfg: TrainConfig, model_cfg: ModelConfig, dataset: Dataset, out_dir,
              fold: int = 0, folds: int = 3, fold_seed: int = 0,
              rules: Optional[Sequence[geometry.AuCenterRule]] = None) -> dict:
    """Train one mode on one fold; writes checkpoint, loss log, config echo,
    result summary, and a separate wall-clock file. Returns the summary."""
    os.makedirs(out_dir, exist_ok=True)
    started = time.time()
    train_idx, _ = train_split(dataset, fold, folds, fold_seed)

    def snapshot(iteration, store):
        save_checkpoint(os.path.join(out_dir, f"checkpoint_iter{iteration}.bin"),
                        store, model_cfg, train_cfg.mode, iteration)

    result = fit_model(train_cfg, model_cfg, dataset, train_idx, rules=rules, snapshot=snapshot)

    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(ckpt_path, result.store, result.model_config, train_cfg.mode,
                    result.iterations_run, extra=result.extra or None)
    write_loss_log(os.path.join(out_dir, "loss.log"), result.log_rows)
    summary = {
        "status": result.status,
        "mode": train_cfg.mode,
        "fold": fold,
        "folds": folds,
        "fold_seed": fold_seed,
        "seed": train_cfg.seed,
        "iterations_run": result.iterations_run,
        "final_loss": result.log_rows[-1][1] if result.log_rows else None,
        "train_config": asdict(train_cfg),
        "model_config": asdict(result.model_config),
    }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "timing.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"wall_seconds {time.time() - started:.3f}\n")
    return summary
