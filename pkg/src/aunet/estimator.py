"""Estimator-style facade so the detector composes with the usual tooling:
``fit`` / ``predict_proba`` / ``predict`` / ``score`` plus ``get_params`` and
cloning via scikit-learn's base classes.

``X`` is a Dataset or a sequence of FrameRecord objects (images carry their
landmarks and identity, which the region cropping and the sequence modes
need); ``y`` optionally overrides the labels stored on the frames.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import geometry
from .evaluate import predict_probabilities
from .metrics import f1_per_label
from .model import MODES, ModelConfig, load_checkpoint
from .train import TrainConfig, fit_model
from .validation import as_dataset, check_label_matrix


class AuDetector(BaseEstimator):
    """Multi-label facial action unit detector.

    Parameters mirror the training and architecture knobs at desk scale;
    ``mode`` picks the variant: ``fvgg``, ``roi``, ``single_au`` or
    ``roi_lstm{1,2,3}``.
    """

    def __init__(self, mode: str = "roi", image_size: tuple = (40, 40),
                 num_aus: int = 12, au_list: Sequence[int] = geometry.BP4D_AUS,
                 lr: float = 0.001, momentum: float = 0.9, batch_size: int = 8,
                 max_iterations: int = 500, freeze_stages: int = 0, seed: int = 0,
                 sequence_len: int = 24, sequence_batch: int = 1,
                 threshold: float = 0.5, model_config: Optional[ModelConfig] = None):
        self.mode = mode
        self.image_size = image_size
        self.num_aus = num_aus
        self.au_list = au_list
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_iterations = max_iterations
        self.freeze_stages = freeze_stages
        self.seed = seed
        self.sequence_len = sequence_len
        self.sequence_batch = sequence_batch
        self.threshold = threshold
        self.model_config = model_config

    def _configs(self):
        if self.mode not in MODES or self.mode == "transfer":
            raise ValueError(f"mode must be one of {[m for m in MODES if m != 'transfer']}")
        model_cfg = self.model_config
        if model_cfg is None:
            model_cfg = ModelConfig(image_size=tuple(self.image_size), num_aus=self.num_aus,
                                    sequence_len=self.sequence_len)
        train_cfg = TrainConfig(mode=self.mode, lr=self.lr, momentum=self.momentum,
                                batch_size=self.batch_size, max_iterations=self.max_iterations,
                                freeze_stages=self.freeze_stages, seed=self.seed,
                                sequence_len=self.sequence_len, sequence_batch=self.sequence_batch)
        return train_cfg, model_cfg

    def fit(self, X, y=None):
        dataset = as_dataset(X, self.au_list, self.image_size)
        if y is not None:
            from dataclasses import replace

            from .data import Dataset

            y = check_label_matrix(y, len(dataset), self.num_aus)
            frames = [replace(f, labels=row) for f, row in zip(dataset.frames, y)]
            dataset = Dataset(frames, dataset.au_list, dataset.image_size, dataset.schema_size)
        train_cfg, model_cfg = self._configs()
        result = fit_model(train_cfg, model_cfg, dataset, range(len(dataset)))
        if result.status != "completed":
            raise RuntimeError(f"training {result.status} after {result.iterations_run} iterations")
        self.params_ = result.store
        self.config_ = result.model_config
        self.loss_log_ = result.log_rows
        self.n_iter_ = result.iterations_run
        return self

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("this AuDetector instance is not fitted yet; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        dataset = as_dataset(X, self.au_list, self.image_size)
        return predict_probabilities(self.params_, self.config_, self.mode,
                                     dataset, range(len(dataset)))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.int8)

    def score(self, X, y=None) -> float:
        """Unweighted mean per-AU F1 at the decision threshold."""
        dataset = as_dataset(X, self.au_list, self.image_size)
        probs = self.predict_proba(dataset)
        labels = dataset.label_matrix() if y is None else check_label_matrix(
            y, len(dataset), self.num_aus)
        _, average = f1_per_label(probs, labels, threshold=self.threshold)
        return average


class GlobalFeatureExtractor(TransformerMixin, BaseEstimator):
    """Frozen-model feature transformer: frames -> global feature vectors.

    Wraps either a fitted AuDetector or a checkpoint file; ``transform``
    returns one feature row per input frame, in input order.
    """

    def __init__(self, detector: Optional[AuDetector] = None,
                 checkpoint: Optional[str] = None):
        self.detector = detector
        self.checkpoint = checkpoint

    def fit(self, X=None, y=None):
        if (self.detector is None) == (self.checkpoint is None):
            raise ValueError("provide exactly one of detector or checkpoint")
        if self.detector is not None:
            self.detector._require_fitted()
            if self.detector.mode in ("fvgg", "single_au"):
                raise ValueError(f"mode {self.detector.mode!r} has no global feature")
            self.store_ = self.detector.params_
            self.config_ = self.detector.config_
            self.au_list_ = tuple(self.detector.au_list)
        else:
            store, config, mode, _, _ = load_checkpoint(self.checkpoint)
            if mode in ("fvgg", "single_au"):
                raise ValueError(f"checkpoint mode {mode!r} has no global feature")
            self.store_ = store
            self.config_ = config
            self.au_list_ = geometry.BP4D_AUS
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "store_"):
            raise RuntimeError("not fitted; call fit first")
        from .model import extract_features

        dataset = as_dataset(X, self.au_list_, self.config_.image_size)
        indices = list(range(len(dataset)))
        tops = dataset.window_tops(indices, self.config_.grid_size(),
                                   geometry.default_rules(), self.config_.roi_window)
        return extract_features(self.store_, self.config_, dataset.images(indices), tops)
