"""Scikit-learn style wrapper around training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig
from .data import Sample, resample
from .metrics import chamfer_value
from .model import predict_batch
from .training import TrainConfig, train
from .validation import check_consistent_length, check_point_clouds


class PointCloudCompleter(BaseEstimator):
    """Completes partial point clouds with a multi-branch self-fusion network.

    ``fit(X, y)`` takes partial clouds ``X`` and ground-truth clouds ``y``,
    both shaped ``(B, N, 3)`` or given as lists of equally sized ``(N, 3)``
    arrays. Partial clouds of any size are resampled to ``n_input`` points.
    ``predict`` returns ``(B, n_out, 3)`` completions and ``score`` the
    negated mean chamfer distance, so larger is better.
    """

    def __init__(self, branches=3, fusion_mode="double", extractor="set_abstraction_knn",
                 decoder="query_cross_attention", n_input=256, n_out=256, n_miss=128, levels=(128, 64, 32),
                 widths=(64, 128, 256), k=16, heads=4, learning_rate=1e-3, epochs=200, batch_size=8,
                 random_state=0):
        self.branches = branches
        self.fusion_mode = fusion_mode
        self.extractor = extractor
        self.decoder = decoder
        self.n_input = n_input
        self.n_out = n_out
        self.n_miss = n_miss
        self.levels = levels
        self.widths = widths
        self.k = k
        self.heads = heads
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        config = ModelConfig(branches=self.branches, fusion_mode=self.fusion_mode, extractor=self.extractor,
                             decoder=self.decoder, n_input=self.n_input, n_out=self.n_out, n_miss=self.n_miss,
                             levels=tuple(self.levels), widths=tuple(self.widths), k=self.k, heads=self.heads,
                             seed=self.random_state)
        config.validate()
        return config

    def _inputs(self, X) -> np.ndarray:
        if isinstance(X, np.ndarray) and X.ndim == 3:
            clouds = check_point_clouds(X)
            return np.stack([resample(c, self.n_input) for c in clouds])
        single = [check_point_clouds(c, "X")[0] for c in ([X] if np.ndim(X) == 2 else X)]
        return np.stack([resample(c, self.n_input) for c in single])

    def fit(self, X, y):
        partial = self._inputs(X)
        gt = check_point_clouds(y, "y")
        check_consistent_length(partial, gt)
        config = TrainConfig(model=self._model_config(), learning_rate=self.learning_rate, epochs=self.epochs,
                             batch_size=self.batch_size, seed=self.random_state)
        samples = [Sample(f"{i:04d}", "fit", i, "train", p, g) for i, (p, g) in enumerate(zip(partial, gt))]
        result = train(config, samples)
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.loss_curve_ = [v for _, v in result.log]
        self.n_parameters_ = result.model.num_parameters()
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_batch(self.model_, self._inputs(X))

    def score(self, X, y) -> float:
        gt = check_point_clouds(y, "y")
        pred = self.predict(X)
        check_consistent_length(pred, gt)
        return -float(np.mean([chamfer_value(g, p) for g, p in zip(gt, pred)]))
