"""scikit-learn compatible wrapper around the segmentation models.

>>> seg = FocalFuseSegmenter(base_channels=8, epochs=50)
>>> seg.fit(X, y)            # X: (n, W, H, Z) or (n, C, W, H, Z); y: (n, W, H, Z)
>>> labels = seg.predict(X)
>>> seg.score(X, y)          # mean foreground dice
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .architectures import ModelConfig, check_input_extents, model_forward
from .data import VolumeSample
from .errors import DataError
from .metrics import aggregate_reports, evaluate_volume
from .tensor import Tensor
from .training import LR_MAX, LR_MIN, train


def check_volumes(X, n_channels: Optional[int] = None) -> np.ndarray:
    """Validate and return X as float32 (n, C, W, H, Z)."""
    X = np.asarray(X)
    if X.ndim == 4:
        X = X[:, None]
    if X.ndim != 5:
        raise DataError(f"expected volumes shaped (n, W, H, Z) or (n, C, W, H, Z), got {X.shape}")
    if X.shape[0] < 1:
        raise DataError("need at least one volume")
    if not np.issubdtype(X.dtype, np.number):
        raise DataError(f"volumes must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise DataError("volumes contain non-finite values")
    check_input_extents(X.shape[2:])
    if n_channels is not None and X.shape[1] != n_channels:
        raise DataError(f"expected {n_channels} input channels, got {X.shape[1]}")
    return X


def check_labels(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise DataError(f"labels shape {y.shape} does not match volumes {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.round(y)):
            raise DataError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0:
        raise DataError("labels must be non-negative")
    return y


class FocalFuseSegmenter(BaseEstimator):
    """Volumetric segmenter; ``variant`` selects focal_fuse or msf3d."""

    def __init__(self, variant: str = "focal_fuse", base_channels: int = 16,
                 focal_levels: int = 2, dense_layers_per_block: int = 3,
                 num_classes: Optional[int] = None, epochs: int = 50, half_cycle: int = 100,
                 lr_min: float = LR_MIN, lr_max: float = LR_MAX,
                 max_iterations: Optional[int] = None, random_state: int = 0,
                 spacing=(1.0, 1.0, 1.0)):
        self.variant = variant
        self.base_channels = base_channels
        self.focal_levels = focal_levels
        self.dense_layers_per_block = dense_layers_per_block
        self.num_classes = num_classes
        self.epochs = epochs
        self.half_cycle = half_cycle
        self.lr_min = lr_min
        self.lr_max = lr_max
        self.max_iterations = max_iterations
        self.random_state = random_state
        self.spacing = spacing

    def _samples(self, X, y):
        return [VolumeSample(X[i], y[i].astype(np.uint8), self.spacing, f"vol{i}",
                             self.config_.num_classes) for i in range(len(X))]

    def fit(self, X, y):
        X = check_volumes(X)
        y = check_labels(y, X)
        n_classes = self.num_classes or int(y.max()) + 1
        if y.max() >= n_classes:
            raise DataError(f"labels reach {int(y.max())}, beyond num_classes={n_classes}")
        self.config_ = ModelConfig(variant=self.variant, base_channels=self.base_channels,
                                   num_classes=max(n_classes, 2), input_channels=X.shape[1],
                                   focal_levels=self.focal_levels,
                                   dense_layers_per_block=self.dense_layers_per_block)
        self.classes_ = np.arange(self.config_.num_classes)
        self.n_channels_in_ = X.shape[1]
        self.params_, self.optimizer_state_, self.train_log_ = train(
            self.config_, self._samples(X, y), epochs=self.epochs, seed=self.random_state,
            half_cycle=self.half_cycle, lr_min=self.lr_min, lr_max=self.lr_max,
            max_iterations=self.max_iterations, validate_every=0)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Raw logits shaped (n, num_classes, W, H, Z)."""
        check_is_fitted(self, "params_")
        X = check_volumes(X, self.n_channels_in_)
        return np.concatenate([model_forward(self.config_, self.params_, Tensor(X[i:i + 1])).data
                               for i in range(len(X))])

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean foreground dice over the given volumes."""
        X = check_volumes(X, getattr(self, "n_channels_in_", None))
        y = check_labels(y, X)
        pred = self.predict(X)
        reps = [evaluate_volume(pred[i], y[i], self.spacing, self.config_.num_classes)
                for i in range(len(X))]
        agg = aggregate_reports(reps)
        return float(agg.mean_dsc) if agg.mean_dsc is not None else 1.0
