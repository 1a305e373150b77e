"""scikit-learn style wrappers around training, adaptation and the ensemble.

Inputs are image arrays (n, H, W, C) and boolean label matrices
(n, num_classes). ``predict_proba`` returns sigmoid scores, ``predict``
the thresholded indicator matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .adapt import AdaptConfig, adapt, predict_fold_averaged
from .dataset import ClassVocabulary, DatasetBundle, Split
from .ensemble import WeightSearchConfig, combine, search_grid
from .errors import ShapeError
from .model import ModelConfig, predict_scores
from .optimize import TrainConfig, train_base


def _images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ShapeError(f"expected (n, H, W, C) images, got shape {X.shape}")
    return X


def _split(name: str, X, Y) -> Split:
    X = _images(X)
    Y = np.asarray(Y, dtype=bool)
    if Y.ndim != 2 or len(Y) != len(X):
        raise ShapeError("labels must be an (n, num_classes) matrix matching the images")
    return Split(name, [f"{name}-{i}" for i in range(len(X))], X, Y, np.zeros(len(X), dtype=np.int64))


class _ScoreMixin(ClassifierMixin):
    threshold = metrics.DEFAULT_THRESHOLD

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X) >= self.threshold

    def score(self, X, Y, sample_weight=None) -> float:
        """Mean per-sample F2 at ``threshold``."""
        return metrics.mean_f2(self.predict_proba(X), np.asarray(Y, dtype=bool), self.threshold)


class MultilabelNet(_ScoreMixin, BaseEstimator):
    """Base model trained on source images; validation F2 drives the schedule."""

    def __init__(self, hidden_dims=(64, 32), dropout_p=0.3, batch_size=128, max_epochs=40,
                 lr=0.001, early_stop_patience=15, threshold=metrics.DEFAULT_THRESHOLD, seed=0):
        self.hidden_dims = hidden_dims
        self.dropout_p = dropout_p
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lr = lr
        self.early_stop_patience = early_stop_patience
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, Y, X_val=None, Y_val=None):
        train = _split("train", X, Y)
        val = train if X_val is None else _split("val", X_val, Y_val)
        n_cls = train.labels.shape[1]
        bundle = DatasetBundle(ClassVocabulary.default(n_cls), {"train": train} if val is train else {"train": train, "val": val})
        model_cfg = ModelConfig(int(np.prod(train.images.shape[1:])), n_cls, tuple(self.hidden_dims), self.dropout_p)
        train_cfg = TrainConfig(self.batch_size, self.max_epochs, self.seed, self.lr, self.early_stop_patience,
                                threshold=self.threshold)
        self.params_, self.history_ = train_base(model_cfg, bundle, train_cfg, "train", "val" if val is not train else "train")
        self.n_classes_ = n_cls
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = _images(X)
        return predict_scores(self.params_, X.reshape(len(X), -1).astype(np.float64))


class LastLayerAdapter(_ScoreMixin, BaseEstimator):
    """k fold heads re-fit on target tuning labels mixed with source samples.

    ``base`` is a fitted MultilabelNet. ``fit`` takes the tuning set and the
    source pool the mixture draws from with probability ``alpha``.
    """

    def __init__(self, base=None, alpha=0.0, k=10, epochs=8, batches_per_epoch=50, batch_size=32, lr=0.001,
                 use_augmentations=True, recompute_bn=True, threshold=metrics.DEFAULT_THRESHOLD, seed=0, n_jobs=1):
        self.base = base
        self.alpha = alpha
        self.k = k
        self.epochs = epochs
        self.batches_per_epoch = batches_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.use_augmentations = use_augmentations
        self.recompute_bn = recompute_bn
        self.threshold = threshold
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, Y, X_source, Y_source):
        check_is_fitted(self.base, "params_")
        tuning, source = _split("target_tuning", X, Y), _split("source_val", X_source, Y_source)
        bundle = DatasetBundle(ClassVocabulary.default(tuning.labels.shape[1]),
                               {"source_val": source, "target_tuning": tuning})
        cfg = AdaptConfig(alpha=self.alpha, k=self.k, epochs=self.epochs, batches_per_epoch=self.batches_per_epoch,
                          batch_size=self.batch_size, lr=self.lr, use_augmentations=self.use_augmentations,
                          recompute_bn=self.recompute_bn, threshold=self.threshold, seed=self.seed)
        self.folds_ = adapt(self.base.params_, bundle, cfg, jobs=self.n_jobs)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "folds_")
        return predict_fold_averaged(self.folds_, _images(X))


class WeightedGroupEnsemble(_ScoreMixin, BaseEstimator):
    """Convex mix of fitted estimators with weights chosen by the constrained grid search.

    ``fit`` takes the stage-1 proxy set and the local validation set.
    """

    def __init__(self, estimators=(), step=0.05, epsilon=0.002, threshold=metrics.DEFAULT_THRESHOLD):
        self.estimators = estimators
        self.step = step
        self.epsilon = epsilon
        self.threshold = threshold

    def fit(self, X_stage1, Y_stage1, X_local, Y_local):
        cfg = WeightSearchConfig(self.step, self.epsilon, self.threshold)
        s1 = [e.predict_proba(X_stage1) for e in self.estimators]
        loc = [e.predict_proba(X_local) for e in self.estimators]
        weights, rows = search_grid(s1, np.asarray(Y_stage1, dtype=bool), loc, np.asarray(Y_local, dtype=bool), cfg)
        self.weights_ = np.asarray(weights)
        self.search_rows_ = rows
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        return combine(self.weights_, [e.predict_proba(X) for e in self.estimators])
