"""scikit-learn style wrappers around pre-training and the linear probe."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..errors import DegenerateProbeError, InvalidInputError
from ..geometry import RgbdFrame
from .evaluation import point_features
from .training import Pretrainer, TrainConfig


def check_scenes(X) -> list[list[RgbdFrame]]:
    """Accept a scene (list of frames) or a list of scenes; every scene needs two frames."""
    if isinstance(X, RgbdFrame):
        raise InvalidInputError("expected a scene or a list of scenes, got a single frame")
    X = list(X)
    if not X:
        raise InvalidInputError("no scenes given")
    if all(isinstance(f, RgbdFrame) for f in X):
        X = [X]
    scenes = []
    for s in X:
        s = list(s)
        if not all(isinstance(f, RgbdFrame) for f in s):
            raise InvalidInputError("scenes must contain RgbdFrame objects only")
        if len(s) < 2:
            raise InvalidInputError("every scene needs at least two frames")
        scenes.append(s)
    return scenes


class MVNetPretrainer(BaseEstimator, TransformerMixin):
    """Pre-train on scenes with ``fit``; ``transform`` maps frames to frozen per-point features.

    ``transform`` returns one ``(M_i, C)`` array per input frame.
    """

    def __init__(self, max_steps=200, lr=1e-3, weight_decay=1e-4, lam=0.5, mask_ratio=0.30,
                 voxel_size=0.05, channels=96, start_layer=3, seed=0, deterministic=True,
                 config: Optional[dict] = None):
        self.max_steps = max_steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.lam = lam
        self.mask_ratio = mask_ratio
        self.voxel_size = voxel_size
        self.channels = channels
        self.start_layer = start_layer
        self.seed = seed
        self.deterministic = deterministic
        self.config = config

    def _train_config(self) -> TrainConfig:
        base = dict(self.config or {})
        base.update(max_steps=self.max_steps, lr=self.lr, weight_decay=self.weight_decay, lam=self.lam,
                    mask_ratio=self.mask_ratio, voxel_size=self.voxel_size, channels=self.channels,
                    start_layer=self.start_layer, seed=self.seed)
        return TrainConfig.from_dict(base)

    def fit(self, X, y=None):
        scenes = check_scenes(X)
        cfg = self._train_config()
        trainer = Pretrainer(scenes, cfg, deterministic=self.deterministic)
        trainer.run()
        self.config_ = cfg
        self.models_ = trainer.models
        self.history_ = [(r.l2d, r.lm, r.total) for r in trainer.history]
        self.n_steps_ = trainer.step_count
        return self

    def transform(self, X):
        check_is_fitted(self, "models_")
        frames = [f for s in check_scenes(X) for f in s] if not isinstance(X, RgbdFrame) else [X]
        return [point_features(self.models_.encoder, [f], self.config_)[0] for f in frames]


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Standardized multinomial logistic regression on per-point features."""

    def __init__(self, C=1.0, max_iter=500):
        self.C = C
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise DegenerateProbeError("probe labels contain a single class")
        self.scaler_ = StandardScaler().fit(X)
        self.clf_ = LogisticRegression(C=self.C, max_iter=self.max_iter).fit(self.scaler_.transform(X), y)
        self.n_features_in_ = X.shape[1]
        return self

    def _prep(self, X):
        check_is_fitted(self, "clf_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.scaler_.transform(X)

    def predict(self, X):
        return self.clf_.predict(self._prep(X))

    def predict_proba(self, X):
        return self.clf_.predict_proba(self._prep(X))
