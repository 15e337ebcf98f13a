"""Linear probe on frozen per-point encoder features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from ..errors import DegenerateProbeError, InvalidInputError
from ..geometry import RgbdFrame
from .evaluation import point_features
from .training import TrainConfig


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    test_loss: float
    n_train: int
    n_test: int
    classes: int


def probe_features(features: np.ndarray, labels: np.ndarray, seed: int, test_fraction: float = 0.5,
                   max_iter: int = 500) -> ProbeResult:
    """Fit a standardized multinomial logistic regression on a seeded split and score the held-out part."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(features) != len(labels):
        raise InvalidInputError(f"{len(features)} feature rows for {len(labels)} labels")
    if len(np.unique(labels)) < 2:
        raise DegenerateProbeError("probe labels contain a single class")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    cut = int(round(len(labels) * (1 - test_fraction)))
    tr, te = order[:cut], order[cut:]
    if len(np.unique(labels[tr])) < 2:
        raise DegenerateProbeError("training split contains a single class")
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=max_iter))
    clf.fit(features[tr], labels[tr])
    proba = clf.predict_proba(features[te])
    classes = list(clf.classes_)
    col = np.array([classes.index(y) if y in classes else -1 for y in labels[te]])
    p = np.where(col >= 0, proba[np.arange(len(te)), np.maximum(col, 0)], 0.0)
    return ProbeResult(
        train_accuracy=float(clf.score(features[tr], labels[tr])),
        test_accuracy=float(clf.score(features[te], labels[te])),
        test_loss=float(-np.mean(np.log(np.clip(p, 1e-12, None)))),
        n_train=len(tr),
        n_test=len(te),
        classes=len(classes),
    )


def scene_probe_data(encoder, scenes: Sequence[Sequence[RgbdFrame]], config: TrainConfig):
    """Stack per-point features and generator labels over every frame of ``scenes``."""
    feats, labels = [], []
    for scene in scenes:
        for f in scene:
            if f.labels is None:
                raise InvalidInputError(f"frame {f.frame_id!r} carries no labels")
            x, cloud = point_features(encoder, [f], config)
            feats.append(x)
            labels.append(cloud.labels)
    return np.concatenate(feats), np.concatenate(labels)


def linear_probe(encoder, scenes: Sequence[Sequence[RgbdFrame]], config: TrainConfig, seed: int = 0,
                 test_fraction: float = 0.5) -> ProbeResult:
    """Frozen-encoder probe; the encoder's parameters and buffers are left untouched."""
    X, y = scene_probe_data(encoder, scenes, config)
    return probe_features(X, y, seed, test_fraction)
