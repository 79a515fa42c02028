"""Hierarchical inference: recognise the attended hand, then estimate gaze."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .datamodel import FrameWindow
from .estimator import Estimator, estimator_batch, gt_sides
from .recognizer import Recognizer, infer_attended, recognizer_batch


def recognise_sides(recognizer: Recognizer, windows: Sequence[FrameWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Window-level attended side and confidence for every window."""
    probs = recognizer.predict(recognizer_batch(list(windows)))
    out = [infer_attended(p) for p in probs]
    return np.array([s for s, _ in out], dtype=int), np.array([c for _, c in out])


def attended_sides(windows: Sequence[FrameWindow], recognizer: Recognizer | None) -> np.ndarray:
    """Recognised sides, or gaze-derived labels when no recogniser is given."""
    if recognizer is None:
        return gt_sides(list(windows))
    return recognise_sides(recognizer, windows)[0]


def predict_gaze(estimator: Estimator, windows: Sequence[FrameWindow], sides: np.ndarray) -> np.ndarray:
    batch = estimator_batch(list(windows), sides, estimator.config.n_nearest)
    return estimator.predict(batch)


def make_predictor(estimator: Estimator, recognizer: Recognizer | None = None):
    """Predictor for :func:`evaluate` running the full hierarchy."""
    def predict(windows):
        return predict_gaze(estimator, windows, attended_sides(windows, recognizer))
    return predict
