"""Angular-error metrics, evaluation reports and the head-direction baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datamodel import FrameWindow, label_attended_hand


def angular_error(a, b) -> float:
    """Angle between two 3-vectors in degrees (both renormalised first)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("angular error of a zero vector")
    c = float(np.dot(a / na, b / nb))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def angular_errors(pred: np.ndarray, gt: np.ndarray, axis: int = -2) -> np.ndarray:
    """Vectorised angular error along ``axis`` (vectors stored along that axis)."""
    pn = pred / np.linalg.norm(pred, axis=axis, keepdims=True)
    gn = gt / np.linalg.norm(gt, axis=axis, keepdims=True)
    return np.degrees(np.arccos(np.clip(np.sum(pn * gn, axis=axis), -1.0, 1.0)))


def head_direction_baseline(window: FrameWindow) -> np.ndarray:
    return window.head_dir.T.copy()


def cdf_table(errors, max_deg: float = 180.0, step_deg: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of errors at or below each threshold 0, step, ..., max."""
    errors = np.sort(np.asarray(errors, dtype=float).reshape(-1))
    if errors.size == 0:
        raise ValueError("no errors to tabulate")
    thresholds = np.arange(0.0, max_deg + step_deg / 2, step_deg)
    frac = np.searchsorted(errors, thresholds, side="right") / errors.size
    return thresholds, frac


def export_cdf(errors, path, max_deg: float = 180.0, step_deg: float = 0.5) -> None:
    th, frac = cdf_table(errors, max_deg, step_deg)
    with open(path, "w", encoding="utf-8") as fh:
        for t, f in zip(th, frac):
            fh.write(f"{t:g} {f:.6f}\n")


def export_errors(errors, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in np.asarray(errors).reshape(-1):
            fh.write(f"{e:.6f}\n")


@dataclass
class EvalReport:
    mean_angular_error_deg: float
    window_errors: np.ndarray
    frame_errors: np.ndarray
    keys: list[tuple[str, int]]
    cdf_thresholds: np.ndarray
    cdf_fractions: np.ndarray
    recognizer_accuracy: float | None = None
    mean_error_correct: float | None = None
    mean_error_wrong: float | None = None
    n_correct: int = 0
    n_wrong: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def window_count(self) -> int:
        return len(self.window_errors)

    def summary(self) -> str:
        rows = [("windows", str(self.window_count)),
                ("mean_angular_error_deg", f"{self.mean_angular_error_deg:.4f}")]
        for t in (5, 10, 20, 30):
            i = int(np.searchsorted(self.cdf_thresholds, t))
            if i < len(self.cdf_fractions):
                rows.append((f"fraction_within_{t}deg", f"{self.cdf_fractions[i]:.4f}"))
        if self.recognizer_accuracy is not None:
            rows.append(("recognizer_accuracy", f"{self.recognizer_accuracy:.4f}"))
            rows.append(("windows_correct", str(self.n_correct)))
            rows.append(("windows_wrong", str(self.n_wrong)))
            if self.mean_error_correct is not None:
                rows.append(("mean_error_correct_deg", f"{self.mean_error_correct:.4f}"))
            if self.mean_error_wrong is not None:
                rows.append(("mean_error_wrong_deg", f"{self.mean_error_wrong:.4f}"))
        rows.extend((k, str(v)) for k, v in self.extra.items())
        return "\n".join(f"{k} = {v}" for k, v in rows) + "\n"


Predictor = Callable[[Sequence[FrameWindow]], np.ndarray]


def evaluate(predict: Predictor, windows: Sequence[FrameWindow],
             recognised_sides: np.ndarray | None = None) -> EvalReport:
    """Score a predictor over windows.

    ``predict`` maps a list of windows to gaze arrays W x 3 x T. Frame errors
    are averaged inside each window, then over windows. When recognised sides
    are given the report carries the recogniser accuracy and the error split
    between correctly and wrongly recognised windows.
    """
    if not windows:
        raise ValueError("empty test set")
    order = sorted(range(len(windows)), key=lambda i: windows[i].key)
    windows = [windows[i] for i in order]
    pred = np.asarray(predict(windows))
    gt = np.stack([w.gaze_dir.T for w in windows])
    frame_err = angular_errors(pred, gt, axis=1)            # W x T
    win_err = frame_err.mean(axis=1)
    th, frac = cdf_table(frame_err)
    report = EvalReport(mean_angular_error_deg=float(win_err.mean()), window_errors=win_err,
                        frame_errors=frame_err, keys=[w.key for w in windows],
                        cdf_thresholds=th, cdf_fractions=frac)
    if recognised_sides is not None:
        sides = np.asarray(recognised_sides)[order]
        truth = np.array([label_attended_hand(w).window for w in windows])
        ok = sides == truth
        report.recognizer_accuracy = float(ok.mean())
        report.n_correct = int(ok.sum())
        report.n_wrong = int((~ok).sum())
        if ok.any():
            report.mean_error_correct = float(win_err[ok].mean())
        if (~ok).any():
            report.mean_error_wrong = float(win_err[~ok].mean())
    return report


def baseline_predictor(windows: Sequence[FrameWindow]) -> np.ndarray:
    return np.stack([head_direction_baseline(w) for w in windows])
