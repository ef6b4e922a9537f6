"""Rollout classification (SE / PSE / FE), the rho score, and demo MSE."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .labeling import ProgressLabels
from .predictors import DEFAULT_GAP, DEFAULT_N, ProgressPredictor, predict_progress
from .trajectory import Trajectory

CLASSES = ("SE", "PSE", "FE")
SE_FINAL = 0.8
SE_LAST_THIRD = 0.6


@dataclass
class RolloutTrace:
    rollout_id: str
    progress: np.ndarray
    truth: str | None = None

    def __post_init__(self):
        self.progress = np.asarray(self.progress, dtype=np.float64)
        if self.truth is not None and self.truth not in CLASSES:
            raise ValidationError(f"{self.rollout_id}: unknown class {self.truth!r}")


@dataclass
class EvalReport:
    rollout_ids: list[str]
    labels: list[str]
    means: list[float]
    xi: float | None
    rho: float | None = None
    per_class: dict[str, tuple[int, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "xi": self.xi,
            "rho": self.rho,
            "per_class": {c: f"{a}/{b}" for c, (a, b) in self.per_class.items()},
            "per_rollout": [
                {"rollout_id": r, "label": lab, "mean_progress": m}
                for r, lab, m in zip(self.rollout_ids, self.labels, self.means)
            ],
        }


def last_third_start(T: int) -> int:
    return -(-2 * T // 3)


def is_success(progress: np.ndarray) -> bool:
    """Final progress above 0.8 and mean over frames ceil(2T/3)..T-1 above 0.6."""
    T = len(progress)
    return bool(progress[-1] > SE_FINAL and progress[last_third_start(T):].mean() > SE_LAST_THIRD)


def classify_rollouts(traces: Sequence[RolloutTrace]) -> EvalReport:
    """Label rollouts SE / PSE / FE from their progress traces.

    SE is decided per trace first. The PSE/FE threshold xi is the median of
    mean progress over the remaining traces, and a trace whose mean equals
    xi counts as PSE. When ground-truth classes are attached to every trace
    the report also carries rho and a per-class breakdown.
    """
    traces = list(traces)
    if not traces:
        raise ValidationError("classify_rollouts needs at least one trace")
    for tr in traces:
        if len(tr.progress) < 3:
            raise ValidationError(f"{tr.rollout_id}: trace needs at least 3 frames")
    means = [float(tr.progress.mean()) for tr in traces]
    success = [is_success(tr.progress) for tr in traces]
    rest = sorted(m for m, s in zip(means, success) if not s)
    xi, xi_exact = None, None
    if rest:
        mid = len(rest) // 2
        # exact median, so a mean just above it never rounds onto it
        xi_exact = Fraction(rest[mid]) if len(rest) % 2 else (Fraction(rest[mid - 1]) + Fraction(rest[mid])) / 2
        xi = float(xi_exact)
    labels = ["SE" if s else ("PSE" if Fraction(m) >= xi_exact else "FE") for m, s in zip(means, success)]
    report = EvalReport([t.rollout_id for t in traces], labels, means, xi)
    if all(t.truth is not None for t in traces):
        truth = [t.truth for t in traces]
        report.rho = score_rho(labels, truth)
        report.per_class = per_class_breakdown(labels, truth)
    return report


def score_rho(predicted: Sequence[str], truth: Sequence[str]) -> float:
    """(#correct - #wrong) / total."""
    if len(predicted) != len(truth):
        raise ValidationError(f"{len(predicted)} predictions vs {len(truth)} truth labels")
    if not truth:
        raise ValidationError("score_rho needs at least one label")
    correct = sum(p == t for p, t in zip(predicted, truth))
    return (correct - (len(truth) - correct)) / len(truth)


def per_class_breakdown(predicted: Sequence[str], truth: Sequence[str]) -> dict[str, tuple[int, int]]:
    out = {}
    for c in CLASSES:
        idx = [i for i, t in enumerate(truth) if t == c]
        out[c] = (sum(predicted[i] == c for i in idx), len(idx))
    return out


def admissible_starts(T: int, n_frames: int = DEFAULT_N, gap: int = DEFAULT_GAP) -> np.ndarray:
    """Every start ``a`` with the window 0, a, a+G, ..., a+(N-2)G inside the trajectory."""
    last = T - 1 - (n_frames - 2) * gap
    return np.arange(1, last + 1) if last >= 1 else np.arange(0)


def sequence_windows(starts, n_frames: int = DEFAULT_N, gap: int = DEFAULT_GAP) -> np.ndarray:
    starts = np.asarray(starts, dtype=np.int64)
    tail = starts[:, None] + np.arange(n_frames - 1)[None, :] * gap
    return np.concatenate([np.zeros((len(starts), 1), dtype=np.int64), tail], axis=1)


def demo_mse(
    predictor: ProgressPredictor,
    trajectories: Mapping[str, Trajectory],
    labels: Mapping[str, ProgressLabels],
    ids: Sequence[str] | None = None,
    n_frames: int = DEFAULT_N,
    gap: int = DEFAULT_GAP,
    chunk: int = 512,
) -> float:
    """Single-step MSE of predicted vs labeled progress.

    Every admissible window start (stride 1) is evaluated and all N positions
    of each window contribute one squared error.
    """
    ids = sorted(labels) if ids is None else list(ids)
    total, count = 0.0, 0
    for tid in ids:
        traj, lab = trajectories[tid], labels[tid]
        starts = admissible_starts(len(traj), n_frames, gap)
        for lo in range(0, len(starts), chunk):
            win = sequence_windows(starts[lo:lo + chunk], n_frames, gap)
            pred = predict_progress(predictor, traj, win, traj.task_id)
            err = pred - lab.y[win]
            total += math.fsum(np.square(err).ravel())
            count += err.size
    if count == 0:
        raise ValidationError("demo_mse: no admissible windows in the evaluation set")
    return total / count
