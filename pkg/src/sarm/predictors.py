"""The progress-predictor contract and the non-learned implementations.

A predictor maps observation windows of one trajectory to per-frame global
progress. Windows are integer index arrays of shape (W, N); the output has
the same shape with values in [0, 1]. RA-BC weighting and rollout evaluation
only talk to this interface, so the learned estimator and the simulator's
ground truth are interchangeable.
"""

from __future__ import annotations

from typing import Mapping, Protocol, runtime_checkable

import numpy as np

from .errors import ValidationError
from .trajectory import Trajectory

DEFAULT_N = 9
DEFAULT_GAP = 30


@runtime_checkable
class ProgressPredictor(Protocol):
    name: str

    def predict(self, trajectory: Trajectory, windows: np.ndarray, task_id: str | None = None) -> np.ndarray: ...


def anchor_windows(ends, n_frames: int = DEFAULT_N, gap: int = DEFAULT_GAP) -> np.ndarray:
    """Windows whose last frame is each entry of ``ends``.

    Position 0 is always the episode start; positions 1..N-1 step back from
    the end by ``gap``. Indices that would fall before the start clamp to 0.
    """
    ends = np.atleast_1d(np.asarray(ends, dtype=np.int64))
    offsets = np.arange(n_frames - 2, -1, -1) * gap
    tail = np.maximum(ends[:, None] - offsets[None, :], 0)
    return np.concatenate([np.zeros((len(ends), 1), dtype=np.int64), tail], axis=1)


def predict_progress(predictor: ProgressPredictor, trajectory: Trajectory, windows, task_id: str | None = None) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.int64)
    squeeze = windows.ndim == 1
    if squeeze:
        windows = windows[None]
    if windows.size and (windows.min() < 0 or windows.max() >= len(trajectory)):
        raise ValidationError(f"{trajectory.id}: window index outside [0, {len(trajectory) - 1}]")
    out = np.clip(np.asarray(predictor.predict(trajectory, windows, task_id), dtype=np.float64), 0.0, 1.0)
    return out[0] if squeeze else out


def progress_at(predictor: ProgressPredictor, trajectory: Trajectory, ends, n_frames: int = DEFAULT_N, gap: int = DEFAULT_GAP, task_id: str | None = None) -> np.ndarray:
    """Progress of the last frame of the anchor window ending at each time in ``ends``."""
    return predict_progress(predictor, trajectory, anchor_windows(ends, n_frames, gap), task_id)[:, -1]


def progress_trace(predictor: ProgressPredictor, trajectory: Trajectory, n_frames: int = DEFAULT_N, gap: int = DEFAULT_GAP, task_id: str | None = None) -> np.ndarray:
    return progress_at(predictor, trajectory, np.arange(len(trajectory)), n_frames, gap, task_id)


class OraclePredictor:
    """Looks up ground-truth progress by trajectory id."""

    name = "oracle"

    def __init__(self, ground_truth: Mapping[str, np.ndarray]):
        self.ground_truth = {k: np.asarray(v, dtype=np.float64) for k, v in ground_truth.items()}

    def predict(self, trajectory, windows, task_id=None):
        try:
            y = self.ground_truth[trajectory.id]
        except KeyError:
            raise ValidationError(f"oracle has no ground truth for {trajectory.id!r}") from None
        if task_id is not None and task_id != trajectory.task_id:
            return np.zeros(np.shape(windows))
        return y[windows]


class ConstantPredictor:
    def __init__(self, value: float = 0.0):
        self.value = float(value)
        self.name = f"constant-{self.value:g}"

    def predict(self, trajectory, windows, task_id=None):
        return np.full(np.shape(windows), self.value)


class OffsetPredictor:
    """Wraps another predictor and adds a constant; test helper for metric checks."""

    def __init__(self, base: ProgressPredictor, offset: float):
        self.base = base
        self.offset = offset
        self.name = f"{base.name}+{offset:g}"

    def predict(self, trajectory, windows, task_id=None):
        return self.base.predict(trajectory, windows, task_id) + self.offset
