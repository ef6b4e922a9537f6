"""Fixed-length training windows with rewind augmentation and instruction perturbation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import TrajectoryTooShort, ValidationError
from .labeling import ProgressLabels
from .trajectory import Trajectory, derive_rng


@dataclass(frozen=True)
class SamplerConfig:
    N: int = 9
    G: int = 30
    R_max: int = 4
    p_rewind: float = 0.5
    p_perturb: float = 0.1
    seed: int = 0
    min_length_policy: str = "error"  # or "shrink-gap"

    def __post_init__(self):
        if self.N < 2 or self.G < 1:
            raise ValidationError(f"need N >= 2 and G >= 1, got N={self.N}, G={self.G}")
        if not 0 <= self.R_max < self.N:
            raise ValidationError(f"R_max must lie in [0, N), got {self.R_max}")
        for p in (self.p_rewind, self.p_perturb):
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"probabilities must lie in [0, 1], got {p}")
        if self.min_length_policy not in ("error", "shrink-gap"):
            raise ValidationError(f"unknown min_length_policy {self.min_length_policy!r}")

    def min_length(self, gap: int | None = None) -> int:
        return (self.N - 1) * (gap or self.G) + 1


@dataclass(frozen=True)
class SequenceSample:
    trajectory_id: str
    frame_indices: np.ndarray
    features: np.ndarray
    joint_states: np.ndarray | None
    stage_targets: np.ndarray  # 1-based
    tau_targets: np.ndarray
    progress_targets: np.ndarray
    rewind_mask: np.ndarray
    instruction_match: bool
    task_id_presented: str

    def to_dict(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id,
            "frame_indices": self.frame_indices.tolist(),
            "targets": self.progress_targets.tolist(),
            "stage_targets": self.stage_targets.tolist(),
            "rewind_mask": self.rewind_mask.tolist(),
            "instruction_match": self.instruction_match,
            "task_id_presented": self.task_id_presented,
        }


def sample_rng(seed: int, trajectory_id: str, draw_index: int) -> np.random.Generator:
    """Per-draw stream so parallel workers reproduce serial sampling."""
    return derive_rng(seed, "sample", trajectory_id, draw_index)


def _gather(trajectory: Trajectory, labels: ProgressLabels, idx: np.ndarray, **kw) -> SequenceSample:
    return SequenceSample(
        trajectory_id=trajectory.id,
        frame_indices=idx,
        features=trajectory.features[idx],
        joint_states=None if trajectory.joint_state is None else trajectory.joint_state[idx],
        stage_targets=labels.stage[idx],
        tau_targets=labels.tau[idx],
        progress_targets=labels.y[idx],
        rewind_mask=kw.get("rewind_mask", np.zeros(len(idx), dtype=bool)),
        instruction_match=kw.get("instruction_match", True),
        task_id_presented=kw.get("task_id_presented", trajectory.task_id),
    )


def effective_gap(T: int, config: SamplerConfig) -> int:
    if T >= config.min_length():
        return config.G
    if config.min_length_policy == "shrink-gap" and T >= config.N:
        return (T - 1) // (config.N - 1)
    raise TrajectoryTooShort(f"trajectory of {T} frames is too short for N={config.N}, G={config.G} (needs {config.min_length()})")


def sample_sequence(trajectory: Trajectory, labels: ProgressLabels, config: SamplerConfig, rng: np.random.Generator) -> SequenceSample:
    """Episode start at position 0, then N-1 frames spaced G apart from a random start.

    The start ``a`` is uniform over ``1 .. T-1-(N-2)G``.
    """
    T = len(trajectory)
    if len(labels) != T:
        raise ValidationError(f"{trajectory.id}: {len(labels)} labels for {T} frames")
    gap = effective_gap(T, config)
    a = int(rng.integers(1, T - (config.N - 2) * gap))
    idx = np.concatenate([[0], a + np.arange(config.N - 1) * gap]).astype(np.int64)
    return _gather(trajectory, labels, idx)


def rewind_augment(sample: SequenceSample, trajectory: Trajectory, labels: ProgressLabels, config: SamplerConfig, rng: np.random.Generator, r: int | None = None) -> SequenceSample:
    """Replace the last r positions with earlier frames in reverse time order.

    With probability ``p_rewind`` (or always, when ``r`` is given) the suffix
    is rewritten as f - G, f - 2G, ... where f is the last kept frame. ``r``
    is cut down so no source frame precedes the episode start; if nothing
    earlier exists the sample comes back unchanged.
    """
    if sample.rewind_mask.any():
        raise ValidationError("sample already rewound")
    if r is None:
        if config.R_max == 0 or rng.random() >= config.p_rewind:
            return sample
        r = int(rng.integers(1, config.R_max + 1))
    N = len(sample.frame_indices)
    if not 0 <= r < N:
        raise ValidationError(f"rewind length {r} outside [0, {N})")
    gap = int(sample.frame_indices[2] - sample.frame_indices[1]) if N > 2 else config.G
    last_kept = int(sample.frame_indices[N - 1 - r])
    r = min(r, last_kept // gap)
    if r == 0:
        return sample
    src = last_kept - gap * np.arange(1, r + 1)
    idx = np.concatenate([sample.frame_indices[: N - r], src]).astype(np.int64)
    mask = np.zeros(N, dtype=bool)
    mask[N - r:] = True
    return _gather(trajectory, labels, idx, rewind_mask=mask, instruction_match=sample.instruction_match, task_id_presented=sample.task_id_presented)


def perturb_instruction(sample: SequenceSample, task_vocabulary: Sequence[str], config: SamplerConfig, rng: np.random.Generator) -> SequenceSample:
    """Occasionally swap the task for a different one; mismatched samples target zero progress."""
    vocab = list(dict.fromkeys(task_vocabulary))
    if config.p_perturb > 0 and len(vocab) < 2:
        raise ValidationError("instruction perturbation needs at least two task ids")
    if config.p_perturb == 0 or rng.random() >= config.p_perturb:
        return sample
    others = [t for t in vocab if t != sample.task_id_presented]
    task = others[int(rng.integers(len(others)))]
    N = len(sample.frame_indices)
    return replace(
        sample,
        task_id_presented=task,
        instruction_match=False,
        stage_targets=np.ones(N, dtype=np.int64),
        tau_targets=np.zeros(N),
        progress_targets=np.zeros(N),
    )


def draw_sample(trajectory, labels, config: SamplerConfig, task_vocabulary: Sequence[str], rng) -> SequenceSample:
    s = sample_sequence(trajectory, labels, config, rng)
    s = rewind_augment(s, trajectory, labels, config, rng)
    if len(task_vocabulary) >= 2 or config.p_perturb > 0:
        s = perturb_instruction(s, task_vocabulary, config, rng)
    return s
