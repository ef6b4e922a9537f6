"""Subtask prior proportions and frame-wise normalized progress targets."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .trajectory import AnnotationProtocol, FilterReport, Trajectory, TrajectoryAnnotation, filter_dataset


@dataclass(frozen=True)
class PriorProfile:
    """Mean temporal proportion of each subtask and their prefix sums.

    ``cumulative`` has K + 1 entries: 0, alpha_1, alpha_1 + alpha_2, ..., 1.
    """

    scheme_id: str
    alpha: np.ndarray
    cumulative: np.ndarray
    M: int = 0

    @property
    def K(self) -> int:
        return len(self.alpha)

    @classmethod
    def from_alpha(cls, scheme_id: str, alpha: Sequence[float], M: int = 0) -> "PriorProfile":
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.ndim != 1 or len(alpha) == 0:
            raise ValidationError("alpha must be a non-empty vector")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-9:
            raise ValidationError(f"alpha must be nonnegative and sum to 1, got sum {alpha.sum()!r}")
        cumulative = np.concatenate([[0.0], np.cumsum(alpha)])
        cumulative[-1] = 1.0
        return cls(scheme_id, alpha, cumulative, M)

    def to_dict(self) -> dict:
        return {
            "scheme_id": self.scheme_id,
            "alpha": self.alpha.tolist(),
            "cumulative": self.cumulative.tolist(),
            "M": int(self.M),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorProfile":
        alpha = np.asarray(d["alpha"], dtype=np.float64)
        cumulative = np.asarray(d["cumulative"], dtype=np.float64)
        if len(cumulative) != len(alpha) + 1:
            raise ValidationError("priors: cumulative must have K + 1 entries")
        return cls(d["scheme_id"], alpha, cumulative, int(d.get("M", 0)))

    def compose(self, stage: np.ndarray, tau: np.ndarray) -> np.ndarray:
        """Global progress from 1-based stage indices and within-stage progress.

        Values are capped at ``P[k]`` and ``tau == 1`` maps to ``P[k]`` itself,
        so the forced ``P[K] = 1`` cannot be overshot by rounding.
        """
        stage = np.asarray(stage)
        tau = np.asarray(tau, dtype=np.float64)
        upper = self.cumulative[stage]
        y = np.minimum(self.cumulative[stage - 1] + self.alpha[stage - 1] * tau, upper)
        return np.where(tau == 1.0, upper, y)


@dataclass(frozen=True)
class ProgressLabels:
    """Per-frame labels of one trajectory, stored column-wise."""

    trajectory_id: str
    stage: np.ndarray  # 1-based
    tau: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def rows(self) -> list[dict]:
        return [
            {"t": t, "stage_k": int(k), "tau": float(tau), "y": float(y)}
            for t, (k, tau, y) in enumerate(zip(self.stage, self.tau, self.y))
        ]


def compute_priors(annotations: Iterable[TrajectoryAnnotation], trajectories: Mapping[str, Trajectory] | Iterable[Trajectory]) -> PriorProfile:
    """Average each subtask's share of trajectory duration over the dataset.

    Segment lengths and trajectory lengths are integers, so the mean is
    accumulated as an exact rational and rounded once. The result is
    therefore independent of the order of ``annotations``.
    """
    annotations = list(annotations)
    if not annotations:
        raise ValidationError("compute_priors needs at least one annotation")
    schemes = {a.scheme_id for a in annotations}
    if len(schemes) != 1:
        raise ValidationError(f"compute_priors received mixed schemes {sorted(schemes)}")
    lengths = _trajectory_lengths(trajectories)
    K = len(annotations[0].segments)
    sums = [Fraction(0)] * K
    for ann in annotations:
        if len(ann.segments) != K:
            raise ValidationError(f"{ann.trajectory_id}: expected {K} segments, got {len(ann.segments)}")
        if ann.trajectory_id not in lengths:
            raise ValidationError(f"no trajectory for annotation {ann.trajectory_id!r}")
        T = lengths[ann.trajectory_id]
        sums = [acc + Fraction(int(L), T) for acc, L in zip(sums, ann.lengths())]
    M = len(annotations)
    alpha = np.array([float(acc / M) for acc in sums])
    return PriorProfile.from_alpha(schemes.pop(), alpha, M=M)


def _trajectory_lengths(trajectories) -> dict[str, int]:
    if isinstance(trajectories, Mapping):
        return {k: len(v) if not isinstance(v, int) else v for k, v in trajectories.items()}
    return {t.id: len(t) for t in trajectories}


def label_trajectory(annotation: TrajectoryAnnotation, trajectory: Trajectory | int, priors: PriorProfile) -> ProgressLabels:
    """Label every frame with ``y = P[k-1] + alpha[k] * tau``.

    ``tau`` is the inclusive-bounds position inside the frame's segment, so
    segment starts map to ``P[k-1]`` and segment ends to ``P[k]``.
    """
    T = trajectory if isinstance(trajectory, int) else len(trajectory)
    if annotation.scheme_id != priors.scheme_id:
        raise ValidationError(
            f"{annotation.trajectory_id}: annotation scheme {annotation.scheme_id!r} vs priors {priors.scheme_id!r}"
        )
    if len(annotation.segments) != priors.K:
        raise ValidationError(f"{annotation.trajectory_id}: {len(annotation.segments)} segments for K={priors.K} priors")
    stage = np.zeros(T, dtype=np.int64)
    tau = np.zeros(T, dtype=np.float64)
    for k, seg in enumerate(annotation.segments, start=1):
        if seg.end <= seg.start:
            raise ValidationError(f"{annotation.trajectory_id}: zero-length segment {seg.label!r} at frame {seg.start}")
        if seg.start < 0 or seg.end >= T:
            raise ValidationError(f"{annotation.trajectory_id}: segment {seg.label!r} outside [0, {T - 1}]")
        t = np.arange(seg.start, seg.end + 1)
        stage[t] = k
        tau[t] = (t - seg.start) / (seg.end - seg.start)
    if np.any(stage == 0):
        raise ValidationError(f"{annotation.trajectory_id}: frames not covered by any segment")
    y = priors.compose(stage, tau)
    return ProgressLabels(annotation.trajectory_id, stage, tau, y)


@dataclass
class LabelSummary:
    n_trajectories: int
    frames_per_stage: list[int]

    def to_dict(self) -> dict:
        return {"n_trajectories": self.n_trajectories, "frames_per_stage": list(self.frames_per_stage)}


def label_dataset(
    annotations: Iterable[TrajectoryAnnotation],
    trajectories: Mapping[str, Trajectory],
    priors: PriorProfile,
) -> tuple[dict[str, ProgressLabels], LabelSummary]:
    """Label each annotated trajectory; output is keyed and ordered by trajectory id."""
    out: dict[str, ProgressLabels] = {}
    counts = np.zeros(priors.K, dtype=np.int64)
    for ann in sorted(annotations, key=lambda a: a.trajectory_id):
        try:
            traj = trajectories[ann.trajectory_id]
            labels = label_trajectory(ann, traj, priors)
        except KeyError:
            raise ValidationError(f"no trajectory for annotation {ann.trajectory_id!r}") from None
        except ValidationError as exc:
            raise ValidationError(f"labeling failed for {ann.trajectory_id!r}: {exc}") from exc
        out[ann.trajectory_id] = labels
        counts += np.bincount(labels.stage - 1, minlength=priors.K)
    return out, LabelSummary(len(out), counts.tolist())


@dataclass
class LabeledDataset:
    filter_report: FilterReport
    priors: PriorProfile
    labels: dict[str, ProgressLabels]
    summary: LabelSummary


def prepare_labels(
    annotations: Iterable[TrajectoryAnnotation],
    protocol: AnnotationProtocol,
    trajectories: Mapping[str, Trajectory],
) -> LabeledDataset:
    """Filter, estimate priors on the kept set, and label the kept trajectories."""
    annotations = list(annotations)
    report = filter_dataset(annotations, protocol, trajectories.values())
    if not report.kept:
        raise ValidationError("no annotation survived filtering; cannot estimate priors")
    keep = set(report.kept)
    kept = [a for a in annotations if a.trajectory_id in keep]
    priors = compute_priors(kept, trajectories)
    labels, summary = label_dataset(kept, trajectories, priors)
    return LabeledDataset(report, priors, labels, summary)
