"""Trajectories, annotation protocols, annotation validation and dataset splits."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

REASON_SCHEME = "scheme mismatch"
REASON_INCOMPLETE = "incomplete sequence"
REASON_ORDER = "out of protocol order"
REASON_COVERAGE = "coverage gap or overlap"
REASON_EMPTY_SEGMENT = "zero-length segment"
REASON_MISTAKE = "contains mistake"


@dataclass(frozen=True)
class Frame:
    index: int
    time_s: float
    features: np.ndarray
    joint_state: np.ndarray | None = None
    action: np.ndarray | None = None


@dataclass(eq=False)
class Trajectory:
    """A timestamped frame sequence stored column-wise.

    ``features`` is (T, D); ``joint_state`` and ``action`` are (T, J) and
    (T, A) or ``None``. Frame ``i`` sits at ``i / fps`` seconds.
    """

    id: str
    task_id: str
    fps: int
    features: np.ndarray
    joint_state: np.ndarray | None = None
    action: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValidationError(f"{self.id}: features must be 2-D, got shape {self.features.shape}")
        if int(self.fps) != self.fps or self.fps <= 0:
            raise ValidationError(f"{self.id}: fps must be a positive integer, got {self.fps}")
        self.fps = int(self.fps)
        if len(self.features) < 2:
            raise ValidationError(f"{self.id}: a trajectory needs at least 2 frames")
        for name in ("joint_state", "action"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2 or len(arr) != len(self.features):
                raise ValidationError(f"{self.id}: {name} shape {arr.shape} does not match {len(self.features)} frames")
            setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def T(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.T) / self.fps

    def frame(self, i: int) -> Frame:
        return Frame(
            index=i,
            time_s=i / self.fps,
            features=self.features[i],
            joint_state=None if self.joint_state is None else self.joint_state[i],
            action=None if self.action is None else self.action[i],
        )

    @property
    def frames(self) -> list[Frame]:
        return [self.frame(i) for i in range(self.T)]

    @classmethod
    def from_frames(cls, id: str, task_id: str, fps: int, frames: Sequence[Frame]) -> "Trajectory":
        for pos, fr in enumerate(frames):
            if fr.index != pos:
                raise ValidationError(f"{id}: frame indices must be contiguous from 0 (position {pos} has {fr.index})")

        def stack(name):
            vals = [getattr(fr, name) for fr in frames]
            if all(v is None for v in vals):
                return None
            if any(v is None for v in vals):
                raise ValidationError(f"{id}: {name} present on some frames only")
            try:
                return np.stack([np.asarray(v, dtype=np.float64) for v in vals])
            except ValueError as exc:
                raise ValidationError(f"{id}: inconsistent {name} dimensions") from exc

        feats = stack("features")
        if feats is None:
            raise ValidationError(f"{id}: frames carry no features")
        return cls(id, task_id, fps, feats, stack("joint_state"), stack("action"))


@dataclass(frozen=True)
class AnnotationProtocol:
    scheme_id: str
    subtasks: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "subtasks", tuple(self.subtasks))
        if not self.subtasks:
            raise ValidationError("a protocol needs at least one subtask")
        if len(set(self.subtasks)) != len(self.subtasks):
            raise ValidationError(f"protocol {self.scheme_id!r} has duplicate subtask labels")

    @property
    def K(self) -> int:
        return len(self.subtasks)


SPARSE_TSHIRT = AnnotationProtocol(
    "sparse",
    (
        "grab the t-shirt from the pile",
        "move the t-shirt to the center",
        "flatten the t-shirt out",
        "fold the t-shirt",
        "put folded t-shirt into corner",
    ),
)


@dataclass(frozen=True)
class Segment:
    label: str
    start: int
    end: int  # inclusive

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class TrajectoryAnnotation:
    trajectory_id: str
    scheme_id: str
    segments: tuple[Segment, ...]
    mistakes: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(Segment(*s) if not isinstance(s, Segment) else s for s in self.segments))
        object.__setattr__(self, "mistakes", tuple((int(a), int(b)) for a, b in self.mistakes))

    def lengths(self) -> np.ndarray:
        return np.array([s.length for s in self.segments], dtype=np.int64)


@dataclass(frozen=True)
class Verdict:
    valid: bool
    reasons: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.valid


def validate_annotation(annotation: TrajectoryAnnotation, protocol: AnnotationProtocol, trajectory: Trajectory) -> Verdict:
    """Check that an annotation is usable for progress labeling.

    An annotation is valid when its segments are exactly the protocol's
    subtasks in order, tile ``[0, T-1]`` with inclusive bounds, every segment
    spans at least two frames, and no mistake was recorded. A mismatched
    trajectory id is a caller bug and raises instead of returning a verdict.
    """
    if annotation.trajectory_id != trajectory.id:
        raise ValidationError(
            f"annotation for {annotation.trajectory_id!r} paired with trajectory {trajectory.id!r}"
        )
    reasons: list[str] = []
    if annotation.scheme_id != protocol.scheme_id:
        reasons.append(REASON_SCHEME)

    labels = tuple(s.label for s in annotation.segments)
    if labels != protocol.subtasks:
        if len(labels) < protocol.K and set(labels) <= set(protocol.subtasks):
            reasons.append(REASON_INCOMPLETE)
        elif sorted(labels) == sorted(protocol.subtasks):
            reasons.append(REASON_ORDER)
        else:
            reasons.append(REASON_INCOMPLETE)

    segs = annotation.segments
    if segs:
        expected_start = 0
        covered = True
        for s in segs:
            if s.start != expected_start:
                covered = False
            expected_start = s.end + 1
        if segs[-1].end != trajectory.T - 1:
            covered = False
        if not covered:
            reasons.append(REASON_COVERAGE)
        if any(s.end <= s.start for s in segs):
            reasons.append(REASON_EMPTY_SEGMENT)
    if annotation.mistakes:
        reasons.append(REASON_MISTAKE)
    return Verdict(not reasons, tuple(reasons))


@dataclass
class FilterReport:
    kept: list[str]
    rejected: dict[str, tuple[str, ...]]

    def to_dict(self) -> dict:
        return {"kept": list(self.kept), "rejected": {k: list(v) for k, v in self.rejected.items()}}


def _index_unique(items, key, what):
    out = {}
    for it in items:
        k = key(it)
        if k in out:
            raise ValidationError(f"duplicate {what} id {k!r}")
        out[k] = it
    return out


def filter_dataset(
    annotations: Iterable[TrajectoryAnnotation],
    protocol: AnnotationProtocol,
    trajectories: Iterable[Trajectory],
) -> FilterReport:
    """Validate every annotation; keep the valid ids in input order and report the rest."""
    annotations = list(annotations)
    by_id = _index_unique(trajectories, lambda t: t.id, "trajectory")
    _index_unique(annotations, lambda a: a.trajectory_id, "annotation")
    kept, rejected = [], {}
    for ann in annotations:
        if ann.trajectory_id not in by_id:
            raise ValidationError(f"annotation references unknown trajectory {ann.trajectory_id!r}")
        verdict = validate_annotation(ann, protocol, by_id[ann.trajectory_id])
        if verdict:
            kept.append(ann.trajectory_id)
        else:
            rejected[ann.trajectory_id] = verdict.reasons
    return FilterReport(kept, rejected)


def _stable_seed(*parts) -> list[int]:
    """Turn mixed str/int parts into SeedSequence entropy, stable across platforms."""
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:8], "little"))
        else:
            out.append(int(p))
    return out


def derive_rng(*parts) -> np.random.Generator:
    """A PCG64 generator keyed on (seed, name, index, ...) tuples."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_stable_seed(*parts))))


def split_dataset(ids: Sequence[str], holdout_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministic train/test partition.

    The test set has ``round(holdout_fraction * len(ids))`` members; both
    parts keep the input order.
    """
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValidationError(f"holdout_fraction must lie in [0, 1), got {holdout_fraction}")
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("split_dataset received duplicate ids")
    n_test = int(round(holdout_fraction * len(ids)))
    perm = derive_rng(seed, "split").permutation(len(ids))
    test_pos = set(perm[:n_test].tolist())
    train = [x for i, x in enumerate(ids) if i not in test_pos]
    test = [x for i, x in enumerate(ids) if i in test_pos]
    return train, test
