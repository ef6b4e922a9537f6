"""Reward-aligned weighting: progress deltas, running statistics, soft and override weights."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .predictors import DEFAULT_GAP, DEFAULT_N, ProgressPredictor, progress_at
from .trajectory import Trajectory

log = logging.getLogger(__name__)


@dataclass
class RunningStats:
    """Welford accumulator: count, mean and sum of squared deviations."""

    n: int = 0
    mean: float = 0.0
    M2: float = 0.0

    def update(self, x: float) -> "RunningStats":
        x = float(x)
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.M2 += delta * (x - self.mean)
        return self

    def extend(self, xs: Iterable[float]) -> "RunningStats":
        for x in xs:
            self.update(x)
        return self

    @property
    def variance(self) -> float:
        # sample convention; zero until two observations exist
        return self.M2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(max(self.variance, 0.0))

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "M2": self.M2, "std": self.std}


def welford_update(stats: RunningStats, x: float) -> RunningStats:
    return replace(stats).update(x)


def welford_merge(a: RunningStats, b: RunningStats) -> RunningStats:
    """Combine two partial accumulators (pairwise combination of counts, means and M2)."""
    if a.n == 0:
        return replace(b)
    if b.n == 0:
        return replace(a)
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = a.mean + delta * b.n / n
    M2 = a.M2 + b.M2 + delta * delta * a.n * b.n / n
    return RunningStats(n, mean, M2)


@dataclass(frozen=True)
class WeightConfig:
    kappa: float = 0.01
    eps_div: float = 1e-6
    eps_var: float = 1e-6
    delta: int = 25

    def __post_init__(self):
        if self.kappa <= 0 or self.eps_div <= 0 or self.eps_var <= 0:
            raise ValidationError("kappa and both epsilons must be > 0")
        if self.delta < 1:
            raise ValidationError("chunk stride delta must be >= 1")


def soft_weight(r_hat, mu: float, sigma: float, eps_var: float = 1e-6):
    """Linear ramp from 0 at ``mu - 2 sigma`` to 1 at ``mu + 2 sigma``; ``mu`` is clamped at 0 first."""
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    mu = max(mu, 0.0)
    w = (np.asarray(r_hat, dtype=np.float64) - (mu - 2.0 * sigma)) / (4.0 * sigma + eps_var)
    w = np.clip(w, 0.0, 1.0)
    return float(w) if np.ndim(w) == 0 else w


def apply_prior(r_hat, w_tilde, kappa: float = 0.01):
    """1 above kappa, 0 for negative deltas, the soft weight in between."""
    if kappa <= 0:
        raise ValidationError("kappa must be > 0")
    r = np.asarray(r_hat, dtype=np.float64)
    w = np.where(r > kappa, 1.0, np.where(r >= 0.0, w_tilde, 0.0))
    return float(w) if np.ndim(w) == 0 else w


def compute_weights(r_hat, stats: RunningStats, config: WeightConfig):
    return apply_prior(r_hat, soft_weight(r_hat, stats.mean, stats.std, config.eps_var), config.kappa)


def weighted_loss(losses, weights, eps_div: float = 1e-6) -> float:
    """``sum(w * l) / (sum(w) + eps)``."""
    losses = np.asarray(losses, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if losses.shape != weights.shape:
        raise ValidationError(f"{losses.shape} losses vs {weights.shape} weights")
    return float(np.sum(weights * losses) / (np.sum(weights) + eps_div))


def chunk_starts(T: int, delta: int) -> np.ndarray:
    """Chunk boundaries t = 0, delta, 2 delta, ... with t + delta still inside the trajectory."""
    return np.arange(0, max(T - delta, 0), delta)


def progress_delta(predictor: ProgressPredictor, trajectory: Trajectory, t, delta: int, n_frames: int = DEFAULT_N, gap: int = DEFAULT_GAP):
    """Progress of the window ending at ``t + delta`` minus that of the window ending at ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t < 0) or np.any(t + delta > len(trajectory) - 1):
        raise ValidationError(f"{trajectory.id}: chunk at {t.tolist()} + {delta} leaves [0, {len(trajectory) - 1}]")
    ends = np.concatenate([t, t + delta])
    phi = progress_at(predictor, trajectory, ends, n_frames, gap)
    r = phi[len(t):] - phi[: len(t)]
    return r


@dataclass
class WeightRow:
    trajectory_id: str
    t: int
    r_hat: float
    w: float


@dataclass
class WeightTable:
    header: dict
    rows: list[WeightRow]
    stats: RunningStats
    skipped: list[tuple[str, int, str]] = field(default_factory=list)

    def lookup(self) -> dict[tuple[str, int], WeightRow]:
        return {(r.trajectory_id, r.t): r for r in self.rows}


def weight_dataset(
    predictor: ProgressPredictor,
    trajectories: Sequence[Trajectory],
    config: WeightConfig = WeightConfig(),
    n_frames: int = DEFAULT_N,
    gap: int = DEFAULT_GAP,
) -> WeightTable:
    """Offline pass: one row per chunk boundary.

    Deltas feed the running statistics in traversal order (trajectory order,
    then time); weights are then computed from the final statistics so the
    table does not depend on traversal order beyond float rounding.
    """
    stats = RunningStats()
    raw: list[tuple[str, int, float]] = []
    skipped = []
    for traj in trajectories:
        starts = chunk_starts(len(traj), config.delta)
        if len(starts) == 0:
            continue
        try:
            deltas = progress_delta(predictor, traj, starts, config.delta, n_frames, gap)
            pairs = list(zip(starts.tolist(), deltas.tolist()))
        except Exception:
            pairs = []
            for t in starts.tolist():
                try:
                    pairs.append((t, float(progress_delta(predictor, traj, t, config.delta, n_frames, gap)[0])))
                except Exception as exc:  # noqa: BLE001 - per-chunk isolation
                    log.warning("%s t=%d: predictor failed: %s", traj.id, t, exc)
                    skipped.append((traj.id, t, str(exc)))
        for t, r in pairs:
            stats.update(r)
            raw.append((traj.id, t, r))
    rows = []
    if raw:
        r_all = np.array([r for _, _, r in raw])
        w_all = np.atleast_1d(compute_weights(r_all, stats, config))
        rows = [WeightRow(tid, t, r, float(w)) for (tid, t, r), w in zip(raw, w_all)]
    header = {
        "kappa": config.kappa,
        "delta": config.delta,
        "eps_div": config.eps_div,
        "eps_var": config.eps_var,
        "predictor": getattr(predictor, "name", type(predictor).__name__),
        "stats": stats.to_dict(),
    }
    return WeightTable(header, rows, stats, skipped)
