"""Seeded synthetic multi-stage trajectories with ground-truth progress.

Every trajectory is built from a *path*: per-frame (stage, tau, action sign)
triples. Ground truth is ``y = P[stage-1] + alpha[stage-1] * tau`` under the
simulator's nominal prior profile; features, joint states and actions are
rendered from the path. Failure modes edit the path before rendering, which
keeps each injected failure visible in the ground-truth deltas.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import SimulationError, ValidationError
from .labeling import PriorProfile
from .trajectory import AnnotationProtocol, Segment, Trajectory, TrajectoryAnnotation, derive_rng

log = logging.getLogger(__name__)

FAILURE_KINDS = ("none", "stall", "regression", "misgrasp-retry", "premature-finish")
ROLLOUT_CLASSES = ("SE", "PSE", "FE")

# sparse T-shirt shares 5/5/25/55/10 % at the range midpoints
DEFAULT_STAGE_DURATIONS = ((12, 24), (12, 24), (60, 120), (132, 264), (26, 46))


@dataclass
class SimConfig:
    K: int = 5
    stage_durations: Sequence = DEFAULT_STAGE_DURATIONS
    fps: int = 30
    feature_dim: int = 16
    joint_dim: int = 6
    action_dim: int = 4
    obs_noise: float = 0.05
    failure_mix: Mapping[str, float] = field(
        default_factory=lambda: {"none": 0.0, "stall": 0.3, "regression": 0.3, "misgrasp-retry": 0.2, "premature-finish": 0.2}
    )
    max_failures: int = 2
    stall_frames: tuple[int, int] = (30, 90)
    regression_frames: tuple[int, int] = (30, 60)
    premature_stop: tuple[float, float] = (0.4, 0.8)
    task_id: str = "fold_tshirt"
    scheme_id: str = "sparse"
    subtasks: Sequence[str] | None = None
    seed: int = 0

    def __post_init__(self):
        durs = self.stage_durations
        if len(durs) == 2 and all(isinstance(x, (int, np.integer)) for x in durs):
            durs = (tuple(durs),) * self.K
        self.stage_durations = tuple((int(a), int(b)) for a, b in durs)
        if len(self.stage_durations) != self.K:
            raise ValidationError(f"stage_durations has {len(self.stage_durations)} ranges for K={self.K}")
        for lo, hi in self.stage_durations:
            if lo < 2 or hi < lo:
                raise ValidationError(f"bad stage duration range ({lo}, {hi}); need 2 <= min <= max")
        if self.feature_dim < self.K + 2:
            raise ValidationError(f"feature_dim must be >= K + 2 = {self.K + 2}")
        if self.obs_noise < 0:
            raise ValidationError("obs_noise must be >= 0")
        unknown = set(self.failure_mix) - set(FAILURE_KINDS)
        if unknown:
            raise ValidationError(f"unknown failure kinds {sorted(unknown)}")
        total = sum(self.failure_mix.values())
        if abs(total - 1.0) > 1e-9 or any(p < 0 for p in self.failure_mix.values()):
            raise ValidationError(f"failure_mix must be a probability vector, sums to {total}")
        if self.subtasks is None:
            self.subtasks = tuple(f"stage_{k + 1}" for k in range(self.K))
        self.subtasks = tuple(self.subtasks)

    @property
    def protocol(self) -> AnnotationProtocol:
        return AnnotationProtocol(self.scheme_id, self.subtasks)

    def nominal_priors(self) -> PriorProfile:
        """Ground-truth prior profile: stage-duration range midpoints, normalized."""
        mids = np.array([(lo + hi) / 2 for lo, hi in self.stage_durations])
        return PriorProfile.from_alpha(self.scheme_id, mids / mids.sum())


@dataclass
class FailureSegment:
    kind: str
    start: int
    end: int  # inclusive


@dataclass
class SimTrajectory:
    trajectory: Trajectory
    annotation: TrajectoryAnnotation
    y_true: np.ndarray
    quality: str
    failures: list[FailureSegment] = field(default_factory=list)

    @property
    def id(self) -> str:
        return self.trajectory.id


class ActionMap:
    """The data-generating expert policy: ``a = tanh(f @ W)`` on clean features."""

    def __init__(self, feature_dim: int, action_dim: int, task_id: str = "fold_tshirt", scale: float = 0.5):
        rng = derive_rng("action-map", task_id, feature_dim, action_dim)
        self.W = rng.normal(0.0, scale, size=(feature_dim, action_dim))

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return np.tanh(features @ self.W)


# ---------------------------------------------------------------- paths


@dataclass
class _Path:
    stage: np.ndarray  # 1-based
    tau: np.ndarray
    sign: np.ndarray  # +1 expert action, -1 reversed, 0 idle
    event: np.ndarray  # 0 = clean, else 1-based index into kinds
    kinds: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.stage)

    def insert(self, pos, stage, tau, sign, kind=None):
        """Insert frames after position ``pos``."""
        ev = 0
        if kind is not None:
            self.kinds.append(kind)
            ev = len(self.kinds)
        n = len(tau)
        stage = np.broadcast_to(stage, n)
        sign = np.broadcast_to(sign, n)
        evs = np.full(n, ev)
        at = pos + 1
        self.stage = np.concatenate([self.stage[:at], stage, self.stage[at:]])
        self.tau = np.concatenate([self.tau[:at], tau, self.tau[at:]])
        self.sign = np.concatenate([self.sign[:at], sign, self.sign[at:]])
        self.event = np.concatenate([self.event[:at], evs, self.event[at:]])

    def truncate(self, n):
        self.stage, self.tau, self.sign, self.event = (a[:n] for a in (self.stage, self.tau, self.sign, self.event))


def _expert_path(cfg: SimConfig, rng: np.random.Generator, stretch: float = 1.0) -> _Path:
    stages, taus = [], []
    for k, (lo, hi) in enumerate(cfg.stage_durations, start=1):
        L = int(rng.integers(lo, hi + 1))
        if stretch != 1.0:
            L = max(2, int(round(L * stretch)))
        stages.append(np.full(L, k))
        taus.append(np.arange(L) / (L - 1))
    stage = np.concatenate(stages)
    return _Path(stage, np.concatenate(taus), np.ones(len(stage)), np.zeros(len(stage), dtype=np.int64))


def _clean_positions(path: _Path, margin: int = 2) -> np.ndarray:
    n = len(path)
    ok = (path.event == 0) & np.r_[path.event[1:] == 0, True]
    ok[:margin] = False
    ok[max(n - margin, 0):] = False
    return np.flatnonzero(ok)


def _inject_stall(path, cfg, rng):
    cand = _clean_positions(path)
    if len(cand) == 0:
        return False
    p = int(rng.choice(cand))
    n = int(rng.integers(cfg.stall_frames[0], cfg.stall_frames[1] + 1))
    path.insert(p, path.stage[p], np.full(n, path.tau[p]), 0.0, "stall")
    return True


def _inject_regression(path, cfg, rng):
    cand = [p for p in _clean_positions(path) if path.tau[p] >= 0.3 and p + 1 < len(path) and path.stage[p + 1] == path.stage[p]]
    if not cand:
        return False
    p = int(rng.choice(cand))
    tau_a = path.tau[p]
    depth = tau_a * rng.uniform(0.5, 0.9)
    n = int(rng.integers(cfg.regression_frames[0], cfg.regression_frames[1] + 1))
    steps = np.arange(1, n + 1) / n
    down = tau_a - depth * steps
    up = tau_a - depth + depth * steps
    path.insert(p, path.stage[p], down, -1.0, "regression")
    path.insert(p + n, path.stage[p], up, 1.0)
    return True


def _inject_misgrasp(path, cfg, rng):
    cand = [p for p in _clean_positions(path) if path.tau[p] >= 0.1 and path.stage[min(p + 1, len(path) - 1)] == path.stage[p]]
    if not cand:
        return False
    p = int(rng.choice(cand))
    tau_a = path.tau[p]
    amp = min(tau_a, 0.1)
    cycles = int(rng.integers(2, 4))
    half = int(rng.integers(4, 11))
    steps = np.arange(1, half + 1) / half
    taus, signs = [], []
    for _ in range(cycles):
        taus += [tau_a - amp * steps, tau_a - amp + amp * steps]
        signs += [np.full(half, -1.0), np.full(half, 1.0)]
    path.insert(p, path.stage[p], np.concatenate(taus), np.concatenate(signs), "misgrasp-retry")
    return True


def _apply_premature_finish(path, cfg, rng, priors):
    y = priors.compose(path.stage, path.tau)
    y_stop = rng.uniform(*cfg.premature_stop)
    last = int(np.flatnonzero(y <= y_stop)[-1])
    path.truncate(max(last + 1, 2))
    n_idle = int(rng.integers(15, 46))
    p = len(path) - 1
    path.insert(p, path.stage[p], np.full(n_idle, path.tau[p]), 0.0, "premature-finish")


# ---------------------------------------------------------------- rendering


def _render(path: _Path, cfg: SimConfig, rng: np.random.Generator, traj_id: str, quality: str, annotate_mistakes=True) -> SimTrajectory:
    priors = cfg.nominal_priors()
    T = len(path)
    y = priors.compose(path.stage, path.tau)
    clean = np.zeros((T, cfg.feature_dim))
    clean[np.arange(T), path.stage - 1] = 1.0 + path.tau
    clean[:, cfg.K] = np.cos(2 * np.pi * y)
    clean[:, cfg.K + 1] = np.sin(2 * np.pi * y)
    actions = path.sign[:, None] * ActionMap(cfg.feature_dim, cfg.action_dim, cfg.task_id)(clean)
    noise = rng.normal(0.0, 1.0, size=clean.shape) * cfg.obs_noise
    features = clean + noise
    joint = None
    if cfg.joint_dim > 0:
        j = np.arange(cfg.joint_dim)
        joint = 0.5 * np.sin(np.pi * (j + 1) * y[:, None] + j)
        joint = joint + rng.normal(0.0, 1.0, size=joint.shape) * cfg.obs_noise
    traj = Trajectory(traj_id, cfg.task_id, cfg.fps, features, joint, actions)

    segments = []
    for k in range(1, cfg.K + 1):
        idx = np.flatnonzero(path.stage == k)
        if len(idx):
            segments.append(Segment(cfg.subtasks[k - 1], int(idx[0]), int(idx[-1])))
    failures = []
    for ev, kind in enumerate(path.kinds, start=1):
        idx = np.flatnonzero(path.event == ev)
        if len(idx):
            failures.append(FailureSegment(kind, int(idx[0]), int(idx[-1])))
    mistakes = tuple((f.start, f.end) for f in failures if f.kind in ("regression", "misgrasp-retry")) if annotate_mistakes else ()
    ann = TrajectoryAnnotation(traj_id, cfg.scheme_id, tuple(segments), mistakes)
    return SimTrajectory(traj, ann, y, quality, failures)


# ---------------------------------------------------------------- public API


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return derive_rng(int(rng))


def gen_expert(config: SimConfig, rng, traj_id: str = "expert") -> SimTrajectory:
    """A clean demonstration: every stage traversed once at uniform speed."""
    rng = _as_rng(rng)
    path = _expert_path(config, rng)
    return _render(path, config, rng, traj_id, "expert")


def gen_suboptimal(config: SimConfig, rng, traj_id: str = "suboptimal", kinds: Sequence[str] | None = None) -> SimTrajectory:
    """A demonstration with one or more injected failures.

    Failure kinds are drawn from ``config.failure_mix`` unless ``kinds`` is
    given. ``"none"`` yields a slow but clean demonstration (stretched stage
    durations). ``premature-finish`` cuts the task short and is applied first
    so later injections land inside the kept part.
    """
    rng = _as_rng(rng)
    if kinds is None:
        names = list(config.failure_mix)
        probs = np.array([config.failure_mix[n] for n in names])
        n_fail = int(rng.integers(1, config.max_failures + 1))
        kinds = [names[i] for i in rng.choice(len(names), size=n_fail, p=probs)]
    kinds = list(kinds)
    stretch = rng.uniform(1.5, 2.5) if "none" in kinds else 1.0
    path = _expert_path(config, rng, stretch=stretch)
    if "premature-finish" in kinds:
        _apply_premature_finish(path, config, rng, config.nominal_priors())
    injectors = {"stall": _inject_stall, "regression": _inject_regression, "misgrasp-retry": _inject_misgrasp}
    for kind in kinds:
        if kind in injectors and not injectors[kind](path, config, rng):
            log.debug("%s: no room to inject %s", traj_id, kind)
    return _render(path, config, rng, traj_id, "suboptimal")


def _struggle_tail(path: _Path, rng: np.random.Generator, n_tail: int):
    """Back-and-forth motion around the last reached state, never past it."""
    p = len(path) - 1
    k, tau_end = path.stage[p], path.tau[p]
    amp = min(tau_end, 0.3)
    taus, signs = [], []
    total = 0
    while total < n_tail:
        half = int(rng.integers(5, 16))
        depth = amp * rng.uniform(0.3, 1.0)
        steps = np.arange(1, half + 1) / half
        if amp > 0:
            taus += [tau_end - depth * steps, tau_end - depth + depth * steps]
            signs += [np.full(half, -1.0), np.full(half, 1.0)]
        else:
            taus += [np.full(2 * half, tau_end)]
            signs += [np.zeros(2 * half)]
        total += 2 * half
    tail_tau = np.concatenate(taus)[:n_tail]
    tail_sign = np.concatenate(signs)[:n_tail]
    path.insert(p, k, tail_tau, tail_sign, "struggle")


def se_rule(y: np.ndarray) -> bool:
    T = len(y)
    last_third = y[-(-2 * T // 3):]
    return bool(y[-1] > 0.8 and last_third.mean() > 0.6)


@dataclass
class RolloutBands:
    """Construction targets for each rollout class (ground-truth progress)."""

    pse_peak: tuple[float, float] = (0.4, 0.7)
    pse_min_mean: float = 0.3
    fe_peak: tuple[float, float] = (0.03, 0.15)
    fe_max_mean: float = 0.15
    tail_frames: tuple[int, int] = (120, 300)
    max_retries: int = 200


def _gen_rollout(config: SimConfig, cls: str, rng, traj_id: str, bands: RolloutBands) -> SimTrajectory:
    priors = config.nominal_priors()
    for _ in range(bands.max_retries):
        path = _expert_path(config, rng)
        if cls == "SE":
            if rng.random() < 0.5:
                _inject_misgrasp(path, config, rng)
            sim = _render(path, config, rng, traj_id, "rollout-SE")
            if se_rule(sim.y_true):
                return sim
            continue
        lo, hi = bands.pse_peak if cls == "PSE" else bands.fe_peak
        peak = rng.uniform(lo, hi)
        y = priors.compose(path.stage, path.tau)
        path.truncate(max(int(np.flatnonzero(y <= peak)[-1]) + 1, 2))
        _struggle_tail(path, rng, int(rng.integers(bands.tail_frames[0], bands.tail_frames[1] + 1)))
        sim = _render(path, config, rng, traj_id, f"rollout-{cls}")
        mean = sim.y_true.mean()
        if se_rule(sim.y_true):
            continue
        if cls == "PSE" and mean >= bands.pse_min_mean:
            return sim
        if cls == "FE" and mean <= bands.fe_max_mean:
            return sim
    raise SimulationError(f"could not build a {cls} rollout for {traj_id} in {bands.max_retries} tries (seed {config.seed})")


def gen_rollout_set(config: SimConfig, counts: Mapping[str, int], rng=None, bands: RolloutBands | None = None) -> list[SimTrajectory]:
    """Rollouts tagged SE / PSE / FE, checked against the classifier on ground truth.

    Each trace is built per its class band; when the PSE and FE counts are
    equal the whole set is additionally run through ``classify_rollouts``
    with oracle progress and must come back label-perfect.
    """
    from .evaluation import RolloutTrace, classify_rollouts

    bands = bands or RolloutBands()
    seed = config.seed if rng is None else rng
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63 - 1))
    for c in counts:
        if c not in ROLLOUT_CLASSES:
            raise ValidationError(f"unknown rollout class {c!r}")
        if counts[c] < 0:
            raise ValidationError("rollout counts must be >= 0")
    out = []
    i = 0
    for cls in ROLLOUT_CLASSES:
        for j in range(counts.get(cls, 0)):
            r = derive_rng(seed, "rollout", cls, j)
            out.append(_gen_rollout(config, cls, r, f"rollout_{i:03d}", bands))
            i += 1
    n_pse, n_fe = counts.get("PSE", 0), counts.get("FE", 0)
    if out and n_pse == n_fe:
        traces = [RolloutTrace(s.id, s.y_true, s.quality.split("-", 1)[1]) for s in out]
        report = classify_rollouts(traces)
        if report.labels != [t.truth for t in traces]:
            raise SimulationError(f"rollout set failed oracle classification check (seed {seed})")
    return out


def gen_trajectories(config: SimConfig, n_expert: int, n_suboptimal: int, seed: int | None = None) -> list[SimTrajectory]:
    """Experts first, then suboptimal trajectories; each from its own derived stream."""
    seed = config.seed if seed is None else seed
    out = []
    for i in range(n_expert + n_suboptimal):
        tid = f"traj_{i:05d}"
        r = derive_rng(seed, "trajectory", i)
        out.append(gen_expert(config, r, tid) if i < n_expert else gen_suboptimal(config, r, tid))
    return out
