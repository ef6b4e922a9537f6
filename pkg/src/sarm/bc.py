"""Minimal behavior cloning over action chunks, uniform or reward-aligned."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NumericalError, SchemaError, ValidationError
from .gradcheck import GradCheckReport, check_gradients
from .predictors import DEFAULT_GAP, DEFAULT_N, ProgressPredictor
from .rabc import RunningStats, WeightConfig, chunk_starts, compute_weights, progress_delta, weight_dataset
from .trajectory import Trajectory, derive_rng

log = logging.getLogger(__name__)

POLICY_VERSION = "sarm-policy/1"
MODES = ("uniform", "ra-bc")


@dataclass
class PolicyModel:
    """``a = tanh(o @ W1 + b1) @ W2 + b2``."""

    params: dict[str, np.ndarray]
    seed: int = 0
    version: str = POLICY_VERSION

    @classmethod
    def init(cls, obs_dim: int, action_dim: int, width: int = 64, seed: int = 0) -> "PolicyModel":
        rng = derive_rng(seed, "policy-init")
        return cls(
            {
                "W1": rng.normal(0.0, 1.0 / math.sqrt(obs_dim), size=(obs_dim, width)),
                "b1": np.zeros(width),
                "W2": rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, action_dim)),
                "b2": np.zeros(action_dim),
            },
            seed,
        )

    @property
    def obs_dim(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def action_dim(self) -> int:
        return self.params["W2"].shape[1]

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.obs_dim:
            raise ValidationError(f"observation dim {obs.shape[-1]} != policy input {self.obs_dim}")
        return np.tanh(obs @ self.params["W1"] + self.params["b1"]) @ self.params["W2"] + self.params["b2"]

    def to_dict(self) -> dict:
        return {"version": self.version, "seed": self.seed, "params": {k: self.params[k].tolist() for k in sorted(self.params)}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicyModel":
        if d.get("version") != POLICY_VERSION:
            raise SchemaError(f"unsupported policy checkpoint version {d.get('version')!r}")
        return cls({k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()}, int(d.get("seed", 0)))

    def save(self, path) -> None:
        from .io import atomic_write

        atomic_write(path, json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PolicyModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class BCConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    delta: int = 25
    mode: str = "uniform"
    weighting: str = "online"  # or "offline"
    width: int = 64
    clip_norm: float = 10.0
    seed: int = 0
    kappa: float = 0.01
    eps_div: float = 1e-6
    eps_var: float = 1e-6
    n_frames: int = DEFAULT_N
    gap: int = DEFAULT_GAP

    def __post_init__(self):
        if self.delta < 1:
            raise ValidationError("delta must be >= 1")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.weighting not in ("online", "offline"):
            raise ValidationError("weighting must be 'online' or 'offline'")

    @property
    def weight_config(self) -> WeightConfig:
        return WeightConfig(self.kappa, self.eps_div, self.eps_var, self.delta)


@dataclass
class BCReport:
    mode: str
    weighting: str
    epoch_loss: list[float] = field(default_factory=list)
    weight_histograms: list[list[int]] = field(default_factory=list)
    final_stats: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _items(trajectories: Sequence[Trajectory], delta: int) -> list[tuple[int, int]]:
    out = []
    for i, traj in enumerate(trajectories):
        if traj.action is None:
            raise ValidationError(f"{traj.id}: behavior cloning needs actions")
        out += [(i, int(t)) for t in chunk_starts(len(traj), delta)]
    return out


def chunk_loss_and_grad(params, obs: np.ndarray, act: np.ndarray, weights: np.ndarray, eps_div: float):
    """Normalized weighted objective over chunk items and its parameter gradients.

    ``obs`` is (B, delta, D), ``act`` (B, delta, A); each item's loss is the
    mean over its frames of the squared action error.
    """
    B, L, _ = obs.shape
    pre = obs @ params["W1"] + params["b1"]
    hid = np.tanh(pre)
    out = hid @ params["W2"] + params["b2"]
    err = out - act
    item_loss = np.sum(err * err, axis=-1).mean(axis=-1)
    denom = np.sum(weights) + eps_div
    total = float(np.sum(weights * item_loss) / denom)
    dout = (weights / denom)[:, None, None] * (2.0 / L) * err
    n = B * L
    g = {
        "W2": hid.reshape(n, -1).T @ dout.reshape(n, -1),
        "b2": dout.sum(axis=(0, 1)),
    }
    dpre = (dout @ params["W2"].T) * (1.0 - hid**2)
    g["W1"] = obs.reshape(n, -1).T @ dpre.reshape(n, -1)
    g["b1"] = dpre.sum(axis=(0, 1))
    return total, g, item_loss


def gradient_check(policy: PolicyModel, obs, act, weights, eps_div: float = 1e-6, h: float = 1e-5, tolerance: float = 1e-4, n: int = 200, seed: int = 0, analytic=None) -> GradCheckReport:
    def fn(params):
        total, g, _ = chunk_loss_and_grad(params, obs, act, weights, eps_div)
        return total, g

    return check_gradients(fn, policy.params, h=h, n=n, tolerance=tolerance, seed=seed, analytic=analytic)


def train_bc(
    trajectories: Sequence[Trajectory],
    predictor: ProgressPredictor | None,
    config: BCConfig,
    pinned_weights: float | None = None,
    weight_override: Callable[[list[tuple[str, int]]], np.ndarray] | None = None,
) -> tuple[PolicyModel, BCReport]:
    """Train a policy on Delta-frame chunks.

    Uniform mode gives every item weight 1; ra-bc mode weighs items from the
    predictor's progress deltas. Online weighting recomputes deltas for each
    batch and streams them into the running statistics before weighting;
    offline weighting precomputes a weight table once. ``pinned_weights``
    forces a constant weight in ra-bc mode (used to check mode equivalence).
    Both modes go through the same normalized objective, so with weights of 1
    they take identical steps.
    """
    if config.mode == "ra-bc" and predictor is None and pinned_weights is None and weight_override is None:
        raise ValidationError("ra-bc mode requires a progress predictor")
    trajectories = list(trajectories)
    if not trajectories:
        raise ValidationError("train_bc needs at least one trajectory")
    items = _items(trajectories, config.delta)
    if not items:
        raise ValidationError(f"no trajectory is longer than delta={config.delta}")
    obs_dim = trajectories[0].feature_dim
    act_dim = trajectories[0].action.shape[1]
    policy = PolicyModel.init(obs_dim, act_dim, config.width, config.seed)
    velocity = {k: np.zeros_like(v) for k, v in policy.params.items()}
    wcfg = config.weight_config
    stats = RunningStats()
    report = BCReport(config.mode, config.weighting)

    table = None
    if config.mode == "ra-bc" and config.weighting == "offline" and pinned_weights is None and weight_override is None:
        table = weight_dataset(predictor, trajectories, wcfg, config.n_frames, config.gap).lookup()
        stats = None

    offs = np.arange(config.delta)
    for epoch in range(config.epochs):
        order = derive_rng(config.seed, "bc-shuffle", epoch).permutation(len(items))
        losses, weights_seen = [], []
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = [items[i] for i in order[lo:lo + config.batch_size]]
            obs = np.stack([trajectories[i].features[t + offs] for i, t in batch])
            act = np.stack([trajectories[i].action[t + offs] for i, t in batch])
            if config.mode == "uniform":
                w = np.ones(len(batch))
            elif pinned_weights is not None:
                w = np.full(len(batch), float(pinned_weights))
            elif weight_override is not None:
                w = np.asarray(weight_override([(trajectories[i].id, t) for i, t in batch]), dtype=np.float64)
            elif table is not None:
                w = np.array([table[(trajectories[i].id, t)].w if (trajectories[i].id, t) in table else 0.0 for i, t in batch])
            else:
                r = np.empty(len(batch))
                for j, (i, t) in enumerate(batch):
                    r[j] = progress_delta(predictor, trajectories[i], t, config.delta, config.n_frames, config.gap)[0]
                stats.extend(r)
                w = np.atleast_1d(compute_weights(r, stats, wcfg))
            total, grads, _ = chunk_loss_and_grad(policy.params, obs, act, w, config.eps_div)
            if not math.isfinite(total):
                norms = {k: float(np.linalg.norm(v)) for k, v in policy.params.items()}
                raise NumericalError(f"non-finite BC loss at epoch {epoch} batch {b}; parameter norms {norms}")
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = config.clip_norm / norm if config.clip_norm and norm > config.clip_norm else 1.0
            for k in policy.params:
                velocity[k] = config.momentum * velocity[k] + scale * grads[k]
                policy.params[k] -= config.learning_rate * velocity[k]
            losses.append(total)
            weights_seen.append(w)
        report.epoch_loss.append(float(np.mean(losses)))
        if config.mode == "ra-bc":
            hist, _ = np.histogram(np.concatenate(weights_seen), bins=10, range=(0.0, 1.0))
            report.weight_histograms.append(hist.tolist())
        log.info("bc epoch %d (%s): loss=%.5f", epoch, config.mode, report.epoch_loss[-1])
    if stats is not None and config.mode == "ra-bc":
        report.final_stats = stats.to_dict()
    return policy, report


def eval_policy(policy: PolicyModel, trajectories: Sequence[Trajectory]) -> float:
    """Mean over frames of the squared action error norm."""
    total, count = 0.0, 0
    for traj in trajectories:
        if traj.action is None:
            raise ValidationError(f"{traj.id}: evaluation needs actions")
        if traj.action.shape[1] != policy.action_dim:
            raise ValidationError(f"{traj.id}: action dim {traj.action.shape[1]} != policy output {policy.action_dim}")
        err = policy(traj.features) - traj.action
        total += math.fsum(np.sum(err * err, axis=1))
        count += len(traj)
    if count == 0:
        raise ValidationError("eval_policy needs at least one frame")
    return total / count
