"""Desk-scale stage-aware reward model with hand-written backpropagation.

Per frame, features (optionally joined with joint states) are projected to
``d_model``; only position 0 receives a learned positional bias. The window
context is the mean projection plus a task embedding. Each frame's head input
is ``[own projection | context | position-0 projection]``.

Per annotation scheme there is a twin pair of 2-layer tanh heads:

* stage head: K logits, softmax probabilities, argmax stage;
* subtask head: takes the head input plus the stage probabilities and emits
  a logistic within-stage progress.

Global progress uses the hard stage: ``y = P[S-1] + alpha[S] * tau``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericalError, SchemaError, ValidationError
from .gradcheck import GradCheckReport, check_gradients
from .labeling import PriorProfile, ProgressLabels
from .sampler import SamplerConfig, SequenceSample, draw_sample, sample_rng
from .trajectory import Trajectory, derive_rng

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "sarm-estimator/1"


@dataclass
class EstimatorConfig:
    K: int = 5
    feature_dim: int = 16
    joint_dim: int = 0
    use_joint_state: bool = False
    d_model: int = 32
    hidden: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 10.0
    batch_size: int = 32
    epochs: int = 10
    samples_per_trajectory: int = 4
    loss_mix: float = 1.0
    seed: int = 0
    scheme_id: str = "sparse"
    task_vocabulary: tuple[str, ...] = ("fold_tshirt",)

    def __post_init__(self):
        self.task_vocabulary = tuple(self.task_vocabulary)
        for name in ("K", "feature_dim", "d_model", "hidden", "batch_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.use_joint_state and self.joint_dim < 1:
            raise ValidationError("use_joint_state requires joint_dim >= 1")
        if not self.task_vocabulary:
            raise ValidationError("task_vocabulary must not be empty")

    @property
    def input_dim(self) -> int:
        return self.feature_dim + (self.joint_dim if self.use_joint_state else 0)


@dataclass
class EstimatorModel:
    config: EstimatorConfig
    params: dict[str, np.ndarray]
    heads: dict[str, int]
    priors: dict[str, PriorProfile] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: str = CHECKPOINT_VERSION

    def task_index(self, task_ids: Sequence[str]) -> np.ndarray:
        vocab = {t: i for i, t in enumerate(self.config.task_vocabulary)}
        try:
            return np.array([vocab[t] for t in task_ids], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"task id {exc.args[0]!r} not in the model vocabulary") from None


def init_model(config: EstimatorConfig, heads: Mapping[str, int] | None = None, priors: Mapping[str, PriorProfile] | None = None) -> EstimatorModel:
    heads = dict(heads or {config.scheme_id: config.K})
    rng = derive_rng(config.seed, "estimator-init")
    d, h = config.d_model, config.hidden

    def glorot(n_in, n_out):
        return rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))

    p = {
        "trunk.proj.W": glorot(config.input_dim, d),
        "trunk.proj.b": np.zeros(d),
        "trunk.pos0": rng.normal(0.0, 0.1, size=d),
        "trunk.task": rng.normal(0.0, 0.1, size=(len(config.task_vocabulary), d)),
    }
    for scheme, K in sorted(heads.items()):
        p[f"{scheme}.stage.W1"] = glorot(3 * d, h)
        p[f"{scheme}.stage.b1"] = np.zeros(h)
        p[f"{scheme}.stage.W2"] = glorot(h, K)
        p[f"{scheme}.stage.b2"] = np.zeros(K)
        p[f"{scheme}.subtask.W1"] = glorot(3 * d + K, h)
        p[f"{scheme}.subtask.b1"] = np.zeros(h)
        p[f"{scheme}.subtask.w2"] = glorot(h, 1).ravel().copy()
        p[f"{scheme}.subtask.b2"] = np.zeros(1)
    return EstimatorModel(config, p, heads, dict(priors or {}))


# ---------------------------------------------------------------- forward


@dataclass
class ForwardOutput:
    logits: np.ndarray  # (B, N, K)
    probs: np.ndarray  # (B, N, K)
    stage: np.ndarray  # (B, N), 1-based argmax
    tau: np.ndarray  # (B, N)
    y: np.ndarray | None  # (B, N) composed progress, when priors are given


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _inputs(model: EstimatorModel, features, joint_states=None) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    cfg = model.config
    if X.shape[-1] != cfg.feature_dim:
        raise ValidationError(f"feature dim {X.shape[-1]} != configured {cfg.feature_dim}")
    if cfg.use_joint_state:
        if joint_states is None:
            raise ValidationError("model expects joint states")
        J = np.asarray(joint_states, dtype=np.float64).reshape(X.shape[0], X.shape[1], -1)
        if J.shape[-1] != cfg.joint_dim:
            raise ValidationError(f"joint dim {J.shape[-1]} != configured {cfg.joint_dim}")
        X = np.concatenate([X, J], axis=-1)
    return X


def _forward(p, scheme, X, task_idx):
    B, N, _ = X.shape
    H = X @ p["trunk.proj.W"] + p["trunk.proj.b"]
    H[:, 0] += p["trunk.pos0"]
    C = H.mean(axis=1) + p["trunk.task"][task_idx]
    H0 = H[:, 0]
    Z = np.concatenate([H, np.broadcast_to(C[:, None], H.shape), np.broadcast_to(H0[:, None], H.shape)], axis=-1)
    A1 = np.tanh(Z @ p[f"{scheme}.stage.W1"] + p[f"{scheme}.stage.b1"])
    logits = A1 @ p[f"{scheme}.stage.W2"] + p[f"{scheme}.stage.b2"]
    probs = _softmax(logits)
    Zu = np.concatenate([Z, probs], axis=-1)
    A2 = np.tanh(Zu @ p[f"{scheme}.subtask.W1"] + p[f"{scheme}.subtask.b1"])
    u = A2 @ p[f"{scheme}.subtask.w2"] + p[f"{scheme}.subtask.b2"][0]
    tau = _sigmoid(u)
    cache = dict(X=X, task_idx=task_idx, Z=Z, A1=A1, probs=probs, Zu=Zu, A2=A2, tau=tau, logits=logits)
    return cache


def forward(
    model: EstimatorModel,
    features,
    priors: PriorProfile | None = None,
    joint_states=None,
    task_ids: Sequence[str] | None = None,
    scheme: str | None = None,
) -> ForwardOutput:
    """Stage logits, probabilities, argmax stage, within-stage and global progress.

    ``features`` is (B, N, D) or (N, D). Task ids default to the first
    vocabulary entry.
    """
    scheme = scheme or model.config.scheme_id
    if scheme not in model.heads:
        raise ValidationError(f"model has no head for scheme {scheme!r}")
    X = _inputs(model, features, joint_states)
    B = X.shape[0]
    task_idx = model.task_index(task_ids) if task_ids is not None else np.zeros(B, dtype=np.int64)
    if len(task_idx) != B:
        raise ValidationError(f"{len(task_idx)} task ids for a batch of {B}")
    c = _forward(model.params, scheme, X, task_idx)
    stage = c["probs"].argmax(axis=-1) + 1
    y = None
    if priors is not None:
        if priors.K != model.heads[scheme]:
            raise ValidationError(f"priors have K={priors.K}, head {scheme!r} has K={model.heads[scheme]}")
        y = priors.compose(stage, c["tau"])
    return ForwardOutput(c["logits"], c["probs"], stage, c["tau"], y)


# ---------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    total: float
    stage_ce: float
    subtask_mse: float


def _cross_entropy(logits, target0):
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -np.take_along_axis(logp, target0[..., None], axis=-1).mean()


def loss(outputs: ForwardOutput, stage_targets, tau_targets, loss_mix: float = 1.0) -> LossBreakdown:
    """Cross-entropy on stages plus ``loss_mix`` times MSE on within-stage progress."""
    target0 = np.asarray(stage_targets, dtype=np.int64).reshape(outputs.tau.shape) - 1
    ce = float(_cross_entropy(outputs.logits, target0))
    mse = float(np.mean((outputs.tau - np.asarray(tau_targets).reshape(outputs.tau.shape)) ** 2))
    return LossBreakdown(ce + loss_mix * mse, ce, mse)


def _backward(p, scheme, c, target0, tau_t, lam):
    X, Z, A1, probs, Zu, A2, tau = (c[k] for k in ("X", "Z", "A1", "probs", "Zu", "A2", "tau"))
    B, N, _ = X.shape
    d = p["trunk.proj.W"].shape[1]
    K = probs.shape[-1]
    n = B * N
    g = {}

    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, target0[..., None], 1.0, axis=-1)
    dlogits = (probs - onehot) / n

    du = lam * 2.0 * (tau - tau_t) / n * tau * (1.0 - tau)
    w2 = p[f"{scheme}.subtask.w2"]
    g[f"{scheme}.subtask.w2"] = np.einsum("bnh,bn->h", A2, du)
    g[f"{scheme}.subtask.b2"] = np.array([du.sum()])
    dpre2 = du[..., None] * w2 * (1.0 - A2**2)
    g[f"{scheme}.subtask.W1"] = Zu.reshape(n, -1).T @ dpre2.reshape(n, -1)
    g[f"{scheme}.subtask.b1"] = dpre2.sum(axis=(0, 1))
    dZu = dpre2 @ p[f"{scheme}.subtask.W1"].T
    dZ = dZu[..., : 3 * d].copy()
    dprobs = dZu[..., 3 * d:]
    dlogits += probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))

    g[f"{scheme}.stage.W2"] = A1.reshape(n, -1).T @ dlogits.reshape(n, K)
    g[f"{scheme}.stage.b2"] = dlogits.sum(axis=(0, 1))
    dpre1 = (dlogits @ p[f"{scheme}.stage.W2"].T) * (1.0 - A1**2)
    g[f"{scheme}.stage.W1"] = Z.reshape(n, -1).T @ dpre1.reshape(n, -1)
    g[f"{scheme}.stage.b1"] = dpre1.sum(axis=(0, 1))
    dZ += dpre1 @ p[f"{scheme}.stage.W1"].T

    dH = dZ[..., :d].copy()
    dC = dZ[..., d:2 * d].sum(axis=1)
    dH0 = dZ[..., 2 * d:].sum(axis=1)
    dH += dC[:, None] / N
    dH[:, 0] += dH0
    g["trunk.task"] = np.zeros_like(p["trunk.task"])
    np.add.at(g["trunk.task"], c["task_idx"], dC)
    g["trunk.pos0"] = dH[:, 0].sum(axis=0)
    g["trunk.proj.W"] = X.reshape(n, -1).T @ dH.reshape(n, d)
    g["trunk.proj.b"] = dH.sum(axis=(0, 1))
    return g


@dataclass
class Batch:
    features: np.ndarray  # (B, N, D)
    joint_states: np.ndarray | None
    task_ids: list[str]
    stage_targets: np.ndarray  # (B, N), 1-based
    tau_targets: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[SequenceSample]) -> "Batch":
        js = [s.joint_states for s in samples]
        return cls(
            np.stack([s.features for s in samples]),
            None if any(j is None for j in js) else np.stack(js),
            [s.task_id_presented for s in samples],
            np.stack([s.stage_targets for s in samples]),
            np.stack([s.tau_targets for s in samples]),
        )


def loss_and_grad(model: EstimatorModel, batch: Batch, params: Mapping[str, np.ndarray] | None = None, scheme: str | None = None):
    scheme = scheme or model.config.scheme_id
    p = model.params if params is None else params
    X = _inputs(model, batch.features, batch.joint_states)
    task_idx = model.task_index(batch.task_ids)
    c = _forward(p, scheme, X, task_idx)
    target0 = np.asarray(batch.stage_targets, dtype=np.int64) - 1
    lam = model.config.loss_mix
    ce = _cross_entropy(c["logits"], target0)
    mse = np.mean((c["tau"] - batch.tau_targets) ** 2)
    grads = _backward(p, scheme, c, target0, batch.tau_targets, lam)
    return float(ce + lam * mse), grads, (float(ce), float(mse))


def gradient_check(model: EstimatorModel, batch: Batch, h: float = 1e-5, tolerance: float = 1e-4, n: int = 200, seed: int = 0, analytic=None) -> GradCheckReport:
    """Finite-difference check over the trunk and the active scheme's heads."""
    scheme = model.config.scheme_id
    active = {k: v for k, v in model.params.items() if k.startswith("trunk.") or k.startswith(f"{scheme}.")}

    def fn(params):
        full = dict(model.params)
        full.update(params)
        total, grads, _ = loss_and_grad(model, batch, full)
        return total, grads

    return check_gradients(fn, active, h=h, n=n, tolerance=tolerance, seed=seed, analytic=analytic)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    stage_ce: float
    subtask_mse: float
    val_mse: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["epoch\tstage_ce\tsubtask_mse\tval_mse"]
        for r in self.records:
            lines.append(f"{r.epoch}\t{r.stage_ce!r}\t{r.subtask_mse!r}\t{r.val_mse!r}")
        return "\n".join(lines) + "\n"


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def _param_norms(params):
    return {k: float(np.linalg.norm(v)) for k, v in params.items()}


def draw_epoch_samples(trajectories, labels, ids, sampler: SamplerConfig, vocabulary, epoch: int, per_traj: int) -> list[SequenceSample]:
    out = []
    for tid in ids:
        for j in range(per_traj):
            rng = sample_rng(sampler.seed, tid, epoch * per_traj + j)
            out.append(draw_sample(trajectories[tid], labels[tid], sampler, vocabulary, rng))
    return out


def train(
    model: EstimatorModel,
    trajectories: Mapping[str, Trajectory],
    labels: Mapping[str, ProgressLabels],
    train_ids: Sequence[str],
    sampler: SamplerConfig,
    val_ids: Sequence[str] = (),
    priors: PriorProfile | None = None,
) -> TrainReport:
    """Minibatch SGD (optional momentum, global-norm clipping) on freshly drawn windows.

    Each epoch draws ``samples_per_trajectory`` augmented windows per
    training trajectory from per-draw seeded streams, shuffles them with an
    epoch-seeded permutation, and walks the batches in order, so the whole
    run is a function of the configs. Updates ``model`` in place.
    """
    from .evaluation import demo_mse

    cfg = model.config
    if not train_ids:
        raise ValidationError("train needs a non-empty dataset")
    scheme = cfg.scheme_id
    if priors is not None:
        model.priors[scheme] = priors
    names = sorted(k for k in model.params if k.startswith("trunk.") or k.startswith(f"{scheme}."))
    velocity = {k: np.zeros_like(model.params[k]) for k in names}
    report = TrainReport()
    train_ids = list(train_ids)
    vocab = cfg.task_vocabulary
    for epoch in range(cfg.epochs):
        samples = draw_epoch_samples(trajectories, labels, train_ids, sampler, vocab, epoch, cfg.samples_per_trajectory)
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(samples))
        ce_sum = mse_sum = 0.0
        n_batches = 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = Batch.from_samples([samples[i] for i in order[lo:lo + cfg.batch_size]])
            total, grads, (ce, mse) = loss_and_grad(model, batch)
            if not math.isfinite(total):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} batch {b}; parameter norms {json.dumps(_param_norms(model.params))}"
                )
            norm = global_norm({k: grads[k] for k in names})
            scale = cfg.clip_norm / norm if cfg.clip_norm and norm > cfg.clip_norm else 1.0
            for k in names:
                velocity[k] = cfg.momentum * velocity[k] + scale * grads[k]
                model.params[k] -= cfg.learning_rate * velocity[k]
            ce_sum += ce
            mse_sum += mse
            n_batches += 1
        val = float("nan")
        if val_ids and scheme in model.priors:
            val = demo_mse(LearnedPredictor(model), trajectories, labels, val_ids, sampler.N, sampler.G)
        for k in names:
            if not np.all(np.isfinite(model.params[k])):
                raise NumericalError(f"non-finite parameter {k} after epoch {epoch}")
        rec = EpochRecord(epoch, ce_sum / n_batches, mse_sum / n_batches, val)
        report.records.append(rec)
        log.info("epoch %d: stage_ce=%.4f subtask_mse=%.5f val_mse=%.5f", epoch, rec.stage_ce, rec.subtask_mse, rec.val_mse)
    model.metadata.update(epochs_trained=model.metadata.get("epochs_trained", 0) + cfg.epochs, train_size=len(train_ids))
    return report


# ---------------------------------------------------------------- predictor


class LearnedPredictor:
    """Adapts a trained model to the progress-predictor interface."""

    def __init__(self, model: EstimatorModel, scheme: str | None = None, batch: int = 1024):
        self.model = model
        self.scheme = scheme or model.config.scheme_id
        if self.scheme not in model.priors:
            raise ValidationError(f"model carries no priors for scheme {self.scheme!r}")
        self.priors = model.priors[self.scheme]
        self.batch = batch
        self.name = f"estimator:{self.scheme}"

    def predict(self, trajectory: Trajectory, windows: np.ndarray, task_id: str | None = None) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.int64)
        task = task_id or trajectory.task_id
        out = np.empty(windows.shape)
        for lo in range(0, len(windows), self.batch):
            w = windows[lo:lo + self.batch]
            joints = None if trajectory.joint_state is None else trajectory.joint_state[w]
            fo = forward(self.model, trajectory.features[w], self.priors, joints if self.model.config.use_joint_state else None, [task] * len(w), self.scheme)
            out[lo:lo + len(w)] = fo.y
        return out


# ---------------------------------------------------------------- checkpoints


def model_to_dict(model: EstimatorModel) -> dict:
    return {
        "version": model.version,
        "config": asdict(model.config),
        "heads": dict(sorted(model.heads.items())),
        "priors": {k: v.to_dict() for k, v in sorted(model.priors.items())},
        "metadata": model.metadata,
        "params": {k: model.params[k].tolist() for k in sorted(model.params)},
    }


def model_from_dict(d: Mapping) -> EstimatorModel:
    if d.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported estimator checkpoint version {d.get('version')!r}")
    cfg = EstimatorConfig(**d["config"])
    params = {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()}
    priors = {k: PriorProfile.from_dict(v) for k, v in d.get("priors", {}).items()}
    return EstimatorModel(cfg, params, dict(d["heads"]), priors, dict(d.get("metadata", {})))


def save_checkpoint(model: EstimatorModel, path) -> None:
    from .io import atomic_write

    atomic_write(path, json.dumps(model_to_dict(model), sort_keys=True) + "\n")


def load_checkpoint(path) -> EstimatorModel:
    return model_from_dict(json.loads(Path(path).read_text()))
