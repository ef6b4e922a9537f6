"""On-disk formats: trajectory JSONL, annotation JSON, manifests, labels, priors, traces, weight tables.

All writers emit sorted-key JSON with ``repr`` floats so equal inputs give
byte-identical files, and write through a temporary sibling plus rename.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import SchemaError, ValidationError
from .labeling import PriorProfile, ProgressLabels
from .trajectory import AnnotationProtocol, Segment, Trajectory, TrajectoryAnnotation

MANIFEST = "manifest.json"
MANIFEST_VERSION = "sarm-dataset/1"


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    atomic_write(path, "".join(dumps(r) + "\n" for r in records))


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{n}: not a JSON record ({exc.msg})") from None
    return out


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from None


@contextmanager
def staged_dir(out_dir):
    """Build a directory under a temporary name and move it into place on success."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"output directory {out} exists and is not empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        yield tmp
        if out.exists():
            out.rmdir()
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _need(rec: Mapping, keys: Sequence[str], where: str) -> None:
    missing = [k for k in keys if k not in rec]
    if missing:
        raise SchemaError(f"{where}: missing field(s) {missing}")


# ---------------------------------------------------------------- trajectories


def write_trajectory(path, traj: Trajectory) -> None:
    def rows():
        for i in range(len(traj)):
            yield {
                "index": i,
                "time_s": i / traj.fps,
                "features": traj.features[i].tolist(),
                "joint_state": None if traj.joint_state is None else traj.joint_state[i].tolist(),
                "action": None if traj.action is None else traj.action[i].tolist(),
            }

    write_jsonl(path, rows())


def read_trajectory(path, traj_id: str, task_id: str, fps: int) -> Trajectory:
    recs = read_jsonl(path)
    for n, r in enumerate(recs):
        _need(r, ("index", "features"), f"{path} frame {n}")
        if r["index"] != n:
            raise ValidationError(f"{path}: frame indices must be contiguous from 0 (line {n + 1} has {r['index']})")

    def stack(key):
        vals = [r.get(key) for r in recs]
        if all(v is None for v in vals):
            return None
        if any(v is None for v in vals):
            raise ValidationError(f"{path}: {key} present on some frames only")
        return np.asarray(vals, dtype=np.float64)

    try:
        features = np.asarray([r["features"] for r in recs], dtype=np.float64)
    except ValueError:
        raise ValidationError(f"{path}: frames disagree on feature dimension") from None
    return Trajectory(traj_id, task_id, fps, features, stack("joint_state"), stack("action"))


# ---------------------------------------------------------------- annotations


def annotation_to_dict(ann: TrajectoryAnnotation) -> dict:
    return {
        "trajectory_id": ann.trajectory_id,
        "scheme_id": ann.scheme_id,
        "segments": [{"label": s.label, "start": s.start, "end": s.end} for s in ann.segments],
        "mistakes": [{"start": a, "end": b} for a, b in ann.mistakes],
    }


def annotation_from_dict(d: Mapping, where: str = "annotation") -> TrajectoryAnnotation:
    _need(d, ("trajectory_id", "scheme_id", "segments"), where)
    segs = []
    for s in d["segments"]:
        _need(s, ("label", "start", "end"), where)
        segs.append(Segment(s["label"], int(s["start"]), int(s["end"])))
    mistakes = tuple((int(m["start"]), int(m["end"])) for m in d.get("mistakes", []))
    return TrajectoryAnnotation(d["trajectory_id"], d["scheme_id"], tuple(segs), mistakes)


def write_annotation(path, ann: TrajectoryAnnotation) -> None:
    write_json(path, annotation_to_dict(ann))


def read_annotation(path) -> TrajectoryAnnotation:
    return annotation_from_dict(read_json(path), str(path))


def protocol_to_dict(p: AnnotationProtocol) -> dict:
    return {"scheme_id": p.scheme_id, "subtasks": list(p.subtasks)}


def protocol_from_dict(d: Mapping) -> AnnotationProtocol:
    _need(d, ("scheme_id", "subtasks"), "protocol")
    return AnnotationProtocol(d["scheme_id"], tuple(d["subtasks"]))


# ---------------------------------------------------------------- labels, priors, ground truth


def write_labels(path, labels: ProgressLabels) -> None:
    write_jsonl(path, labels.rows())


def read_labels(path, trajectory_id: str) -> ProgressLabels:
    recs = read_jsonl(path)
    for r in recs:
        _need(r, ("t", "stage_k", "tau", "y"), str(path))
    return ProgressLabels(
        trajectory_id,
        np.array([r["stage_k"] for r in recs], dtype=np.int64),
        np.array([r["tau"] for r in recs], dtype=np.float64),
        np.array([r["y"] for r in recs], dtype=np.float64),
    )


def write_priors(path, priors: PriorProfile) -> None:
    write_json(path, priors.to_dict())


def read_priors(path) -> PriorProfile:
    d = read_json(path)
    _need(d, ("scheme_id", "alpha"), str(path))
    return PriorProfile.from_dict(d)


def write_ground_truth(path, y: np.ndarray) -> None:
    write_jsonl(path, ({"t": t, "y_true": float(v)} for t, v in enumerate(y)))


def read_ground_truth(path) -> np.ndarray:
    return np.array([r["y_true"] for r in read_jsonl(path)], dtype=np.float64)


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    root: Path
    manifest: dict
    trajectories: dict[str, Trajectory]
    annotations: dict[str, TrajectoryAnnotation] = field(default_factory=dict)
    ground_truth: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def protocol(self) -> AnnotationProtocol:
        return protocol_from_dict(self.manifest["protocol"])

    @property
    def ids(self) -> list[str]:
        return list(self.trajectories)

    def quality(self, tid: str) -> str:
        return self.manifest.get("quality", {}).get(tid, "")


def write_dataset(out_dir, sims, config, seed: int, name: str = "sim", extra: Mapping | None = None) -> dict:
    """Write simulator output as a dataset directory (staged, then renamed into place)."""
    with staged_dir(out_dir) as tmp:
        manifest = {
            "version": MANIFEST_VERSION,
            "name": name,
            "fps": config.fps,
            "feature_dim": config.feature_dim,
            "task_id": config.task_id,
            "protocol": protocol_to_dict(config.protocol),
            "trajectory_files": [],
            "annotation_files": [],
            "ground_truth_files": [],
            "quality": {},
            "failures": {},
            "seed": seed,
        }
        for s in sims:
            tf, af, gf = f"trajectories/{s.id}.jsonl", f"annotations/{s.id}.json", f"ground_truth/{s.id}.jsonl"
            write_trajectory(tmp / tf, s.trajectory)
            write_annotation(tmp / af, s.annotation)
            write_ground_truth(tmp / gf, s.y_true)
            manifest["trajectory_files"].append(tf)
            manifest["annotation_files"].append(af)
            manifest["ground_truth_files"].append(gf)
            manifest["quality"][s.id] = s.quality
            manifest["failures"][s.id] = [{"kind": f.kind, "start": f.start, "end": f.end} for f in s.failures]
        manifest.update(extra or {})
        write_json(tmp / MANIFEST, manifest)
    return manifest


def gen_dataset(config, n_expert: int, n_suboptimal: int, seed: int, out_dir, kinds: Sequence[str] | None = None, name: str = "sim") -> dict:
    """Simulate ``n_expert + n_suboptimal`` trajectories and write them as a dataset.

    ``kinds`` forces the failure kinds of every suboptimal trajectory instead
    of drawing them from the config's failure mix.
    """
    from .simulator import gen_expert, gen_suboptimal, gen_trajectories
    from .trajectory import derive_rng

    if kinds is None:
        sims = gen_trajectories(config, n_expert, n_suboptimal, seed=seed)
    else:
        sims = []
        for i in range(n_expert + n_suboptimal):
            r, tid = derive_rng(seed, "trajectory", i), f"traj_{i:05d}"
            sims.append(gen_expert(config, r, tid) if i < n_expert else gen_suboptimal(config, r, tid, kinds=list(kinds)))
    return write_dataset(out_dir, sims, config, seed, name=name)


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / MANIFEST if root.is_dir() else root
    root = path.parent
    m = read_json(path)
    _need(m, ("name", "fps", "feature_dim", "protocol", "trajectory_files"), str(path))
    if m.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise SchemaError(f"{path}: unsupported dataset version {m.get('version')!r}")
    task = m.get("task_id", "task")
    trajs = {}
    for f in m["trajectory_files"]:
        tid = Path(f).name.split(".")[0]
        traj = read_trajectory(root / f, tid, task, int(m["fps"]))
        if traj.feature_dim != m["feature_dim"]:
            raise ValidationError(f"{f}: feature_dim {traj.feature_dim} != manifest {m['feature_dim']}")
        trajs[tid] = traj
    anns = {}
    for f in m.get("annotation_files", []):
        a = read_annotation(root / f)
        anns[a.trajectory_id] = a
    gts = {}
    for f in m.get("ground_truth_files", []):
        gts[Path(f).name.split(".")[0]] = read_ground_truth(root / f)
    return Dataset(root, m, trajs, anns, gts)


# ---------------------------------------------------------------- rollout traces


def write_traces(path, traces: Mapping[str, np.ndarray]) -> None:
    def rows():
        for rid in traces:
            for t, p in enumerate(traces[rid]):
                yield {"rollout_id": rid, "t": t, "P_t": float(p)}

    write_jsonl(path, rows())


def read_traces(path) -> dict[str, np.ndarray]:
    """Trace file, or a directory whose ``*.jsonl`` files are read in name order."""
    path = Path(path)
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no trace files under {path}")
    raw: dict[str, dict[int, float]] = {}
    for f in files:
        for r in read_jsonl(f):
            _need(r, ("rollout_id", "t", "P_t"), str(f))
            raw.setdefault(r["rollout_id"], {})[int(r["t"])] = float(r["P_t"])
    out = {}
    for rid, d in raw.items():
        if sorted(d) != list(range(len(d))):
            raise ValidationError(f"trace {rid!r}: t must run 0..T-1 without gaps")
        out[rid] = np.array([d[t] for t in range(len(d))])
    return out


def write_truth(path, truth: Mapping[str, str]) -> None:
    write_jsonl(path, ({"rollout_id": k, "class": v} for k, v in truth.items()))


def read_truth(path) -> dict[str, str]:
    out = {}
    for r in read_jsonl(path):
        _need(r, ("rollout_id", "class"), str(path))
        out[r["rollout_id"]] = r["class"]
    return out


# ---------------------------------------------------------------- weight tables, samples


def write_weight_table(path, table) -> None:
    def rows():
        yield {"header": table.header}
        for r in table.rows:
            yield {"trajectory_id": r.trajectory_id, "t": r.t, "r_hat": r.r_hat, "w": r.w}

    write_jsonl(path, rows())


def read_weight_table(path) -> tuple[dict, list[dict]]:
    recs = read_jsonl(path)
    if not recs or "header" not in recs[0]:
        raise SchemaError(f"{path}: weight table must start with a header record")
    return recs[0]["header"], recs[1:]


def write_samples(path, samples) -> None:
    write_jsonl(path, (s.to_dict() for s in samples))
