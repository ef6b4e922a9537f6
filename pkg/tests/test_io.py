import json

import numpy as np
import pytest

from sarm.errors import SchemaError, ValidationError
from sarm.io import (
    annotation_from_dict,
    annotation_to_dict,
    atomic_write,
    dumps,
    gen_dataset,
    load_dataset,
    protocol_from_dict,
    protocol_to_dict,
    read_annotation,
    read_ground_truth,
    read_jsonl,
    read_labels,
    read_priors,
    read_traces,
    read_trajectory,
    read_truth,
    read_weight_table,
    staged_dir,
    write_annotation,
    write_ground_truth,
    write_jsonl,
    write_labels,
    write_priors,
    write_traces,
    write_trajectory,
    write_truth,
    write_weight_table,
)
from sarm.labeling import PriorProfile, label_trajectory
from sarm.predictors import OraclePredictor
from sarm.rabc import weight_dataset

from conftest import bounds_from_lengths, make_annotation, make_trajectory


def test_dumps_is_canonical():
    assert dumps({"b": 1, "a": [1.5, None]}) == '{"a": [1.5, null], "b": 1}'
    with pytest.raises(ValueError):
        dumps({"x": float("nan")})


def test_atomic_write_creates_parents(tmp_path):
    p = tmp_path / "a" / "b" / "c.txt"
    atomic_write(p, "hi\n")
    assert p.read_text() == "hi\n"
    assert [x.name for x in p.parent.iterdir()] == ["c.txt"]


def test_jsonl_bad_line_names_file(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"a": 1}\nnot json\n')
    with pytest.raises(SchemaError, match="x.jsonl"):
        read_jsonl(p)
    write_jsonl(p, [{"a": 1}, {"a": 2}])
    assert read_jsonl(p) == [{"a": 1}, {"a": 2}]


def test_staged_dir_refuses_non_empty(tmp_path):
    out = tmp_path / "out"
    with staged_dir(out) as tmp:
        (tmp / "f").write_text("1")
    assert (out / "f").read_text() == "1"
    with pytest.raises(FileExistsError):
        with staged_dir(out):
            pass
    with pytest.raises(RuntimeError):
        with staged_dir(tmp_path / "never") as tmp:
            (tmp / "f").write_text("1")
            raise RuntimeError("boom")
    assert not (tmp_path / "never").exists()


def test_trajectory_round_trip(tmp_path, experts):
    traj = experts[0].trajectory
    write_trajectory(tmp_path / "t.jsonl", traj)
    back = read_trajectory(tmp_path / "t.jsonl", traj.id, traj.task_id, traj.fps)
    np.testing.assert_array_equal(back.features, traj.features)
    np.testing.assert_array_equal(back.joint_state, traj.joint_state)
    np.testing.assert_array_equal(back.action, traj.action)
    bare = make_trajectory("b", T=4)
    write_trajectory(tmp_path / "b.jsonl", bare)
    rec = read_jsonl(tmp_path / "b.jsonl")[0]
    assert rec["action"] is None and rec["joint_state"] is None
    assert read_trajectory(tmp_path / "b.jsonl", "b", "x", 30).action is None


def test_trajectory_missing_field(tmp_path):
    write_jsonl(tmp_path / "t.jsonl", [{"index": 0, "time_s": 0.0}])
    with pytest.raises(SchemaError, match="features"):
        read_trajectory(tmp_path / "t.jsonl", "t", "x", 30)


def test_annotation_and_protocol_round_trip(tmp_path, protocol5):
    ann = make_annotation("t", bounds_from_lengths([3, 4, 5]), mistakes=[(2, 3)])
    assert annotation_from_dict(annotation_to_dict(ann)) == ann
    write_annotation(tmp_path / "a.json", ann)
    assert read_annotation(tmp_path / "a.json") == ann
    assert protocol_from_dict(protocol_to_dict(protocol5)) == protocol5
    with pytest.raises(SchemaError):
        annotation_from_dict({"trajectory_id": "t"})


def test_labels_priors_truth_round_trip(tmp_path):
    pri = PriorProfile.from_alpha("sparse", [0.2, 0.8], M=3)
    lab = label_trajectory(make_annotation("t", bounds_from_lengths([4, 6])), 10, pri)
    write_labels(tmp_path / "l.jsonl", lab)
    back = read_labels(tmp_path / "l.jsonl", "t")
    assert back.y.tolist() == lab.y.tolist() and back.stage.tolist() == lab.stage.tolist()
    write_priors(tmp_path / "p.json", pri)
    assert read_priors(tmp_path / "p.json").alpha.tolist() == pri.alpha.tolist()
    write_ground_truth(tmp_path / "g.jsonl", lab.y)
    assert read_ground_truth(tmp_path / "g.jsonl").tolist() == lab.y.tolist()


def test_traces_and_truth(tmp_path):
    traces = {"r1": np.array([0.1, 0.2, 0.3]), "r0": np.array([0.0, 0.5, 1.0])}
    write_traces(tmp_path / "tr" / "a.jsonl", traces)
    back = read_traces(tmp_path / "tr")
    assert {k: v.tolist() for k, v in back.items()} == {k: v.tolist() for k, v in traces.items()}
    write_truth(tmp_path / "truth.jsonl", {"r1": "SE", "r0": "FE"})
    assert read_truth(tmp_path / "truth.jsonl") == {"r1": "SE", "r0": "FE"}
    write_jsonl(tmp_path / "gap.jsonl", [{"rollout_id": "x", "t": 0, "P_t": 0}, {"rollout_id": "x", "t": 2, "P_t": 0}])
    with pytest.raises(ValidationError):
        read_traces(tmp_path / "gap.jsonl")
    with pytest.raises(FileNotFoundError):
        read_traces(tmp_path / "tr" / "missing_dir")


def test_weight_table_file(tmp_path, experts):
    s = experts[0]
    table = weight_dataset(OraclePredictor({s.id: s.y_true}), [s.trajectory])
    write_weight_table(tmp_path / "w.jsonl", table)
    header, rows = read_weight_table(tmp_path / "w.jsonl")
    assert header["kappa"] == 0.01 and header["delta"] == 25 and header["predictor"] == "oracle"
    assert len(rows) == len(table.rows)
    assert set(rows[0]) == {"trajectory_id", "t", "r_hat", "w"}
    write_jsonl(tmp_path / "bad.jsonl", rows)
    with pytest.raises(SchemaError):
        read_weight_table(tmp_path / "bad.jsonl")


def test_dataset_round_trip_and_determinism(tmp_path, sim_config):
    m1 = gen_dataset(sim_config, 3, 2, seed=5, out_dir=tmp_path / "a")
    gen_dataset(sim_config, 3, 2, seed=5, out_dir=tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 1 + 3 * 5
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ds = load_dataset(tmp_path / "a")
    assert ds.ids == [f"traj_{i:05d}" for i in range(5)]
    assert ds.quality("traj_00004") == "suboptimal" and m1["seed"] == 5
    assert set(ds.ground_truth) == set(ds.ids)
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    m["version"] = "sarm-dataset/0"
    (tmp_path / "a" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(SchemaError):
        load_dataset(tmp_path / "a")
