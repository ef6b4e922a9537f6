import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarm.errors import ValidationError
from sarm.trajectory import (
    REASON_COVERAGE,
    REASON_EMPTY_SEGMENT,
    REASON_INCOMPLETE,
    REASON_MISTAKE,
    REASON_ORDER,
    REASON_SCHEME,
    AnnotationProtocol,
    Frame,
    Trajectory,
    derive_rng,
    filter_dataset,
    split_dataset,
    validate_annotation,
)

from conftest import bounds_from_lengths, make_annotation, make_trajectory

P5 = AnnotationProtocol("sparse", tuple(f"stage_{k + 1}" for k in range(5)))


def test_trajectory_rejects_bad_shapes():
    with pytest.raises(ValidationError):
        Trajectory("a", "x", 30, np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        Trajectory("a", "x", 0, np.zeros((4, 3)))
    with pytest.raises(ValidationError):
        Trajectory("a", "x", 30, np.zeros((4, 3)), action=np.zeros((3, 2)))


def test_frames_round_trip():
    traj = make_trajectory("t", T=6, actions=True)
    frames = traj.frames
    assert [f.index for f in frames] == list(range(6))
    assert frames[3].time_s == pytest.approx(3 / 30)
    back = Trajectory.from_frames("t", traj.task_id, 30, frames)
    np.testing.assert_array_equal(back.features, traj.features)
    np.testing.assert_array_equal(back.action, traj.action)


def test_from_frames_requires_contiguous_index():
    f = [Frame(0, 0.0, np.zeros(2)), Frame(2, 0.1, np.zeros(2))]
    with pytest.raises(ValidationError):
        Trajectory.from_frames("t", "x", 30, f)


def test_protocol_invariants():
    with pytest.raises(ValidationError):
        AnnotationProtocol("s", ())
    with pytest.raises(ValidationError):
        AnnotationProtocol("s", ("a", "a"))


def test_valid_full_annotation():
    traj = make_trajectory("t", T=50)
    ann = make_annotation("t", bounds_from_lengths([10, 10, 10, 10, 10]))
    v = validate_annotation(ann, P5, traj)
    assert v.valid and v.reasons == ()


def test_missing_subtask_is_incomplete():
    traj = make_trajectory("t", T=40)
    ann = make_annotation("t", bounds_from_lengths([10, 10, 10, 10]))
    v = validate_annotation(ann, P5, traj)
    assert not v.valid
    assert REASON_INCOMPLETE in v.reasons
    assert REASON_INCOMPLETE == "incomplete sequence"


def test_mistake_rejected():
    traj = make_trajectory("t", T=50)
    ann = make_annotation("t", bounds_from_lengths([10] * 5), mistakes=[(12, 15)])
    v = validate_annotation(ann, P5, traj)
    assert v.reasons == (REASON_MISTAKE,)
    assert REASON_MISTAKE == "contains mistake"


def test_order_coverage_and_scheme_reasons():
    traj = make_trajectory("t", T=50)
    labels = ["stage_2", "stage_1", "stage_3", "stage_4", "stage_5"]
    assert REASON_ORDER in validate_annotation(make_annotation("t", bounds_from_lengths([10] * 5), labels), P5, traj).reasons
    gap = [(0, 9), (11, 19), (20, 29), (30, 39), (40, 49)]
    assert REASON_COVERAGE in validate_annotation(make_annotation("t", gap), P5, traj).reasons
    short = bounds_from_lengths([10] * 5)[:-1] + [(40, 45)]
    assert REASON_COVERAGE in validate_annotation(make_annotation("t", short), P5, traj).reasons
    single = bounds_from_lengths([10, 10, 10, 19, 1])
    assert REASON_EMPTY_SEGMENT in validate_annotation(make_annotation("t", single), P5, traj).reasons
    assert REASON_SCHEME in validate_annotation(make_annotation("t", bounds_from_lengths([10] * 5), scheme="dense"), P5, traj).reasons


def test_id_mismatch_is_hard_error():
    with pytest.raises(ValidationError):
        validate_annotation(make_annotation("other", bounds_from_lengths([10] * 5)), P5, make_trajectory("t", T=50))


def test_filter_counts_and_order():
    trajs = [make_trajectory(f"t{i:02d}", T=50) for i in range(12)]
    anns = [make_annotation(t.id, bounds_from_lengths([10] * 5), mistakes=[(3, 4)] if i in (4, 9) else ()) for i, t in enumerate(trajs)]
    rep = filter_dataset(anns, P5, trajs)
    assert len(rep.kept) == 10
    assert rep.kept == [t.id for i, t in enumerate(trajs) if i not in (4, 9)]
    assert rep.rejected == {"t04": ("contains mistake",), "t09": ("contains mistake",)}


def test_filter_empty_and_duplicates():
    assert filter_dataset([], P5, []).kept == []
    trajs = [make_trajectory(f"t{i}", T=50) for i in range(3)]
    anns = [make_annotation(t.id, bounds_from_lengths([10] * 5)) for t in trajs]
    with pytest.raises(ValidationError, match="duplicate"):
        filter_dataset(anns + [anns[0]], P5, trajs)


def test_split_sizes_and_determinism():
    ids = [f"id{i}" for i in range(70)]
    tr, te = split_dataset(ids, 0.1, seed=3)
    assert (len(tr), len(te)) == (63, 7)
    assert split_dataset(ids, 0.1, seed=3) == (tr, te)
    assert split_dataset(ids, 0.0, seed=3) == (ids, [])
    for bad in (-0.1, 1.0):
        with pytest.raises(ValidationError):
            split_dataset(ids, bad, seed=0)


def test_derive_rng_is_stable():
    # pinned so that a platform or numpy change in stream derivation is noticed
    a = derive_rng(7, "split").integers(0, 2**31, size=3)
    b = derive_rng(7, "split").integers(0, 2**31, size=3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, derive_rng(8, "split").integers(0, 2**31, size=3))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 40), min_size=1, max_size=8))
def test_valid_annotation_lengths_sum_to_T(lengths):
    T = sum(lengths)
    proto = AnnotationProtocol("p", tuple(f"s{k}" for k in range(len(lengths))))
    traj = make_trajectory("t", T=T)
    ann = make_annotation("t", bounds_from_lengths(lengths), list(proto.subtasks), scheme="p")
    v = validate_annotation(ann, proto, traj)
    assert v.valid
    assert ann.lengths().sum() == T
    assert validate_annotation(ann, proto, traj) == v


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 200), st.floats(0.0, 0.99), st.integers(0, 2**32))
def test_split_partitions(n, frac, seed):
    ids = [f"x{i}" for i in range(n)]
    tr, te = split_dataset(ids, frac, seed)
    assert len(te) == round(frac * n)
    assert sorted(tr + te) == sorted(ids)
    assert not set(tr) & set(te)
    assert tr == [i for i in ids if i in set(tr)]
