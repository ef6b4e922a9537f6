import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarm.errors import ValidationError
from sarm.evaluation import (
    RolloutTrace,
    admissible_starts,
    classify_rollouts,
    demo_mse,
    is_success,
    last_third_start,
    per_class_breakdown,
    score_rho,
    sequence_windows,
)
from sarm.labeling import ProgressLabels, label_trajectory
from sarm.predictors import OffsetPredictor, OraclePredictor
from sarm.simulator import gen_rollout_set

from conftest import make_trajectory


def flat(mean, T=30):
    """Non-SE trace with a given mean: constant value."""
    return np.full(T, mean)


def test_last_third_bounds():
    assert last_third_start(30) == 20
    assert last_third_start(31) == 21
    assert last_third_start(3) == 2


def test_success_rule():
    T = 30
    p = np.linspace(0.0, 0.9, T)
    p[20:] = 0.7
    p[-1] = 0.9
    assert is_success(p)
    p[-1] = 0.8
    assert not is_success(p)
    q = np.zeros(T)
    q[-1] = 1.0
    assert not is_success(q)


def test_xi_median_even_set():
    traces = [RolloutTrace(f"r{i}", flat(m)) for i, m in enumerate([0.2, 0.3, 0.5, 0.6])]
    rep = classify_rollouts(traces)
    assert rep.xi == pytest.approx(0.4, abs=1e-15)
    assert rep.labels == ["FE", "FE", "PSE", "PSE"]
    assert rep.rho is None


def test_se_is_excluded_from_xi():
    se = np.full(30, 0.95)
    traces = [RolloutTrace("s", se)] + [RolloutTrace(f"r{i}", flat(m)) for i, m in enumerate([0.1, 0.3, 0.5])]
    rep = classify_rollouts(traces)
    assert rep.labels[0] == "SE"
    assert rep.xi == rep.means[2]
    # a tie with xi counts as PSE
    assert rep.labels[1:] == ["FE", "PSE", "PSE"]


def test_constant_zero_trace_is_fe():
    traces = [RolloutTrace("z", np.zeros(30)), RolloutTrace("a", flat(0.4)), RolloutTrace("b", flat(0.5))]
    assert classify_rollouts(traces).labels[0] == "FE"


def test_all_se_has_no_threshold():
    rep = classify_rollouts([RolloutTrace("a", np.full(10, 0.9))])
    assert rep.labels == ["SE"] and rep.xi is None


def test_classify_errors():
    with pytest.raises(ValidationError):
        classify_rollouts([])
    with pytest.raises(ValidationError):
        classify_rollouts([RolloutTrace("a", [0.1, 0.2])])
    with pytest.raises(ValidationError):
        RolloutTrace("a", np.zeros(5), truth="OK")


def test_rho_examples():
    truth = ["SE"] * 12 + ["PSE"] * 12 + ["FE"] * 12
    assert score_rho(truth, truth) == 1.0
    one_off = list(truth)
    one_off[0] = "PSE"
    assert score_rho(one_off, truth) == pytest.approx(34 / 36, abs=1e-15)
    half = [("FE" if t == "SE" else "SE") if i >= 18 else t for i, t in enumerate(truth)]
    assert score_rho(half, truth) == 0.0
    with pytest.raises(ValidationError):
        score_rho(truth[:3], truth)
    with pytest.raises(ValidationError):
        score_rho([], [])


def test_per_class_breakdown_sums():
    truth = ["SE", "SE", "PSE", "FE"]
    pred = ["SE", "PSE", "PSE", "PSE"]
    bd = per_class_breakdown(pred, truth)
    assert bd == {"SE": (1, 2), "PSE": (1, 1), "FE": (0, 1)}
    assert sum(b for _, b in bd.values()) == len(truth)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=40), st.data())
def test_single_flip_moves_rho_by_two_over_n(codes, data):
    classes = ("SE", "PSE", "FE")
    truth = [classes[c % 3] for c in codes]
    i = data.draw(st.integers(0, len(truth) - 1))
    flipped = list(truth)
    flipped[i] = classes[(classes.index(truth[i]) + 1) % 3]
    assert abs((score_rho(truth, truth) - score_rho(flipped, truth)) - 2 / len(truth)) <= 1e-15
    assert -1.0 <= score_rho(flipped, truth) <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 0.75), min_size=2, max_size=30, unique=True).filter(lambda x: len(x) % 2 == 0))
def test_exactly_half_split(means):
    rep = classify_rollouts([RolloutTrace(f"r{i}", flat(m)) for i, m in enumerate(means)])
    assert rep.labels.count("PSE") == rep.labels.count("FE") == len(means) // 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=15), st.randoms())
def test_permutation_equivariance(means, rnd):
    traces = [RolloutTrace(f"r{i}", np.r_[flat(m, 29), m], ["SE", "PSE", "FE"][i % 3]) for i, m in enumerate(means)]
    perm = list(range(len(traces)))
    rnd.shuffle(perm)
    a = classify_rollouts(traces)
    b = classify_rollouts([traces[i] for i in perm])
    assert b.labels == [a.labels[i] for i in perm]
    assert a.xi == b.xi and a.rho == b.rho


def test_oracle_rollout_set_is_perfect(sim_config):
    sims = gen_rollout_set(sim_config, {"SE": 12, "PSE": 12, "FE": 12}, rng=3)
    traces = [RolloutTrace(s.id, s.y_true, s.quality.split("-", 1)[1]) for s in sims]
    rep = classify_rollouts(traces)
    assert rep.rho == 1.0
    assert rep.per_class == {"SE": (12, 12), "PSE": (12, 12), "FE": (12, 12)}
    d = rep.to_dict()
    assert d["per_class"]["PSE"] == "12/12" and len(d["per_rollout"]) == 36


def test_window_geometry():
    assert admissible_starts(300).tolist() == list(range(1, 300 - 1 - 7 * 30 + 1))
    assert admissible_starts(200).tolist() == []
    w = sequence_windows([1, 5])
    assert w[1].tolist() == [0, 5, 35, 65, 95, 125, 155, 185, 215]


def test_demo_mse_oracle_and_offset(experts, sim_config):
    pri = sim_config.nominal_priors()
    trajs = {s.id: s.trajectory for s in experts[:3]}
    labels = {s.id: label_trajectory(s.annotation, s.trajectory, pri) for s in experts[:3]}
    oracle = OraclePredictor({k: v.y for k, v in labels.items()})
    assert demo_mse(oracle, trajs, labels) == 0.0
    # labels capped at 0.8 so an offset of 0.1 never reaches the [0, 1] clip
    traj = make_trajectory("c", T=400)
    y = np.linspace(0.0, 0.8, 400)
    lab = ProgressLabels("c", np.ones(400, dtype=np.int64), y, y)
    mse = demo_mse(OffsetPredictor(OraclePredictor({"c": y}), 0.1), {"c": traj}, {"c": lab})
    assert mse == pytest.approx(0.01, abs=1e-12)


def test_demo_mse_empty_raises():
    traj = make_trajectory("s", T=50)
    y = np.linspace(0, 1, 50)
    with pytest.raises(ValidationError):
        demo_mse(OraclePredictor({"s": y}), {"s": traj}, {"s": ProgressLabels("s", np.ones(50, dtype=np.int64), y, y)})
    with pytest.raises(ValidationError):
        demo_mse(OraclePredictor({}), {}, {})


def test_split_survives_adjacent_floats():
    # the float midpoint of 0 and the smallest subnormal rounds to 0
    rep = classify_rollouts([RolloutTrace("a", flat(0.0)), RolloutTrace("b", flat(5e-324))])
    assert rep.labels == ["FE", "PSE"]
