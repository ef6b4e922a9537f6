import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarm.errors import ValidationError
from sarm.predictors import ConstantPredictor, OraclePredictor
from sarm.rabc import (
    RunningStats,
    WeightConfig,
    apply_prior,
    chunk_starts,
    compute_weights,
    progress_delta,
    soft_weight,
    weight_dataset,
    weighted_loss,
    welford_merge,
    welford_update,
)

from conftest import make_trajectory


def two_pass(xs):
    """Mean and sample std by the textbook two-pass formula, in exact-ish fsum."""
    n = len(xs)
    mean = math.fsum(xs) / n
    var = math.fsum((x - mean) ** 2 for x in xs) / (n - 1) if n > 1 else 0.0
    return mean, math.sqrt(var)


class FailingAt:
    """Predictor that raises for windows touching a given frame."""

    name = "failing"

    def __init__(self, base, bad_frame):
        self.base, self.bad = base, bad_frame

    def predict(self, trajectory, windows, task_id=None):
        if np.any(np.asarray(windows)[..., -1] == self.bad):
            raise RuntimeError("model blew up")
        return self.base.predict(trajectory, windows, task_id)


def test_welford_small_example():
    s = RunningStats().extend([0.1, 0.2, 0.3])
    assert abs(s.mean - 0.2) <= 1e-15
    assert abs(s.std - 0.1) <= 1e-15
    assert abs(s.std - statistics.stdev([0.1, 0.2, 0.3])) <= 1e-15


def test_single_and_empty_observation():
    assert RunningStats().std == 0.0 and RunningStats().n == 0
    s = welford_update(RunningStats(), 0.7)
    assert s.n == 1 and s.mean == 0.7 and s.std == 0.0


def test_welford_update_is_pure():
    a = RunningStats().extend([1.0, 2.0])
    b = welford_update(a, 3.0)
    assert a.n == 2 and b.n == 3


def test_merge_example_and_empty_sides():
    m = welford_merge(RunningStats().extend([0.1, 0.2]), RunningStats().extend([0.3]))
    full = RunningStats().extend([0.1, 0.2, 0.3])
    assert m.n == 3
    assert abs(m.mean - full.mean) <= 1e-12 and abs(m.std - full.std) <= 1e-12
    assert welford_merge(RunningStats(), full) == full
    assert welford_merge(full, RunningStats()) == full


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=300))
def test_welford_matches_two_pass(xs):
    s = RunningStats().extend(xs)
    mean, std = two_pass(xs)
    assert abs(s.mean - mean) <= 1e-12
    assert abs(s.std - std) <= 1e-12
    assert s.M2 >= -1e-15


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-1, 1), max_size=50),
    st.lists(st.floats(-1, 1), max_size=50),
    st.lists(st.floats(-1, 1), max_size=50),
)
def test_merge_equivalence_and_associativity(a, b, c):
    A, B, C = (RunningStats().extend(x) for x in (a, b, c))
    left = welford_merge(welford_merge(A, B), C)
    right = welford_merge(A, welford_merge(B, C))
    stream = RunningStats().extend(a + b + c)
    for m in (left, right):
        assert m.n == stream.n
        assert abs(m.mean - stream.mean) <= 1e-12
        assert abs(m.std - stream.std) <= 1e-12


def test_soft_weight_examples():
    # with the default guard the ramp is divided by 4 sigma + 1e-6
    assert abs(soft_weight(0.03, 0.02, 0.01) - 0.03 / 0.040001) <= 1e-15
    assert abs(soft_weight(0.03, 0.02, 0.01, eps_var=1e-12) - 0.75) <= 1e-9
    assert abs(soft_weight(0.02, 0.02, 0.01, eps_var=1e-12) - 0.5) <= 1e-9
    assert abs(soft_weight(0.02, 0.02, 0.01) - 0.5) <= 1e-6 / 0.04
    assert soft_weight(0.04, 0.02, 0.005) == 1.0
    assert soft_weight(0.01, 0.02, 0.005) == 0.0
    # sigma = 0 collapses to a step at mu
    assert soft_weight(0.5 + 1e-5, 0.5, 0.0) == 1.0
    assert soft_weight(0.5 - 1e-5, 0.5, 0.0) == 0.0
    with pytest.raises(ValidationError):
        soft_weight(0.0, 0.0, -1.0)


def test_apply_prior_examples():
    assert apply_prior(0.02, 0.1, 0.01) == 1.0
    assert apply_prior(-0.05, 0.9, 0.01) == 0.0
    assert apply_prior(0.005, 0.3, 0.01) == 0.3
    assert apply_prior(0.0, 0.3, 0.01) == 0.3
    assert apply_prior(0.01, 0.3, 0.01) == 0.3
    np.testing.assert_array_equal(apply_prior(np.array([-1.0, 0.005, 1.0]), np.array([0.5, 0.5, 0.5])), [0.0, 0.5, 1.0])
    with pytest.raises(ValidationError):
        apply_prior(0.0, 0.0, 0.0)


def test_weighted_loss_examples():
    assert weighted_loss([1.0, 3.0], [1.0, 1.0]) == pytest.approx(2.0, rel=1e-5)
    assert weighted_loss([5.0, 7.0], [0.0, 0.0]) == 0.0
    assert weighted_loss([1.0, 3.0], [1.0, 0.0]) == pytest.approx(1.0, rel=1e-5)
    with pytest.raises(ValidationError):
        weighted_loss([1.0], [1.0, 1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=40))
def test_uniform_weights_match_plain_mean(losses):
    got = weighted_loss(losses, np.ones(len(losses)))
    mean = math.fsum(losses) / len(losses)
    # the guard shifts the denominator from n to n + eps
    assert abs(got - mean) <= mean * 1e-6 + 1e-12


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1, 1), st.floats(-1, 1), st.floats(-0.5, 0.5), st.floats(0, 0.5), st.floats(1e-4, 0.2)
)
def test_weight_range_and_monotonicity(r1, r2, mu, sigma, kappa):
    lo, hi = sorted((r1, r2))
    stats = RunningStats(n=10, mean=mu, M2=sigma**2 * 9)
    cfg = WeightConfig(kappa=kappa)
    w_lo, w_hi = compute_weights(lo, stats, cfg), compute_weights(hi, stats, cfg)
    assert 0.0 <= w_lo <= 1.0 and 0.0 <= w_hi <= 1.0
    assert w_lo <= w_hi


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, -1e-9), st.floats(0, 0.5))
def test_negative_mean_is_clamped(r, mu, sigma):
    assert soft_weight(r, mu, sigma) == soft_weight(r, 0.0, sigma)


def test_weight_config_invariants():
    for kw in ({"kappa": 0}, {"eps_div": 0}, {"eps_var": -1}, {"delta": 0}):
        with pytest.raises(ValidationError):
            WeightConfig(**kw)


def test_chunk_starts():
    assert chunk_starts(100, 25).tolist() == [0, 25, 50]
    assert chunk_starts(101, 25).tolist() == [0, 25, 50, 75]
    assert chunk_starts(25, 25).tolist() == []
    assert chunk_starts(3, 1).tolist() == [0, 1]


def test_progress_delta_examples():
    traj = make_trajectory("p", T=400)
    y = np.linspace(0, 1, 400)
    y[100], y[125] = 0.40, 0.45
    y[200], y[225] = 0.50, 0.42
    oracle = OraclePredictor({"p": y})
    assert progress_delta(oracle, traj, 100, 25)[0] == pytest.approx(0.05, abs=1e-15)
    assert progress_delta(oracle, traj, 200, 25)[0] == pytest.approx(-0.08, abs=1e-15)
    assert progress_delta(ConstantPredictor(0.3), traj, 10, 25)[0] == 0.0
    with pytest.raises(ValidationError):
        progress_delta(oracle, traj, 380, 25)
    with pytest.raises(ValidationError):
        progress_delta(oracle, traj, -1, 25)


def test_weight_dataset_on_experts(experts):
    oracle = OraclePredictor({s.id: s.y_true for s in experts})
    table = weight_dataset(oracle, [s.trajectory for s in experts])
    r = np.array([row.r_hat for row in table.rows])
    assert len(r) == sum(len(chunk_starts(len(s.trajectory), 25)) for s in experts)
    assert np.mean(r > 0) >= 0.95
    assert table.stats.n == len(r)
    assert abs(table.stats.mean - r.mean()) <= 1e-12
    assert table.header["kappa"] == 0.01 and table.header["delta"] == 25
    assert [(row.trajectory_id, row.t) for row in table.rows] == sorted((row.trajectory_id, row.t) for row in table.rows)


def test_weight_dataset_zeroes_regression_chunks(regressions):
    oracle = OraclePredictor({s.id: s.y_true for s in regressions})
    table = weight_dataset(oracle, [s.trajectory for s in regressions])
    checked = 0
    by_key = table.lookup()
    for s in regressions:
        for seg in s.failures:
            if seg.kind != "regression":
                continue
            for t in chunk_starts(len(s.trajectory), 25):
                if seg.start <= t and t + 25 <= seg.end:
                    assert by_key[(s.id, int(t))].r_hat < 0
                    assert by_key[(s.id, int(t))].w == 0.0
                    checked += 1
    assert checked > 0


def test_weight_dataset_empty_and_isolated_failures(experts):
    empty = weight_dataset(ConstantPredictor(), [])
    assert empty.rows == [] and empty.stats.n == 0
    s = experts[0]
    pred = FailingAt(OraclePredictor({s.id: s.y_true}), 50)
    table = weight_dataset(pred, [s.trajectory])
    n_all = len(chunk_starts(len(s.trajectory), 25))
    assert [(tid, t) for tid, t, _ in table.skipped] == [(s.id, 25), (s.id, 50)]
    assert len(table.rows) == n_all - 2
