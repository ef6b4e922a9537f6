import numpy as np
import pytest

from sarm.simulator import SimConfig, gen_expert, gen_suboptimal
from sarm.trajectory import AnnotationProtocol, Segment, Trajectory, TrajectoryAnnotation, derive_rng

_acceptance: dict[int, tuple[str, str, str]] = {}


def make_trajectory(tid="t0", T=10, D=3, task="fold_tshirt", actions=False):
    rng = derive_rng("make-trajectory", tid, T, D)
    act = rng.normal(size=(T, 2)) if actions else None
    return Trajectory(tid, task, 30, rng.normal(size=(T, D)), None, act)


def make_annotation(tid, bounds, labels=None, scheme="sparse", mistakes=()):
    """Annotation from consecutive inclusive (start, end) pairs."""
    labels = labels or [f"stage_{k + 1}" for k in range(len(bounds))]
    segs = tuple(Segment(lab, s, e) for lab, (s, e) in zip(labels, bounds))
    return TrajectoryAnnotation(tid, scheme, segs, tuple(mistakes))


def bounds_from_lengths(lengths):
    out, s = [], 0
    for L in lengths:
        out.append((s, s + L - 1))
        s += L
    return out


@pytest.fixture(scope="session")
def sim_config():
    return SimConfig()


@pytest.fixture(scope="session")
def protocol5():
    return AnnotationProtocol("sparse", tuple(f"stage_{k + 1}" for k in range(5)))


@pytest.fixture(scope="session")
def experts(sim_config):
    return [gen_expert(sim_config, derive_rng(1, "fixture-expert", i), f"e{i:03d}") for i in range(12)]


@pytest.fixture(scope="session")
def regressions(sim_config):
    return [gen_suboptimal(sim_config, derive_rng(1, "fixture-reg", i), f"r{i:03d}", kinds=["regression"]) for i in range(8)]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _acceptance[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        title, status, detail = _acceptance[n]
        terminalreporter.write_line(f"criterion {n} {status}: {title}" + (f" [{detail}]" if detail else ""))
