import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from progfd.progress import Progress, composite_progress, spatial_progress, workload_progress

unit = st.floats(0.0, 1.0)
point = st.tuples(unit, unit)


def test_progress_clamps():
    assert Progress(1.7) == 1.0
    assert Progress(-0.2) == 0.0
    assert Progress(0.3).value == 0.3
    with pytest.raises(ValueError):
        Progress(float("nan"))


def test_spatial_endpoints():
    start, goal = (0.3, 0.1), (0.35, 0.5)
    assert spatial_progress(start, start, goal) == 0.0
    assert spatial_progress(goal, start, goal) == 1.0


def test_spatial_midpoint_and_path_length():
    start, goal = np.array([0.3, 0.1]), np.array([0.35, 0.5])
    assert spatial_progress((start + goal) / 2, start, goal) == pytest.approx(0.5, abs=1e-12)
    # straight-line length of robot 0 to task 0 in the reference layout
    assert math.hypot(*(goal - start)) == pytest.approx(0.403, abs=5e-4)


def test_spatial_snaps_near_endpoints():
    start, goal = np.array([0.0, 0.0]), np.array([1.0, 0.0])
    assert spatial_progress((0.005, 0.0), start, goal) == 0.0
    assert spatial_progress((0.995, 0.0), start, goal) == 1.0
    assert spatial_progress((0.995, 0.0), start, goal, clip_eps=0.0) == pytest.approx(0.995)


def test_spatial_zero_length():
    with pytest.raises(ValueError, match="zero-length task"):
        spatial_progress((0.1, 0.1), (0.2, 0.2), (0.2, 0.2))


@pytest.mark.parametrize("done,total,expected", [(0, 10, 0.0), (10, 10, 1.0), (3, 8, 0.375)])
def test_workload(done, total, expected):
    assert workload_progress(done, total) == expected


def test_workload_errors():
    with pytest.raises(ValueError, match="empty workload"):
        workload_progress(0, 0)
    with pytest.raises(ValueError):
        workload_progress(5, 4)


def test_composite_examples():
    assert composite_progress([0.5], [1.0]) == 0.5
    assert composite_progress([0.4, 0.6], [1.0, 1.0]) == 1.0
    assert composite_progress([0.2, 0.9], mode="smooth_min", smoothing=100) == pytest.approx(0.2, abs=1e-3)


def test_composite_errors():
    with pytest.raises(ValueError):
        composite_progress([], [])
    with pytest.raises(ValueError, match="negative weight"):
        composite_progress([0.2, 0.3], [1.0, -0.1])
    with pytest.raises(ValueError):
        composite_progress([0.2], [1.0], mode="median")


def test_smooth_min_exact_when_equal():
    assert composite_progress([0.4] * 5, mode="smooth_min", smoothing=3.0) == pytest.approx(0.4, abs=1e-12)


@given(st.lists(unit, min_size=1, max_size=6), st.floats(0.5, 500.0))
def test_smooth_min_bound(values, s):
    got = composite_progress(values, mode="smooth_min", smoothing=s)
    assert 0.0 <= got <= 1.0
    assert abs(got - min(values)) <= 2 * math.log(len(values)) / s + 1e-12


@given(st.lists(st.tuples(st.floats(-1, 2), st.floats(0, 3)), min_size=1, max_size=6))
def test_weighted_sum_in_unit_interval(pairs):
    values, weights = zip(*pairs)
    assert 0.0 <= composite_progress(values, weights) <= 1.0


@given(point, point, point)
def test_spatial_in_unit_interval(cur, start, goal):
    if math.dist(start, goal) < 1e-6:
        return
    assert 0.0 <= spatial_progress(cur, start, goal) <= 1.0


@given(point, point, st.lists(unit, min_size=2, max_size=10))
def test_spatial_monotone_along_segment(start, goal, fractions):
    start, goal = np.array(start), np.array(goal)
    if np.linalg.norm(goal - start) < 1e-6:
        return
    fr = sorted(fractions)
    vals = [spatial_progress(start + f * (goal - start), start, goal) for f in fr]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
