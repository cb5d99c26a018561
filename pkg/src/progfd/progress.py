"""Normalized task-progress signals in [0, 1].

Three task families are supported: spatial goal-reaching, discrete
workloads, and composites of subtasks.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


class Progress(float):
    """A completion fraction, clamped to [0, 1] at construction."""

    def __new__(cls, value: float) -> "Progress":
        v = float(value)
        if math.isnan(v):
            raise ValueError("progress is NaN")
        return super().__new__(cls, min(1.0, max(0.0, v)))

    @property
    def value(self) -> float:
        return float(self)


def spatial_progress(current_pos, start_pos, goal_pos, clip_eps: float = 0.01) -> Progress:
    """Remaining-distance progress ``1 - |x - goal| / |start - goal|``.

    Values within ``clip_eps`` of either endpoint snap to it.
    """
    start = np.asarray(start_pos, dtype=float)
    goal = np.asarray(goal_pos, dtype=float)
    total = float(np.hypot(*(start - goal)))
    if total <= 0.0:
        raise ValueError("zero-length task")
    remaining = float(np.hypot(*(np.asarray(current_pos, dtype=float) - goal)))
    r = min(1.0, max(0.0, 1.0 - remaining / total))
    if r < clip_eps:
        r = 0.0
    elif r > 1.0 - clip_eps:
        r = 1.0
    return Progress(r)


def workload_progress(items_done: int, items_assigned: int) -> Progress:
    if items_assigned <= 0:
        raise ValueError("empty workload")
    if not 0 <= items_done <= items_assigned:
        raise ValueError(f"items_done={items_done} outside [0, {items_assigned}]")
    return Progress(items_done / items_assigned)


def composite_progress(
    subprogresses: Sequence[float],
    weights: Sequence[float] | None = None,
    mode: str = "weighted_sum",
    smoothing: float = 50.0,
) -> Progress:
    """Aggregate subtask progress by clamped weighted sum or smooth minimum.

    The smooth minimum is the Boltzmann-weighted mean
    ``sum(r_k exp(-s r_k)) / sum(exp(-s r_k))``: it equals the common value
    when all subtasks agree and lies within ``ln(n)/s`` above the exact min.
    """
    r = np.asarray(subprogresses, dtype=float)
    if r.size == 0:
        raise ValueError("no subtasks")
    if mode == "weighted_sum":
        if weights is None:
            raise ValueError("weighted_sum needs weights")
        w = np.asarray(weights, dtype=float)
        if w.shape != r.shape:
            raise ValueError("subprogresses and weights differ in length")
        if np.any(w < 0):
            raise ValueError("negative weight")
        return Progress(float(w @ r))
    if mode == "smooth_min":
        if weights is not None and np.any(np.asarray(weights, dtype=float) < 0):
            raise ValueError("negative weight")
        if smoothing <= 0:
            raise ValueError("smoothing must be positive")
        # shift by the min so the exponentials cannot underflow to 0/0
        e = np.exp(-smoothing * (r - r.min()))
        return Progress(float(e @ r / e.sum()))
    raise ValueError(f"unknown mode {mode!r}")
