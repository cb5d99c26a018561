"""Health labels from Kalman innovations.

Per stream, each sample goes through

1. the NIS chi-square test on a sliding window mean,
2. a low progress-rate (stall) gate,
3. an uncertainty gate on ``trace(P)``,
4. debounce counters that move the label Healthy -> Suspect -> Fault.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

from scipy.special import gammainc


class HealthLabel(enum.IntEnum):
    HEALTHY = 0
    SUSPECT = 1
    FAULT = 2
    UNINFORMATIVE = 3

    def __str__(self) -> str:
        return self.name.lower()


def nis(innovation: float, S: float) -> float:
    if not S > 0:
        raise ValueError("innovation variance must be positive")
    return innovation * innovation / S


def chi2_threshold(alpha: float, dof: int = 1, tol: float = 1e-12) -> float:
    """Upper ``alpha`` quantile of chi-square(dof) by bisection on the CDF."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if dof < 1:
        raise ValueError("dof must be >= 1")
    target = 1.0 - alpha
    a = 0.5 * dof
    lo, hi = 0.0, max(1.0, float(dof))
    while gammainc(a, 0.5 * hi) < target:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if gammainc(a, 0.5 * mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def windowed_nis(nis_window, w: int | None = None) -> float:
    """Mean of the most recent ``min(w, len)`` NIS samples."""
    n = len(nis_window)
    if n == 0:
        raise ValueError("empty NIS window")
    if w is None or w >= n:
        return sum(nis_window) / n
    vals = list(nis_window)[-w:]
    return sum(vals) / w


def confidence(d: float, tau: float, eta: float) -> float:
    if tau <= 0 or eta <= 0:
        raise ValueError("tau and eta must be positive")
    return min(1.0, max(0.0, (d / tau - 1.0) / eta))


@dataclass(frozen=True)
class DetectorConfig:
    alpha: float = 0.05
    window_w: int = 15
    beta: float = 0.005
    stall_L: int = 4
    gamma: float = 0.01
    K_s: int = 2
    K_f: int = 5
    K_out: int = 10
    eta: float = 1.0
    allow_fault_recovery: bool = False
    use_stall_gate: bool = True
    use_uncertainty_gate: bool = True
    #: samples required before the NIS test may trigger (None: a full window)
    min_fill: int | None = None

    def __post_init__(self):
        problems = []
        if self.min_fill is not None and not 1 <= self.min_fill <= self.window_w:
            problems.append("min_fill must lie in [1, window_w]")
        if not 0 < self.alpha < 1:
            problems.append("alpha must lie in (0, 1)")
        if self.window_w < 1:
            problems.append("window_w must be >= 1")
        if not self.beta > 0:
            problems.append("beta must be positive")
        if self.stall_L < 1:
            problems.append("stall_L must be >= 1")
        if not self.gamma > 0:
            problems.append("gamma must be positive")
        if self.K_s < 1:
            problems.append("K_s must be >= 1")
        if self.K_f <= self.K_s:
            problems.append("K_f must exceed K_s")
        if self.K_out < 1:
            problems.append("K_out must be >= 1")
        if not self.eta > 0:
            problems.append("eta must be positive")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def arming_samples(self) -> int:
        return self.window_w if self.min_fill is None else self.min_fill

    @cached_property
    def tau(self) -> float:
        """Single-sample NIS threshold."""
        return chi2_threshold(self.alpha, 1)

    @cached_property
    def mean_thresholds(self) -> tuple[float, ...]:
        """Threshold on the mean of ``n`` samples, indexed by ``n - 1``."""
        return tuple(chi2_threshold(self.alpha, n) / n for n in range(1, self.window_w + 1))


@dataclass(slots=True)
class DetectorState:
    label: HealthLabel = HealthLabel.HEALTHY
    trigger_run: int = 0
    clear_run: int = 0
    stall_run: int = 0
    nis_window: deque = field(default_factory=deque)
    confidence: float = 0.0
    # diagnostics from the last step
    statistic: float = math.nan
    nis_trigger: bool = False
    stall_trigger: bool = False
    gated: bool = False

    def reset_stream(self) -> None:
        """Forget stream-level evidence when the filter is re-initialized; the label is kept."""
        self.nis_window.clear()
        self.stall_run = 0
        self.statistic = math.nan


def detector_step(
    state: DetectorState,
    cfg: DetectorConfig,
    d: float | None,
    r_dot_hat: float,
    trace_P: float,
) -> tuple[DetectorState, HealthLabel, float]:
    """Advance one sample, in place. ``d=None`` means no measurement arrived.

    ``beta`` is compared against ``|r_dot_hat|`` directly, so it shares the
    rate's units (see :class:`progfd.simulator.Stream` for the per-sample
    convention used in simulation).
    """
    H, S, F, U = HealthLabel.HEALTHY, HealthLabel.SUSPECT, HealthLabel.FAULT, HealthLabel.UNINFORMATIVE
    win = state.nis_window

    # (1) windowed NIS test
    if d is not None:
        win.append(d)
        if len(win) > cfg.window_w:
            win.popleft()
    n = len(win)
    if n:
        state.statistic = sum(win) / n
        state.nis_trigger = (
            d is not None and n >= cfg.arming_samples and state.statistic > cfg.mean_thresholds[n - 1]
        )
    else:
        state.statistic = math.nan
        state.nis_trigger = False

    # (2) stall gate
    if abs(r_dot_hat) < cfg.beta:
        state.stall_run += 1
    else:
        state.stall_run = 0
    state.stall_trigger = cfg.use_stall_gate and state.stall_run >= cfg.stall_L

    # (3) uncertainty gate: suspend declarations, freeze the debounce counters
    state.gated = cfg.use_uncertainty_gate and trace_P > cfg.gamma
    if state.gated:
        if state.label != F:
            state.label = U
        state.confidence = 0.0
        return state, state.label, 0.0

    # (4) debounce
    if state.nis_trigger or state.stall_trigger:
        state.trigger_run += 1
        state.clear_run = 0
    else:
        state.clear_run += 1
        state.trigger_run = 0

    # (5) transitions
    lab = state.label
    if lab == H or lab == U:
        if state.trigger_run >= cfg.K_s:
            state.label = S
        elif lab == U and state.clear_run >= cfg.K_out:
            state.label = H
    elif lab == S:
        if state.trigger_run >= cfg.K_f:
            state.label = F
        elif state.clear_run >= cfg.K_out:
            state.label = H
            state.clear_run = 0
    elif lab == F and cfg.allow_fault_recovery and state.clear_run >= cfg.K_out:
        state.label = S
        state.clear_run = 0

    # (6) confidence from the per-sample statistic
    state.confidence = confidence(d, cfg.tau, cfg.eta) if d is not None else 0.0
    return state, state.label, state.confidence
