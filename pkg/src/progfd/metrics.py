"""Per-run and sweep-level metrics, plus the CSV formats used by the CLI.

CSV conventions: ``None`` is written as an empty cell, booleans as
``true``/``false`` and floats with ``repr`` so that parsing a file gives back
exactly the values that were written.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .allocator import assignment_from_alpha
from .detector import HealthLabel
from .simulator import FaultKind, RunLog, ScenarioConfig, run_scenario


class _Sentinel(enum.Enum):
    NOT_DETECTED = "not detected"

    def __repr__(self) -> str:
        return "NotDetected"

    def __bool__(self) -> bool:
        return False


NotDetected = _Sentinel.NOT_DETECTED


# --- per-run metrics ------------------------------------------------------------


def _faults_on(log: RunLog, robot: int):
    return [f for f in log.config.faults if f.robot == robot]


def first_fault_step(log: RunLog, robot: int) -> int | None:
    hit = np.flatnonzero(log.label[:, robot] == HealthLabel.FAULT)
    return int(hit[0]) if hit.size else None


def detection_delay(log: RunLog, robot: int):
    """Steps from the robot's first injected fault to its first Fault label.

    Negative when the label preceded the injection (a false alarm).
    """
    faults = _faults_on(log, robot)
    if not faults:
        raise ValueError(f"no fault was injected on robot {robot}")
    start = min(f.start_step for f in faults)
    first = first_fault_step(log, robot)
    return NotDetected if first is None else first - start


def nis_samples(log: RunLog, robot: int) -> np.ndarray:
    """Per-step NIS of the robot's streams, excluding each stream's first ``w`` samples."""
    w = log.config.detector.window_w
    mask = (log.stream_age[:, robot] > w) & np.isfinite(log.nis[:, robot])
    return log.nis[mask, robot]


def nis_stats(log: RunLog, robot: int) -> tuple[float, float]:
    """Mean and sample std of per-step NIS after each stream's burn-in."""
    if first_fault_step(log, robot) is not None:
        raise ValueError(f"robot {robot} was declared faulty; NIS statistics cover healthy streams only")
    vals = nis_samples(log, robot)
    if vals.size < 2:
        raise ValueError(f"robot {robot} has fewer than two post-burn-in NIS samples")
    return float(vals.mean()), float(vals.std(ddof=1))


def false_alarm_rate(logs) -> float:
    """Fraction of stream-steps labeled Suspect or Fault, pooled over ``logs``."""
    hits = total = 0
    for log in logs:
        if log.config.faults:
            raise ValueError("false_alarm_rate expects fault-free runs")
        active = log.stream_age > 0
        bad = (log.label == HealthLabel.SUSPECT) | (log.label == HealthLabel.FAULT)
        hits += int((active & bad).sum())
        total += int(active.sum())
    return hits / total if total else 0.0


def churn_series(log: RunLog) -> list[float]:
    """l1 change of the assignment matrix at each re-solve (initial solve excluded)."""
    out = []
    prev = log.initial_alpha
    for k in np.flatnonzero(log.solved):
        out.append(float(np.abs(log.alpha[k] - prev).sum()))
        prev = log.alpha[k]
    return out


def slack_usage(log: RunLog) -> float:
    """Time integral of the total barrier slack in force, in slack-steps."""
    return float(log.slack.sum())


def recompute_summary(log: RunLog) -> dict:
    """Rebuild the simulator's run summary from the per-step arrays."""
    N = log.label.shape[1]
    det = {i: first_fault_step(log, i) for i in range(N)}
    nis = {}
    for i in range(N):
        vals = nis_samples(log, i)
        nis[i] = None if det[i] is not None or vals.size < 2 else (float(vals.mean()), float(vals.std(ddof=1)))
    return {
        "detection_step": det,
        "completed_by": [int(v) for v in log.completed_by],
        "completed_step": [int(v) for v in log.completed_step],
        "nis": nis,
        "solves": int(log.solved.sum()),
        "total_churn": float(log.churn.sum()),
    }


# --- per-robot run summary ------------------------------------------------------

SUMMARY_FIELDS = (
    "robot", "faulty", "task_before", "task_after", "fault_init_step",
    "fault_det_step", "completed", "nis_mean", "nis_std",
)


def summary_rows(log: RunLog) -> list[dict]:
    """One row per robot: assignment around the first fault event and outcomes.

    The pivot is the first Fault declaration on an injected robot (or the
    first injection if nothing was declared). ``task_before`` is the
    allocation in force just before the pivot, ``task_after`` the allocation
    produced by the first re-solve at or after it. ``completed`` means the
    robot was never declared faulty and finished the last task it held
    (vacuously true for a robot that was never assigned).
    """
    cfg = log.config
    T, N = log.label.shape
    faulty = {f.robot for f in cfg.faults}
    dets = [first_fault_step(log, i) for i in faulty]
    dets = [d for d in dets if d is not None]
    pivot = min(dets) if dets else (min(f.start_step for f in cfg.faults) if cfg.faults else None)

    if pivot is None:
        before = after = assignment_from_alpha(log.initial_alpha)
    else:
        before = assignment_from_alpha(log.alpha[pivot - 1] if pivot > 0 else log.initial_alpha)
        solves = np.flatnonzero(log.solved[pivot:])
        after = assignment_from_alpha(log.alpha[pivot + solves[0]]) if solves.size else before

    rows = []
    for i in range(N):
        det = first_fault_step(log, i)
        held = log.task[:, i][log.task[:, i] >= 0]
        last = int(held[-1]) if held.size else None
        done = det is None and (last is None or int(log.completed_by[last]) == i)
        stats = None
        if det is None:
            vals = nis_samples(log, i)
            if vals.size >= 2:
                stats = (float(vals.mean()), float(vals.std(ddof=1)))
        starts = [f.start_step for f in cfg.faults if f.robot == i]
        rows.append(
            {
                "robot": i,
                "faulty": i in faulty,
                "task_before": before[i],
                "task_after": after[i],
                "fault_init_step": min(starts) if starts else None,
                "fault_det_step": det,
                "completed": bool(done),
                "nis_mean": None if stats is None else stats[0],
                "nis_std": None if stats is None else stats[1],
            }
        )
    return rows


# --- sweeps -------------------------------------------------------------------------


@dataclass
class SweepResult:
    """Accuracy and ROC per magnitude; ``roc_points[j]`` pairs with ``magnitudes[j]``."""

    kind: FaultKind
    magnitudes: list[float]
    runs: int
    accuracy: list[float]
    detection_rate: list[float]
    median_delay: list[float | None]
    roc_points: list[list[tuple[float, float]]]
    roc_thresholds: list[list[float]]
    auc: list[float]
    scores: list[tuple[list[float], list[float]]] = field(default_factory=list, repr=False)

    def auc_at(self, magnitude: float) -> float:
        return self.auc[self._index(magnitude)]

    def accuracy_at(self, magnitude: float) -> float:
        return self.accuracy[self._index(magnitude)]

    def _index(self, magnitude: float) -> int:
        for j, m in enumerate(self.magnitudes):
            if math.isclose(m, magnitude, rel_tol=1e-9, abs_tol=1e-12):
                return j
        raise KeyError(magnitude)


def roc_curve(positive, negative) -> tuple[list[tuple[float, float]], list[float]]:
    """ROC points for the rule ``score >= threshold``, sorted by FPR.

    The first point ``(0, 0)`` carries threshold ``inf``.
    """
    pos = np.sort(np.asarray(positive, dtype=float))
    neg = np.sort(np.asarray(negative, dtype=float))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC needs at least one positive and one negative score")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    points = [(0.0, 0.0)]
    taus = [math.inf]
    for t in thresholds:
        tpr = float(pos.size - np.searchsorted(pos, t, side="left")) / pos.size
        fpr = float(neg.size - np.searchsorted(neg, t, side="left")) / neg.size
        points.append((fpr, tpr))
        taus.append(float(t))
    return points, taus


def trapezoid_auc(points) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def _window_maxima(series: np.ndarray, valid: np.ndarray, start: int, H: int, first_partial: bool) -> list[float]:
    out = []
    T = series.shape[0]
    j = 0
    for a in range(start, T, H):
        seg = valid[a : a + H]
        full = seg.size == H and seg.all()
        if full or (first_partial and j == 0 and seg.any()):
            out.append(float(series[a : a + H][seg].max()))
        j += 1
    return out


def roc_scores(log: RunLog, horizon: int | None = None) -> tuple[list[float], list[float]]:
    """Detection scores for one run: maxima of the windowed NIS over blocks of ``horizon`` steps.

    Positives tile the faulted robot's record from the injection step (the
    first block may be cut short by the detection itself); negatives tile
    every fault-free robot's stream after burn-in. Gated samples are skipped.
    """
    cfg = log.config
    w = cfg.detector.window_w
    H = 2 * w if horizon is None else horizon
    faulty = {f.robot: f.start_step for f in cfg.faults}
    gated = log.label == HealthLabel.UNINFORMATIVE
    pos, neg = [], []
    for i in range(log.label.shape[1]):
        series = log.windowed_nis[:, i]
        valid = np.isfinite(series) & ~gated[:, i]
        if i in faulty:
            pos += _window_maxima(series, valid & (log.stream_age[:, i] > 0), faulty[i], H, True)
        else:
            valid &= log.stream_age[:, i] > w
            first = int(np.argmax(valid)) if valid.any() else series.shape[0]
            neg += _window_maxima(series, valid, first, H, False)
    return pos, neg


def run_accuracy(log: RunLog) -> tuple[bool, bool, int | None]:
    """(accurate, detected, delay) for a single-fault run.

    Accurate: the faulted robot is declared faulty at or after injection and
    no other robot is ever declared faulty.
    """
    f = log.config.faults[0]
    first = first_fault_step(log, f.robot)
    detected = first is not None and first >= f.start_step
    others = any(first_fault_step(log, j) is not None for j in range(log.label.shape[1]) if j != f.robot)
    return detected and not others, detected, (first - f.start_step) if detected else None


def _sweep_job(args):
    cfg, kind, magnitude, seed, horizon = args
    from dataclasses import replace

    log = run_scenario(replace(cfg.with_fault_magnitude(kind, magnitude), seed=seed))
    acc, det, delay = run_accuracy(log)
    pos, neg = roc_scores(log, horizon)
    return acc, det, delay, pos, neg


def roc_and_accuracy_sweep(
    base_cfg: ScenarioConfig,
    kind,
    magnitudes,
    runs_per_magnitude: int,
    jobs: int = 1,
    horizon: int | None = None,
) -> SweepResult:
    """Run seeds ``0..runs-1`` for each magnitude of the base config's ``kind`` fault."""
    kind = FaultKind(kind)
    if runs_per_magnitude < 1:
        raise ValueError("runs_per_magnitude must be >= 1")
    matching = [f for f in base_cfg.faults if f.kind == kind]
    if len(matching) != 1 or len(base_cfg.faults) != 1:
        raise ValueError(f"base config must carry exactly one fault, of kind {kind.value}")
    mags = [float(m) for m in magnitudes]
    tasks = [(base_cfg, kind, m, s, horizon) for m in mags for s in range(runs_per_magnitude)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_sweep_job(t) for t in tasks]

    out = SweepResult(kind, mags, runs_per_magnitude, [], [], [], [], [], [], [])
    R = runs_per_magnitude
    for j in range(len(mags)):
        block = results[j * R : (j + 1) * R]
        out.accuracy.append(sum(b[0] for b in block) / R)
        out.detection_rate.append(sum(b[1] for b in block) / R)
        delays = [b[2] for b in block if b[2] is not None]
        out.median_delay.append(float(np.median(delays)) if delays else None)
        pos = [s for b in block for s in b[3]]
        neg = [s for b in block for s in b[4]]
        pts, taus = roc_curve(pos, neg)
        out.roc_points.append(pts)
        out.roc_thresholds.append(taus)
        out.auc.append(trapezoid_auc(pts))
        out.scores.append((pos, neg))
    return out


def magnitude_grid(lo: float, hi: float, step: float) -> list[float]:
    """Inclusive grid, rounded to the step's decimal resolution."""
    if step <= 0 or hi < lo:
        raise ValueError("need step > 0 and hi >= lo")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    digits = max(0, -int(math.floor(math.log10(step))) + 2)
    return [round(lo + k * step, digits) for k in range(n)]


# --- CSV ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, enum.Enum):
        return str(v)
    return str(v)


def _write(path, fields, rows) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(fields)
        for row in rows:
            wr.writerow([_fmt(row[k]) for k in fields])


def _read(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _opt(conv):
    return lambda s: None if s == "" else conv(s)


def _bool(s: str) -> bool:
    if s not in ("true", "false"):
        raise ValueError(f"expected true/false, got {s!r}")
    return s == "true"


_SUMMARY_TYPES = {
    "robot": int, "faulty": _bool, "task_before": _opt(int), "task_after": _opt(int),
    "fault_init_step": _opt(int), "fault_det_step": _opt(int), "completed": _bool,
    "nis_mean": _opt(float), "nis_std": _opt(float),
}


def write_summary_csv(path, rows) -> None:
    _write(path, SUMMARY_FIELDS, rows)


def read_summary_csv(path) -> list[dict]:
    return [{k: _SUMMARY_TYPES[k](r[k]) for k in SUMMARY_FIELDS} for r in _read(path)]


STEP_FIELDS = (
    "step", "robot", "task", "stream_age", "x", "y", "true_progress", "measured", "dropped",
    "nis", "windowed_nis", "rate_hat", "trace_p", "label", "confidence",
)


def step_rows(log: RunLog):
    """One row per step per active stream."""
    T, N = log.label.shape
    for k in range(T):
        for i in range(N):
            if log.stream_age[k, i] == 0:
                continue
            yield {
                "step": k,
                "robot": i,
                "task": int(log.task[k, i]),
                "stream_age": int(log.stream_age[k, i]),
                "x": float(log.positions[k, i, 0]),
                "y": float(log.positions[k, i, 1]),
                "true_progress": float(log.true_progress[k, i]),
                "measured": None if log.dropped[k, i] else float(log.measured[k, i]),
                "dropped": bool(log.dropped[k, i]),
                "nis": None if log.dropped[k, i] else float(log.nis[k, i]),
                "windowed_nis": None if math.isnan(log.windowed_nis[k, i]) else float(log.windowed_nis[k, i]),
                "rate_hat": float(log.rate_hat[k, i]),
                "trace_p": float(log.trace_p[k, i]),
                "label": str(HealthLabel(int(log.label[k, i]))),
                "confidence": float(log.confidence[k, i]),
            }


def write_steps_csv(path, log: RunLog) -> None:
    _write(path, STEP_FIELDS, step_rows(log))


def allocation_fields(N: int, M: int) -> tuple[str, ...]:
    return ("step", "solved", "churn", "slack", "iterations") + tuple(
        f"alpha_{i}_{m}" for i in range(N) for m in range(M)
    )


def write_allocation_csv(path, log: RunLog) -> None:
    T, N, M = log.alpha.shape
    fields = allocation_fields(N, M)

    def rows():
        for k in range(T):
            row = {
                "step": k,
                "solved": bool(log.solved[k]),
                "churn": float(log.churn[k]),
                "slack": float(log.slack[k]),
                "iterations": int(log.qp_iters[k]),
            }
            for i in range(N):
                for m in range(M):
                    row[f"alpha_{i}_{m}"] = float(log.alpha[k, i, m])
            yield row

    _write(path, fields, rows())


SWEEP_FIELDS = ("magnitude", "accuracy", "n_runs", "detection_rate", "median_delay", "auc")
ROC_FIELDS = ("magnitude", "fpr", "tpr", "threshold")


def sweep_rows(res: SweepResult) -> list[dict]:
    return [
        {
            "magnitude": m,
            "accuracy": res.accuracy[j],
            "n_runs": res.runs,
            "detection_rate": res.detection_rate[j],
            "median_delay": res.median_delay[j],
            "auc": res.auc[j],
        }
        for j, m in enumerate(res.magnitudes)
    ]


def roc_rows(res: SweepResult, j: int) -> list[dict]:
    m = res.magnitudes[j]
    return [
        {"magnitude": m, "fpr": p[0], "tpr": p[1], "threshold": t}
        for p, t in zip(res.roc_points[j], res.roc_thresholds[j])
    ]


def write_sweep_csv(path, res: SweepResult) -> None:
    _write(path, SWEEP_FIELDS, sweep_rows(res))


def read_sweep_csv(path) -> list[dict]:
    types = {"magnitude": float, "accuracy": float, "n_runs": int, "detection_rate": float,
             "median_delay": _opt(float), "auc": float}
    return [{k: types[k](r[k]) for k in SWEEP_FIELDS} for r in _read(path)]


def write_roc_csv(path, res: SweepResult, j: int) -> None:
    _write(path, ROC_FIELDS, roc_rows(res, j))


def read_roc_csv(path) -> list[dict]:
    return [{k: float(r[k]) for k in ROC_FIELDS} for r in _read(path)]


def default_jobs() -> int:
    return max(1, min(8, os.cpu_count() or 1))
