"""Discrete-time team simulator with fault injection.

Robots are single integrators in the unit square that drive straight to
their assigned goal at ``u_max``. Every tick runs

    execute -> completion check -> measure / filter / detect -> (re)allocate

and appends one record per robot to the :class:`RunLog`.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import estimator as est
from .allocator import (
    AllocationInfeasible,
    AllocationSolution,
    HealthPolicy,
    TeamSpec,
    build_allocation_qp,
    health_mask,
    health_weights,
    should_reallocate,
    solve_allocation,
)
from .detector import DetectorConfig, DetectorState, HealthLabel, detector_step, nis


class FaultKind(str, enum.Enum):
    NOISE_INCREASE = "NoiseIncrease"
    VELOCITY_SLIP_BIAS = "VelocitySlipBias"
    COMM_DROPOUT = "CommDropout"
    TASK_ABANDONMENT = "TaskAbandonment"


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    robot: int
    start_step: int
    end_step: int | None = None
    magnitude: float = 0.0
    #: VelocitySlipBias only: "offset" adds ``magnitude`` to every faulty
    #: reading, "ramp" adds ``magnitude * (steps since start + 1)``
    bias_profile: str = "ramp"

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        if self.bias_profile not in ("offset", "ramp"):
            raise ValueError("bias_profile must be 'offset' or 'ramp'")
        if self.start_step < 0:
            raise ValueError("start_step must be >= 0")
        if self.end_step is not None and self.end_step <= self.start_step:
            raise ValueError("end_step must exceed start_step")

    def active(self, step: int) -> bool:
        return step >= self.start_step and (self.end_step is None or step < self.end_step)


@dataclass
class ScenarioConfig:
    robot_starts: np.ndarray
    task_goals: np.ndarray
    team: TeamSpec
    policy: HealthPolicy = field(default_factory=HealthPolicy)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    faults: list[FaultSpec] = field(default_factory=list)
    name: str = "scenario"
    dt: float = 0.1
    steps: int = 200
    seed: int = 0
    sigma_xy: float = 0.007
    kf_variant: str = est.CV
    adaptive_q: bool = False
    P0: np.ndarray = field(default_factory=lambda: np.diag([1e-4, 1e-4]))
    Q0_base: np.ndarray = field(default_factory=lambda: est.Q0_BASE.copy())
    completion_radius: float = 0.02
    L_min: float = est.L_MIN

    def __post_init__(self):
        self.robot_starts = np.asarray(self.robot_starts, dtype=float)
        self.task_goals = np.asarray(self.task_goals, dtype=float)
        self.P0 = np.asarray(self.P0, dtype=float)
        self.Q0_base = np.asarray(self.Q0_base, dtype=float)
        N, M = self.team.N, self.team.M
        if self.robot_starts.shape != (N, 2):
            raise ValueError(f"robot_starts must be {N} x 2 to match the specialization matrix")
        if self.task_goals.shape != (M, 2):
            raise ValueError(f"task_goals must be {M} x 2 to match the specialization matrix")
        for what, pts in (("robot_starts", self.robot_starts), ("task_goals", self.task_goals)):
            if np.any(pts < 0) or np.any(pts > 1):
                raise ValueError(f"{what} must lie in the unit workspace [0, 1]^2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.sigma_xy >= 0:
            raise ValueError("sigma_xy must be non-negative")
        if self.kf_variant not in (est.CV, est.RT):
            raise ValueError("kf_variant must be CV or RT")
        for f in self.faults:
            if not 0 <= f.robot < N:
                raise ValueError(f"fault robot {f.robot} out of range")

    @property
    def N(self) -> int:
        return self.team.N

    @property
    def M(self) -> int:
        return self.team.M

    def with_fault_magnitude(self, kind: FaultKind, magnitude: float) -> "ScenarioConfig":
        faults = [replace(f, magnitude=magnitude) if f.kind == FaultKind(kind) else f for f in self.faults]
        return replace(self, faults=faults)


# --- dynamics and sensing ----------------------------------------------------


def step_dynamics(positions, controls, dt: float) -> np.ndarray:
    """Euler step of single integrators, clamped to the unit workspace."""
    return np.clip(np.asarray(positions, dtype=float) + dt * np.asarray(controls, dtype=float), 0.0, 1.0)


def goto_controls(positions, goals, assignment, u_max: float, dt: float) -> np.ndarray:
    """Straight-line drive at ``u_max``, landing exactly on the goal on the last step."""
    U = np.zeros((len(assignment), 2))
    for i, m in enumerate(assignment):
        if m is None:
            continue
        v = goals[m] - positions[i]
        dist = math.hypot(v[0], v[1])
        if dist > 0:
            U[i] = v * (min(u_max, dist / dt) / dist)
    return U


def apply_actuation_faults(controls, active_faults) -> np.ndarray:
    U = np.array(controls, dtype=float, copy=True)
    for f in active_faults:
        if f.kind == FaultKind.TASK_ABANDONMENT:
            U[f.robot] = 0.0
    return U


@dataclass
class World:
    positions: np.ndarray
    goals: np.ndarray
    assignment: list
    latched: dict  # robot -> distance to goal at assignment time
    sigma_xy: float
    noise: np.ndarray  # N x steps x 2 standard normals
    step: int = 0


def measure_progress(world: World, robot: int, task: int, active_faults) -> float | None:
    """Noisy progress reading, or ``None`` when the link is down.

    The reading is not clamped: noise and bias may carry it outside [0, 1],
    and clamping would bias the innovation sequence.
    """
    if world.assignment[robot] != task:
        raise ValueError(f"robot {robot} is not assigned to task {task}")
    sigma = world.sigma_xy
    bias = 0.0
    for f in active_faults:
        if f.robot != robot:
            continue
        if f.kind == FaultKind.COMM_DROPOUT:
            return None
        if f.kind == FaultKind.NOISE_INCREASE:
            sigma = f.magnitude
        elif f.kind == FaultKind.VELOCITY_SLIP_BIAS:
            steps = world.step - f.start_step + 1 if f.bias_profile == "ramp" else 1
            bias += f.magnitude * steps
    n = world.noise[robot, world.step]
    px = world.positions[robot, 0] + sigma * n[0] - world.goals[task, 0]
    py = world.positions[robot, 1] + sigma * n[1] - world.goals[task, 1]
    return 1.0 - math.hypot(px, py) / world.latched[robot] + bias


def true_progress(world: World, robot: int, task: int) -> float:
    d = float(np.hypot(*(world.positions[robot] - world.goals[task])))
    return min(1.0, max(0.0, 1.0 - d / world.latched[robot]))


def noise_streams(seed: int, N: int, steps: int) -> np.ndarray:
    """Per-robot sensor noise drawn from independent child seeds of ``seed``."""
    out = np.empty((N, steps, 2))
    for i in range(N):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0, i)))
        out[i] = rng.standard_normal((steps, 2))
    return out


# --- per-stream estimation ---------------------------------------------------


class Stream:
    """Filter for one (robot, task) pair.

    The detector's stall gate sees the rate in progress per sample
    (``rdot * dt``), so ``DetectorConfig.beta`` is a per-sample threshold.
    """

    __slots__ = ("task", "L0", "model", "kf", "nominal_rate", "start_step", "age", "_nis_buf", "adaptive", "w")

    def __init__(self, cfg: ScenarioConfig, task: int, L0: float, step: int):
        Q, R = est.scale_covariances(L0, cfg.sigma_xy if cfg.sigma_xy > 0 else 1e-6, cfg.Q0_base, cfg.L_min)
        self.task = task
        self.L0 = L0
        self.model = est.KfModel(cfg.kf_variant, cfg.dt, Q, R)
        self.nominal_rate = cfg.team.u_max / max(L0, cfg.L_min)
        self.kf = est.kf_init(0.0, self.nominal_rate, cfg.P0)
        self.start_step = step
        self.age = 0
        self.adaptive = cfg.adaptive_q
        self.w = cfg.detector.window_w
        self._nis_buf: list[float] = []

    def advance(self, y: float | None) -> tuple[float, float] | None:
        """One filter step; returns ``(nis, normalized innovation)`` or ``None`` on dropout."""
        model = self.model
        est.kf_predict(self.kf, model, self.nominal_rate if model.variant == est.RT else None)
        self.age += 1
        if y is None:
            return None
        _, innov, S = est.kf_update(self.kf, model, y)
        d = nis(innov, S)
        if self.adaptive:
            self._nis_buf.append(d)
            if len(self._nis_buf) == self.w:
                self.model = est.inflate_process_noise(model, sum(self._nis_buf) / self.w)
                self._nis_buf.clear()
        return d, innov / math.sqrt(S)


# --- run log -----------------------------------------------------------------


@dataclass
class RunLog:
    config: ScenarioConfig
    positions: np.ndarray  # T x N x 2, after the tick's motion
    task: np.ndarray  # T x N, assigned task during the tick (-1 none)
    stream_age: np.ndarray  # T x N, samples seen by the stream (0 none)
    true_progress: np.ndarray  # T x N
    measured: np.ndarray  # T x N, NaN when dropped or no stream
    dropped: np.ndarray  # T x N bool
    nis: np.ndarray  # T x N
    innovation: np.ndarray  # T x N, innovation / sqrt(S)
    windowed_nis: np.ndarray  # T x N
    rate_hat: np.ndarray  # T x N, progress per second
    trace_p: np.ndarray  # T x N
    label: np.ndarray  # T x N, HealthLabel codes after the tick
    confidence: np.ndarray  # T x N
    alpha: np.ndarray  # T x N x M, allocation in force after the tick
    solved: np.ndarray  # T bool: a re-solve happened at the end of the tick
    churn: np.ndarray  # T, solver-reported churn on solve ticks
    slack: np.ndarray  # T, sum of delta of the allocation in force
    qp_time: np.ndarray  # T
    qp_iters: np.ndarray  # T
    detector_time: np.ndarray  # T
    initial_alpha: np.ndarray  # N x M
    completed_by: np.ndarray  # M, robot index or -1
    completed_step: np.ndarray  # M, or -1
    summary: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.label.shape[0]


def _summary(log: RunLog) -> dict:
    """Per-run summary computed from the step records."""
    cfg = log.config
    T, N = log.label.shape
    w = cfg.detector.window_w
    det = {}
    for i in range(N):
        hit = np.flatnonzero(log.label[:, i] == HealthLabel.FAULT)
        det[i] = int(hit[0]) if hit.size else None
    nis_stats = {}
    for i in range(N):
        if det[i] is not None:
            nis_stats[i] = None
            continue
        mask = (log.stream_age[:, i] > w) & np.isfinite(log.nis[:, i])
        vals = log.nis[mask, i]
        nis_stats[i] = (float(vals.mean()), float(vals.std(ddof=1))) if vals.size > 1 else None
    return {
        "detection_step": det,
        "completed_by": [int(v) for v in log.completed_by],
        "completed_step": [int(v) for v in log.completed_step],
        "nis": nis_stats,
        "solves": int(log.solved.sum()),
        "total_churn": float(log.churn.sum()),
    }


# --- main loop ---------------------------------------------------------------


def _allocate(cfg, positions, labels, prev: AllocationSolution | None, demand, step: int = -1):
    team, pol = cfg.team, cfg.policy
    w, c = health_weights(team, pol, labels)
    g = health_mask(team, labels)
    prob = build_allocation_qp(
        team,
        positions,
        cfg.task_goals,
        w,
        c,
        g,
        prev_alpha=None if prev is None else prev.alpha,
        lam=pol.lam,
        demand=demand,
        gated_tasks=pol.gated_tasks,
    )
    try:
        return solve_allocation(prob, warm=prev)
    except AllocationInfeasible as exc:
        exc.step = step
        raise


def run_scenario(cfg: ScenarioConfig) -> RunLog:
    N, M, T = cfg.N, cfg.M, cfg.steps
    dt, dcfg = cfg.dt, cfg.detector
    goals = cfg.task_goals
    world = World(
        positions=cfg.robot_starts.copy(),
        goals=goals,
        assignment=[None] * N,
        latched={},
        sigma_xy=cfg.sigma_xy,
        noise=noise_streams(cfg.seed, N, T),
    )
    dets = [DetectorState() for _ in range(N)]
    streams: list[Stream | None] = [None] * N
    completed_by = np.full(M, -1)
    completed_step = np.full(M, -1)

    nan = np.full((T, N), np.nan)
    log = RunLog(
        config=cfg,
        positions=np.zeros((T, N, 2)),
        task=np.full((T, N), -1),
        stream_age=np.zeros((T, N), dtype=int),
        true_progress=nan.copy(),
        measured=nan.copy(),
        dropped=np.zeros((T, N), dtype=bool),
        nis=nan.copy(),
        innovation=nan.copy(),
        windowed_nis=nan.copy(),
        rate_hat=nan.copy(),
        trace_p=nan.copy(),
        label=np.zeros((T, N), dtype=int),
        confidence=np.zeros((T, N)),
        alpha=np.zeros((T, N, M)),
        solved=np.zeros(T, dtype=bool),
        churn=np.zeros(T),
        slack=np.zeros(T),
        qp_time=np.zeros(T),
        qp_iters=np.zeros(T, dtype=int),
        detector_time=np.zeros(T),
        initial_alpha=np.zeros((N, M)),
        completed_by=completed_by,
        completed_step=completed_step,
    )

    def assign(sol: AllocationSolution, step: int):
        new = sol.assignment()
        for i in range(N):
            if new[i] == world.assignment[i]:
                continue
            world.assignment[i] = new[i]
            if new[i] is None:
                streams[i] = None
                continue
            L0 = float(np.hypot(*(world.positions[i] - goals[new[i]])))
            world.latched[i] = max(L0, cfg.L_min)
            streams[i] = Stream(cfg, new[i], world.latched[i], step)
            dets[i].reset_stream()

    labels = [d.label for d in dets]
    demand = np.ones(M)
    alloc = _allocate(cfg, world.positions, labels, None, demand)
    log.initial_alpha = alloc.alpha.copy()
    assign(alloc, 0)
    last_solve = 0
    pending = False

    for k in range(T):
        world.step = k
        active = [f for f in cfg.faults if f.active(k)]

        # execute
        U = goto_controls(world.positions, goals, world.assignment, cfg.team.u_max, dt)
        U = apply_actuation_faults(U, active)
        world.positions = step_dynamics(world.positions, U, dt)
        log.task[k] = [-1 if a is None else a for a in world.assignment]

        # completion
        for i in range(N):
            m = world.assignment[i]
            if m is not None and math.hypot(*(world.positions[i] - goals[m])) < cfg.completion_radius:
                completed_by[m] = i
                completed_step[m] = k
                demand[m] = 0.0
                world.assignment[i] = None
                streams[i] = None
                pending = True

        # measure, filter, detect
        t0 = time.perf_counter()
        changed = False
        for i in range(N):
            st = streams[i]
            if st is None:
                continue
            y = measure_progress(world, i, st.task, active)
            res = st.advance(y)
            d = None if res is None else res[0]
            kf = st.kf
            ds = dets[i]
            before = ds.label
            _, lab, conf = detector_step(ds, dcfg, d, kf.rdot * dt, kf.trace_P)
            if lab != before:
                changed = True
            log.stream_age[k, i] = st.age
            log.measured[k, i] = math.nan if y is None else y
            log.dropped[k, i] = y is None
            if res is not None:
                log.nis[k, i], log.innovation[k, i] = res
            log.windowed_nis[k, i] = ds.statistic
            log.rate_hat[k, i] = kf.rdot
            log.trace_p[k, i] = kf.trace_P
            log.confidence[k, i] = conf
        log.detector_time[k] = time.perf_counter() - t0
        for i in range(N):
            st = streams[i]
            if st is not None:
                log.true_progress[k, i] = true_progress(world, i, st.task)
        pending = pending or changed

        # reallocate
        if should_reallocate(k, pending, last_solve, cfg.policy):
            labels = [d.label for d in dets]
            alloc = _allocate(cfg, world.positions, labels, alloc, demand, k)
            assign(alloc, k + 1)
            last_solve = k
            pending = False
            log.solved[k] = True
            log.churn[k] = alloc.churn
            log.qp_time[k] = alloc.solver_stats.solve_time
            log.qp_iters[k] = alloc.solver_stats.iterations

        log.positions[k] = world.positions
        log.label[k] = [int(d.label) for d in dets]
        log.alpha[k] = alloc.alpha
        log.slack[k] = float(alloc.delta.sum())

    log.summary = _summary(log)
    return log
