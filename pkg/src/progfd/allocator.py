"""Health-aware task allocation as a convex QP.

Decision vector, in order::

    u      (2N)  robot velocity commands
    alpha  (NM)  assignment / priority variables, row-major by robot
    delta  (NM)  barrier slacks
    sigma  (M)   per-task coverage shortfall
    t      (NM)  churn epigraph variables (only when a previous solution exists)

Objective: sum_i |u_i|^2 + c_i sum_m delta_im + sum w_im alpha_im
+ coverage_cost * sum sigma_m + lambda * sum t_im.

The progress barrier for pair (i, m) uses h = -|x_i - g_m|^2 and scales the
required decay rate by alpha_im, so unassigned pairs impose nothing::

    2 (x_i - g_m)^T u_i + kappa |x_i - g_m|^2 alpha_im - rho delta_im <= 0

Tasks are pulled into the assignment by the coverage rows
``sum_i alpha_im + sigma_m = demand_m``; a shortfall is always feasible but
costs ``coverage_cost`` per unit, so robots are assigned whenever some
capable robot can do the task more cheaply than leaving it uncovered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import HealthLabel
from .qp import QpProblem, QpSolution, QpStatus, solve_qp


class AllocationInfeasible(RuntimeError):
    def __init__(self, message: str, problem: "AllocationProblem | None" = None):
        super().__init__(message)
        self.problem = problem


@dataclass
class TeamSpec:
    S: np.ndarray
    base_weights: np.ndarray
    base_slack_cost: np.ndarray
    kappa: float = 1.0
    rho: float = 1.0
    delta_max: float = 1.0
    coverage_cost: float = 10.0
    u_max: float = 0.05

    def __post_init__(self):
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        N, M = self.S.shape
        self.base_weights = np.asarray(self.base_weights, dtype=float)
        if self.base_weights.shape != (N, M):
            raise ValueError(f"base_weights has shape {self.base_weights.shape}, expected {(N, M)}")
        c0 = np.asarray(self.base_slack_cost, dtype=float)
        self.base_slack_cost = np.full(N, float(c0)) if c0.ndim == 0 else c0
        if self.base_slack_cost.shape != (N,):
            raise ValueError("base_slack_cost must have one entry per robot")
        if np.any(self.S < 0) or np.any(self.S > 1):
            raise ValueError("specialization entries must lie in [0, 1]")
        uncovered = [m for m in range(M) if not np.any(self.S[:, m] > 0)]
        if uncovered:
            raise ValueError(f"tasks {uncovered} have no capable robot")
        if np.any(self.base_weights < 0):
            raise ValueError("base weights must be non-negative")
        if np.any(self.base_slack_cost <= 0):
            raise ValueError("slack costs must be positive")
        for name in ("kappa", "rho", "delta_max", "coverage_cost", "u_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def N(self) -> int:
        return self.S.shape[0]

    @property
    def M(self) -> int:
        return self.S.shape[1]


@dataclass
class HealthPolicy:
    kappa_s: float = 0.5
    M_f: float = 1000.0
    rho_s: float = 1.0
    lam: float = 0.5
    cooldown_steps: int = 5
    periodic_resolve_every: int = 10
    gated_tasks: Sequence[int] | None = None  # None: every task is gated

    def __post_init__(self):
        if not self.kappa_s > 0:
            raise ValueError("kappa_s must be positive")
        if not self.M_f > self.kappa_s:
            raise ValueError("M_f must exceed kappa_s")
        if self.rho_s < 0:
            raise ValueError("rho_s must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.cooldown_steps < 0:
            raise ValueError("cooldown_steps must be >= 0")
        if self.periodic_resolve_every < 1:
            raise ValueError("periodic_resolve_every must be >= 1")


@dataclass
class AllocationProblem:
    qp: QpProblem
    N: int
    M: int
    prev_alpha: np.ndarray | None
    demand: np.ndarray

    @property
    def has_churn(self) -> bool:
        return self.prev_alpha is not None

    def slices(self):
        N, M = self.N, self.M
        nm = N * M
        i_u = slice(0, 2 * N)
        i_a = slice(2 * N, 2 * N + nm)
        i_d = slice(i_a.stop, i_a.stop + nm)
        i_s = slice(i_d.stop, i_d.stop + M)
        i_t = slice(i_s.stop, i_s.stop + (nm if self.has_churn else 0))
        return i_u, i_a, i_d, i_s, i_t


@dataclass
class AllocationSolution:
    u: np.ndarray
    alpha: np.ndarray
    delta: np.ndarray
    shortfall: np.ndarray
    churn: float
    objective: float
    solver_stats: QpSolution = field(repr=False)

    def assignment(self, threshold: float = 0.5) -> list[int | None]:
        return assignment_from_alpha(self.alpha, threshold)


def _labels(health) -> np.ndarray:
    return np.array([int(h) for h in health], dtype=int)


def health_weights(spec: TeamSpec, policy: HealthPolicy, health) -> tuple[np.ndarray, np.ndarray]:
    """Weights and slack costs under the current labels.

    Uninformative robots are demoted like suspects.
    """
    lab = _labels(health)
    suspect = (lab == HealthLabel.SUSPECT) | (lab == HealthLabel.UNINFORMATIVE)
    fault = lab == HealthLabel.FAULT
    w = spec.base_weights + policy.kappa_s * suspect[:, None] + policy.M_f * fault[:, None]
    c = spec.base_slack_cost * (1.0 + policy.rho_s * suspect)
    return w, c


def health_mask(spec: TeamSpec, health, gated_tasks=None) -> np.ndarray:
    """Per-robot gate: 0 for confirmed faults, 1 otherwise.

    The gate caps assignments only on ``gated_tasks`` (all tasks by default);
    elsewhere the fault penalty in :func:`health_weights` acts as a soft mask.
    """
    lab = _labels(health)
    if lab.size != spec.N:
        raise ValueError("one health label per robot required")
    return (lab != HealthLabel.FAULT).astype(float)


def gate_matrix(g, M: int, gated_tasks=None) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.ndim == 2:
        return g
    G = np.ones((g.size, M))
    cols = range(M) if gated_tasks is None else list(gated_tasks)
    for m in cols:
        G[:, m] = g
    return G


def should_reallocate(step: int, health_changed: bool, last_solve_step: int, policy: HealthPolicy) -> bool:
    since = step - last_solve_step
    return (health_changed and since >= policy.cooldown_steps) or since >= policy.periodic_resolve_every


def build_allocation_qp(
    spec: TeamSpec,
    positions,
    goals,
    w,
    c,
    g,
    prev_alpha=None,
    lam: float = 0.0,
    u_max: float | None = None,
    *,
    demand=None,
    gated_tasks=None,
) -> AllocationProblem:
    N, M = spec.N, spec.M
    X = np.asarray(positions, dtype=float)
    T = np.asarray(goals, dtype=float)
    w = np.asarray(w, dtype=float)
    c = np.asarray(c, dtype=float)
    if X.shape != (N, 2) or T.shape != (M, 2):
        raise ValueError(f"positions {X.shape} / goals {T.shape} do not match N={N}, M={M}")
    if w.shape != (N, M) or c.shape != (N,):
        raise ValueError("weights must be N x M and slack costs length N")
    caps = spec.S * gate_matrix(g, M, gated_tasks)
    if caps.shape != (N, M):
        raise ValueError("gate has the wrong shape")
    demand = np.ones(M) if demand is None else np.asarray(demand, dtype=float)
    if prev_alpha is not None:
        prev_alpha = np.asarray(prev_alpha, dtype=float)
        if prev_alpha.shape != (N, M):
            raise ValueError("prev_alpha must be N x M")
    u_max = spec.u_max if u_max is None else float(u_max)

    prob = AllocationProblem(None, N, M, prev_alpha, demand)  # type: ignore[arg-type]
    i_u, i_a, i_d, i_s, i_t = prob.slices()
    nm = N * M
    n = i_t.stop

    P = np.zeros((n, n))
    P[i_u, i_u] = 2.0 * np.eye(2 * N)
    q = np.zeros(n)
    q[i_a] = w.ravel()
    q[i_d] = np.repeat(c, M)
    q[i_s] = spec.coverage_cost
    if prob.has_churn:
        q[i_t] = lam

    rows: list[np.ndarray] = []
    rhs: list[np.ndarray] = []

    def block(k):
        return np.zeros((k, n))

    # (a) progress barrier, one row per (i, m)
    Ga = block(nm)
    diff = X[:, None, :] - T[None, :, :]  # N x M x 2
    d2 = (diff**2).sum(axis=2)
    for i in range(N):
        for m in range(M):
            r = i * M + m
            Ga[r, 2 * i : 2 * i + 2] = 2.0 * diff[i, m]
            Ga[r, i_a.start + r] = spec.kappa * d2[i, m]
            Ga[r, i_d.start + r] = -spec.rho
    rows.append(Ga)
    rhs.append(np.zeros(nm))

    eye = np.eye(nm)
    # (b) 0 <= alpha <= S g
    Gb = block(2 * nm)
    Gb[:nm, i_a] = -eye
    Gb[nm:, i_a] = eye
    rows.append(Gb)
    rhs.append(np.concatenate([np.zeros(nm), caps.ravel()]))

    # (c) one task per robot
    Gc = block(N)
    for i in range(N):
        Gc[i, i_a.start + i * M : i_a.start + (i + 1) * M] = 1.0
    rows.append(Gc)
    rhs.append(np.ones(N))

    # (d) 0 <= delta <= delta_max
    Gd = block(2 * nm)
    Gd[:nm, i_d] = -eye
    Gd[nm:, i_d] = eye
    rows.append(Gd)
    rhs.append(np.concatenate([np.zeros(nm), np.full(nm, spec.delta_max)]))

    # shortfall >= 0
    Gs = block(M)
    Gs[:, i_s] = -np.eye(M)
    rows.append(Gs)
    rhs.append(np.zeros(M))

    # (e) |alpha - prev| <= t
    if prob.has_churn:
        Ge = block(2 * nm)
        Ge[:nm, i_a] = eye
        Ge[:nm, i_t] = -eye
        Ge[nm:, i_a] = -eye
        Ge[nm:, i_t] = -eye
        rows.append(Ge)
        pa = prev_alpha.ravel()
        rhs.append(np.concatenate([pa, -pa]))

    # (f) speed box
    Gf = block(4 * N)
    Gf[: 2 * N, i_u] = np.eye(2 * N)
    Gf[2 * N :, i_u] = -np.eye(2 * N)
    rows.append(Gf)
    rhs.append(np.full(4 * N, u_max))

    # coverage equalities
    A = np.zeros((M, n))
    for m in range(M):
        A[m, [i_a.start + i * M + m for i in range(N)]] = 1.0
        A[m, i_s.start + m] = 1.0

    names = [f"u[{i}].{ax}" for i in range(N) for ax in "xy"]
    names += [f"alpha[{i},{m}]" for i in range(N) for m in range(M)]
    names += [f"delta[{i},{m}]" for i in range(N) for m in range(M)]
    names += [f"sigma[{m}]" for m in range(M)]
    if prob.has_churn:
        names += [f"t[{i},{m}]" for i in range(N) for m in range(M)]

    prob.qp = QpProblem(P, q, np.vstack(rows), np.concatenate(rhs), A, demand, variable_names=names)
    return prob


def warm_vector(problem: AllocationProblem, warm: AllocationSolution) -> np.ndarray:
    """Primal starting point for ``problem`` built from a previous allocation."""
    i_u, i_a, i_d, i_s, i_t = problem.slices()
    x = np.zeros(problem.qp.n)
    alpha = np.minimum(np.clip(warm.alpha, 0.0, 1.0), 1.0)
    x[i_u] = warm.u.ravel()
    x[i_a] = alpha.ravel()
    x[i_d] = warm.delta.ravel()
    x[i_s] = np.maximum(problem.demand - alpha.sum(axis=0), 0.0)
    if problem.has_churn:
        x[i_t] = np.abs(alpha - problem.prev_alpha).ravel()
    return x


def solve_allocation(problem: AllocationProblem, warm: AllocationSolution | None = None) -> AllocationSolution:
    start = None
    if warm is not None:
        prev_qp = warm.solver_stats
        start = prev_qp if prev_qp is not None and prev_qp.x.size == problem.qp.n else warm_vector(problem, warm)
    sol = solve_qp(problem.qp, warm_start=start)
    if sol.status is QpStatus.INFEASIBLE:
        raise AllocationInfeasible("allocation infeasible", problem)
    if sol.status is not QpStatus.OPTIMAL:
        raise AllocationInfeasible(f"allocation solve failed: {sol.status.value}", problem)
    N, M = problem.N, problem.M
    i_u, i_a, i_d, i_s, _ = problem.slices()
    x = sol.x
    alpha = x[i_a].reshape(N, M)
    alpha = np.where(np.abs(alpha) < 1e-6, 0.0, alpha)
    alpha = np.clip(alpha, 0.0, 1.0)
    delta = np.clip(x[i_d].reshape(N, M), 0.0, None)
    churn = float(np.abs(alpha - problem.prev_alpha).sum()) if problem.has_churn else 0.0
    return AllocationSolution(
        u=x[i_u].reshape(N, 2),
        alpha=alpha,
        delta=delta,
        shortfall=np.clip(x[i_s], 0.0, None),
        churn=churn,
        objective=sol.objective,
        solver_stats=sol,
    )


def assignment_from_alpha(alpha, threshold: float = 0.5) -> list[int | None]:
    """Robot -> task map: a pair counts as assigned when alpha exceeds ``threshold``.

    A task claimed by several robots goes to the largest alpha, then the
    lower robot index.
    """
    alpha = np.asarray(alpha, dtype=float)
    N, M = alpha.shape
    out: list[int | None] = [None] * N
    for m in range(M):
        cands = [i for i in range(N) if alpha[i, m] > threshold]
        if not cands:
            continue
        best = max(cands, key=lambda i: (alpha[i, m], -i))
        if out[best] is None or alpha[best, m] > alpha[best, out[best]]:
            out[best] = m
    return out
