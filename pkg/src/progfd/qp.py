"""Dense convex QP solver.

Solves::

    minimize    1/2 x^T P x + q^T x
    subject to  G x <= h
                A x  = b

with a primal-dual interior-point method (Mehrotra predictor-corrector).
Every returned solution carries its multipliers and a KKT residual, so
callers can check optimality without trusting the iteration.

Diagnostic dumps use a plain-text format, one block per matrix::

    # progfd-qp v1
    P 2 2
    2.0 0.0
    0.0 2.0
    q 2 1
    ...

Each block header is ``<name> <rows> <cols>`` followed by ``rows`` lines of
whitespace-separated floats written with ``repr`` precision. Blocks appear in
the order P, q, G, h, A, b; an empty matrix has a zero dimension and no rows.
An optional ``names`` line lists the variable labels.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    variable_names: list[str] | None = None

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float)).ravel()
        n = self.q.size
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        self.G, self.h = _pair(self.G, self.h, n, "G", "h")
        self.A, self.b = _pair(self.A, self.b, n, "A", "b")
        if self.variable_names is not None and len(self.variable_names) != n:
            raise ValueError("variable_names length does not match q")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.h.size

    @property
    def p(self) -> int:
        return self.b.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.q @ x)


def _pair(M, v, n, mname, vname):
    if M is None or (np.size(M) == 0 and (v is None or np.size(v) == 0)):
        return np.zeros((0, n)), np.zeros(0)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float)).ravel()
    if M.shape[1] != n:
        raise ValueError(f"{mname} has {M.shape[1]} columns, expected {n}")
    if M.shape[0] != v.size:
        raise ValueError(f"{mname} has {M.shape[0]} rows but {vname} has {v.size}")
    return M, v


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: QpStatus
    iterations: int
    solve_time: float
    kkt_residual: float
    z: np.ndarray = field(default_factory=lambda: np.zeros(0))  # inequality multipliers
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))  # equality multipliers
    s: np.ndarray = field(default_factory=lambda: np.zeros(0))  # inequality slacks

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def kkt_residual(problem: QpProblem, x, duals) -> float:
    """Worst violation among stationarity, feasibility, complementarity and dual sign.

    ``duals`` is ``(mu, nu)`` for the inequality and equality rows.
    """
    mu, nu = duals
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float).ravel() if problem.m else np.zeros(0)
    nu = np.asarray(nu, dtype=float).ravel() if problem.p else np.zeros(0)
    grad = problem.P @ x + problem.q + problem.G.T @ mu + problem.A.T @ nu
    terms = [np.abs(grad).max(initial=0.0)]
    if problem.m:
        slack = problem.G @ x - problem.h
        terms.append(np.maximum(slack, 0.0).max())
        terms.append(np.abs(mu * slack).max())
        terms.append(np.maximum(-mu, 0.0).max())
    if problem.p:
        terms.append(np.abs(problem.A @ x - problem.b).max())
    return float(max(terms))


def _regularized_P(P: np.ndarray) -> np.ndarray:
    sym = 0.5 * (P + P.T)
    lmin = np.linalg.eigvalsh(sym).min() if sym.size else 0.0
    if lmin < -1e-10 * max(1.0, np.abs(sym).max()):
        raise ValueError(f"P is not positive semidefinite (min eigenvalue {lmin:.3e})")
    if lmin < 1e-10:
        sym = sym + 1e-9 * np.eye(sym.shape[0])
    return sym


def solve_qp(
    problem: QpProblem,
    warm_start=None,
    max_iter: int = 500,
    tol: float = 1e-9,
) -> QpSolution:
    """Solve ``problem``; ``warm_start`` is a primal vector or a previous :class:`QpSolution`.

    A previous solution whose multipliers already certify optimality for this
    problem is returned after zero iterations; otherwise only its primal point
    seeds the iteration. A warm start that fails to converge is retried cold.
    """
    t0 = time.perf_counter()
    P = _regularized_P(problem.P)
    x, z, y, iters, ok = _ipm(P, problem, warm_start, max_iter, tol)
    if ok:
        ok = kkt_residual(problem, x, (z, y)) <= 1e-6
    if not ok and warm_start is not None:
        # stale multipliers can derail the interior point; fall back to a cold start
        x, z, y, extra, ok = _ipm(P, problem, None, max_iter, tol)
        iters += extra
    status = QpStatus.OPTIMAL
    if not ok:
        status = QpStatus.INFEASIBLE if _infeasible(problem) else QpStatus.MAX_ITER
    kkt = kkt_residual(problem, x, (z, y))
    if status is QpStatus.OPTIMAL and kkt > 1e-6:
        status = QpStatus.MAX_ITER
    s = problem.h - problem.G @ x if problem.m else np.zeros(0)
    return QpSolution(
        x=x,
        objective=problem.objective(x),
        status=status,
        iterations=iters,
        solve_time=time.perf_counter() - t0,
        kkt_residual=kkt,
        z=z,
        y=y,
        s=s,
    )


def _ipm(P, prob: QpProblem, warm, max_iter, tol):
    n, m, p = prob.n, prob.m, prob.p
    G, h, A, b, q = prob.G, prob.h, prob.A, prob.b, prob.q
    scale = max(1.0, np.abs(q).max(initial=0.0), np.abs(h).max(initial=0.0), np.abs(b).max(initial=0.0))
    # keep a margin below the 1e-6 certificate even when the data are large
    scale = min(scale, 1e-7 / tol)

    if m == 0:
        x, y = _equality_qp(P, q, A, b)
        ok = np.abs(A @ x - b).max(initial=0.0) <= 1e-8 * scale
        return x, np.zeros(0), y, 0, ok

    y = np.zeros(p)
    z = np.ones(m)
    x0 = None
    if isinstance(warm, QpSolution):
        if warm.x.size == n:
            x0 = warm.x.astype(float)
            if warm.z.size == m and warm.y.size == p:
                s = np.maximum(h - G @ x0, 0.0)
                if _converged(P, prob, x0, s, warm.z, warm.y, tol, scale):
                    return x0.copy(), warm.z.copy(), warm.y.copy(), 0, True
                # stale multipliers sit on the old active set and stall the
                # path once it changes; restart them centred instead
    elif warm is not None:
        w = np.asarray(warm, dtype=float).ravel()
        if w.size == n:
            x0 = w

    if x0 is not None:
        x = x0.copy()
        s = np.maximum(h - G @ x, 1e-2)
    else:
        # least-squares start that also pulls G x toward h
        x, _ = _equality_qp(P + G.T @ G, q - G.T @ h, A, b)
        r = G @ x - h
        s = -r if r.max() < 0 else -r + 1.0 + r.max()

    iters = 0
    for iters in range(1, max_iter + 1):
        rd = P @ x + q + G.T @ z + A.T @ y
        rp = G @ x + s - h
        re = A @ x - b
        mu = s @ z / m
        if (
            max(np.abs(rd).max(), np.abs(rp).max(), np.abs(re).max(initial=0.0)) <= tol * scale
            and (s * z).max() <= tol * scale
        ):
            return x, z, y, iters - 1, True
        if not np.isfinite(mu) or z.max() > 1e13 or s.max() > 1e13 or np.abs(x).max() > 1e13:
            break

        W = z / s
        H = P + (G.T * W) @ G
        try:
            kkt = _factor(H, A)
        except (np.linalg.LinAlgError, ValueError):
            break

        def direction(rc):
            rhs_x = -rd - G.T @ (W * rp - rc / s)
            dx, dy = _solve(kkt, rhs_x, -re, n)
            dz = W * (G @ dx + rp) - rc / s
            ds = -rp - G @ dx
            return dx, ds, dz, dy

        # predictor
        dx, ds, dz, dy = direction(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = (s + a_aff * ds) @ (z + a_aff * dz) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dx, ds, dz, dy = direction(s * z + ds * dz - sigma * mu)
        a = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        if not np.isfinite(a) or a <= 0:
            break
        x = x + a * dx
        s = s + a * ds
        z = z + a * dz
        y = y + a * dy
        s = np.maximum(s, 1e-300)
        z = np.maximum(z, 1e-300)
    return x, z, y, iters, False


def _converged(P, prob, x, s, z, y, tol, scale) -> bool:
    rd = P @ x + prob.q + prob.G.T @ z + prob.A.T @ y
    rp = prob.G @ x - prob.h
    re = prob.A @ x - prob.b
    return (
        np.abs(rd).max() <= tol * scale
        and np.maximum(rp, 0.0).max() <= tol * scale
        and np.abs(re).max(initial=0.0) <= tol * scale
        and np.abs(s * z).max() <= tol * scale
        and z.min() >= 0.0
    )


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not neg.any():
        return 1.0
    return min(1.0, float((v[neg] / -dv[neg]).min()))


def _factor(H, A):
    n, p = H.shape[0], A.shape[0]
    if not np.isfinite(H).all():
        raise ValueError("non-finite KKT matrix")
    if p == 0:
        H[np.diag_indices(n)] += 1e-14
        return ("chol", sla.cho_factor(H, check_finite=False))
    K = np.empty((n + p, n + p))
    K[:n, :n] = H
    K[:n, n:] = A.T
    K[n:, :n] = A
    K[n:, n:] = -1e-12 * np.eye(p)
    return ("lu", sla.lu_factor(K, check_finite=False))


def _solve(kkt, rx, ry, n):
    kind, fac = kkt
    if kind == "chol":
        return sla.cho_solve(fac, rx, check_finite=False), np.zeros(0)
    sol = sla.lu_solve(fac, np.concatenate([rx, ry]), check_finite=False)
    return sol[:n], sol[n:]


def _equality_qp(P, q, A, b):
    n, p = P.shape[0], A.shape[0]
    K = np.block([[P, A.T], [A, np.zeros((p, p))]])
    rhs = np.concatenate([-q, b])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _infeasible(prob: QpProblem, tol: float = 1e-7) -> bool:
    """Phase-1 LP: minimize the largest inequality violation t subject to Ax = b, t >= -1."""
    n, m = prob.n, prob.m
    if m == 0:
        if prob.p == 0:
            return False
        x = np.linalg.lstsq(prob.A, prob.b, rcond=None)[0]
        return np.abs(prob.A @ x - prob.b).max() > tol
    G1 = np.block([[prob.G, -np.ones((m, 1))], [np.zeros((1, n)), -np.ones((1, 1))]])
    h1 = np.concatenate([prob.h, [1.0]])
    A1 = np.hstack([prob.A, np.zeros((prob.p, 1))])
    q1 = np.zeros(n + 1)
    q1[-1] = 1.0
    phase1 = QpProblem(np.zeros((n + 1, n + 1)), q1, G1, h1, A1, prob.b)
    P1 = 1e-9 * np.eye(n + 1)
    x, _, _, _, ok = _ipm(P1, phase1, None, 200, 1e-10)
    if not ok:
        return True
    return x[-1] > tol


# --- diagnostic dump ---------------------------------------------------------

_BLOCKS = ("P", "q", "G", "h", "A", "b")


def dump_problem(problem: QpProblem, path) -> None:
    lines = ["# progfd-qp v1"]
    if problem.variable_names:
        lines.append("names " + " ".join(problem.variable_names))
    for name in _BLOCKS:
        M = np.asarray(getattr(problem, name), dtype=float)
        M2 = M.reshape(-1, 1) if M.ndim == 1 else M
        lines.append(f"{name} {M2.shape[0]} {M2.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in M2)
    Path(path).write_text("\n".join(lines) + "\n")


def load_problem(path) -> QpProblem:
    raw = Path(path).read_text().splitlines()
    if not raw or not raw[0].startswith("# progfd-qp"):
        raise ValueError(f"{path}: not a progfd QP dump")
    blocks: dict[str, np.ndarray] = {}
    names = None
    i = 1
    while i < len(raw):
        head = raw[i].split()
        i += 1
        if not head:
            continue
        if head[0] == "names":
            names = head[1:]
            continue
        name, r, c = head[0], int(head[1]), int(head[2])
        rows = [[float(v) for v in raw[i + k].split()] for k in range(r)]
        i += r
        blocks[name] = np.array(rows, dtype=float).reshape(r, c)
    return QpProblem(
        blocks["P"],
        blocks["q"].ravel(),
        blocks["G"],
        blocks["h"].ravel(),
        blocks["A"],
        blocks["b"].ravel(),
        variable_names=names,
    )
