"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools

import numpy as np
import quadprog


def textbook_kf_update(x_prior, P_prior, R, y):
    """Matrix-form Kalman measurement update for ``y = [1 0] x + v``."""
    x_prior = np.asarray(x_prior, dtype=float).reshape(2, 1)
    P_prior = np.asarray(P_prior, dtype=float)
    C = np.array([[1.0, 0.0]])
    S = (C @ P_prior @ C.T).item() + R
    K = P_prior @ C.T / S
    innov = y - (C @ x_prior).item()
    x = x_prior + K * innov
    P = (np.eye(2) - K @ C) @ P_prior
    return x.ravel(), P, innov, S


def joseph_update(P_prior, R):
    P_prior = np.asarray(P_prior, dtype=float)
    C = np.array([[1.0, 0.0]])
    S = (C @ P_prior @ C.T).item() + R
    K = P_prior @ C.T / S
    I_KC = np.eye(2) - K @ C
    return I_KC @ P_prior @ I_KC.T + R * (K @ K.T)


def iterate_predict_cov(P, A, Q, D):
    for _ in range(D):
        P = A @ P @ A.T + Q
    return P


def linear_scan_dmax(P, A, Q, gamma, cap=100_000):
    D = 0
    Pk = np.asarray(P, dtype=float)
    while D < cap:
        nxt = A @ Pk @ A.T + Q
        if np.trace(nxt) > gamma:
            return D
        Pk = nxt
        D += 1
    return cap


def chi2_quantile_mc(alpha, dof, n_mc=None, rng=None):
    """Monte-Carlo upper quantile of a chi-square(dof) sample."""
    rng = np.random.default_rng(0) if rng is None else rng
    n_mc = 10**6 if n_mc is None else n_mc
    z = rng.standard_normal((n_mc, dof))
    return float(np.quantile((z**2).sum(axis=1), 1.0 - alpha))


def enumerate_active_sets(P, q, G, h, A=None, b=None, tol=1e-9):
    """Exact QP solution by trying every subset of inequality rows as equalities.

    Requires ``P`` positive definite. Returns ``(x, objective)`` of the best
    KKT point, or ``None`` when nothing is feasible.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    G = np.zeros((0, n)) if G is None else np.asarray(G, dtype=float)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float)
    A = np.zeros((0, n)) if A is None else np.asarray(A, dtype=float)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float)
    best = None
    m = h.size
    for k in range(0, min(m, n - A.shape[0]) + 1):
        for active in itertools.combinations(range(m), k):
            E = np.vstack([A, G[list(active)]])
            e = np.concatenate([b, h[list(active)]])
            p = E.shape[0]
            K = np.block([[P, E.T], [E, np.zeros((p, p))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-q, e]))
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            mu = sol[n + A.shape[0]:]
            if np.any(G @ x - h > tol * (1 + np.abs(h))):
                continue
            if np.any(mu < -tol):
                continue
            obj = 0.5 * x @ P @ x + q @ x
            if best is None or obj < best[1] - 1e-12:
                best = (x, obj)
    return best


def _fixed_by_bounds(G, h, n, tol=1e-12):
    """Map of variables whose singleton rows pin them to one value."""
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for row, rhs in zip(G, h):
        nz = np.flatnonzero(row)
        if nz.size != 1:
            continue
        j = nz[0]
        if row[j] > 0:
            hi[j] = min(hi[j], rhs / row[j])
        else:
            lo[j] = max(lo[j], rhs / row[j])
    return {j: hi[j] for j in range(n) if hi[j] - lo[j] <= tol}


def quadprog_solve(P, q, G, h, A=None, b=None, ridge=1e-7):
    """Goldfarb-Idnani dual active-set solve; singular ``P`` gets a small ridge.

    A ridge much below 1e-7 leaves the dual method ill-conditioned on the
    mostly linear allocation objective (constraint violations near 1e-5).
    Its bias on the optimum is at most ``ridge * |x|^2 / 2``.

    Variables pinned by their own bounds are substituted out first, since the
    dual method rejects the resulting degenerate constraint pairs.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    n = P.shape[0]
    G = np.zeros((0, n)) if G is None else np.asarray(G, dtype=float)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float)
    A = np.zeros((0, n)) if A is None else np.asarray(A, dtype=float)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float)
    fixed = _fixed_by_bounds(G, h, n)
    x = np.zeros(n)
    for j, v in fixed.items():
        x[j] = v
    free = np.array([j not in fixed for j in range(n)])
    Gf, hf = G[:, free], h - G[:, ~free] @ x[~free]
    keep = np.any(Gf != 0, axis=1)
    assert np.all(hf[~keep] >= -1e-9)
    Af, bf = A[:, free], b - A[:, ~free] @ x[~free]
    eq = np.any(Af != 0, axis=1)
    assert np.allclose(bf[~eq], 0.0, atol=1e-9)
    Pf = P[np.ix_(free, free)]
    qf = q[free] + P[np.ix_(free, ~free)] @ x[~free]
    Pr = 0.5 * (Pf + Pf.T) + ridge * np.eye(Pf.shape[0])
    # quadprog wants C^T x >= b, equalities first
    C = np.vstack([Af[eq], -Gf[keep]]).T
    bb = np.concatenate([bf[eq], -hf[keep]])
    x[free] = quadprog.solve_qp(Pr, -qf, C, bb, int(eq.sum()))[0]
    return x, float(0.5 * x @ P @ x + q @ x)
