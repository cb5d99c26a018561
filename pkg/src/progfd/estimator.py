"""Two-state Kalman filter on ``[r, r_dot]`` (progress and its rate).

Two interchangeable process models:

* ``CV`` -- command-unaware constant velocity,
  ``x+ = [[1, dt], [0, 1]] x + w``
* ``RT`` -- rate tracking with a nominal progress rate ``u`` [1/s],
  ``x+ = [[1, 0], [0, 0]] x + [dt, 1]^T u + w``

Both observe ``y = [1 0] x + v``. The 2x2 algebra is written out in scalars
because the filter runs once per robot per control step and numpy call
overhead would dominate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

CV = "CV"
RT = "RT"

#: Default baseline process covariance before 1/L^2 scaling.
Q0_BASE = np.diag([1.0e-6, 5.0e-5])
#: Distances below this freeze the covariance scaling.
L_MIN = 0.02
#: Returned by :func:`max_informative_outage` when the start covariance already exceeds the threshold.
ALREADY_UNINFORMATIVE = -1


def _check_psd(M: np.ndarray, name: str, tol: float = 1e-12) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.shape != (2, 2):
        raise ValueError(f"{name} must be 2x2, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12, rtol=0):
        raise ValueError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(M).min() < -tol:
        raise ValueError(f"{name} is not positive semidefinite")
    return M


@dataclass(frozen=True)
class KfModel:
    variant: str
    dt: float
    Q: np.ndarray
    R: float

    def __post_init__(self):
        if self.variant not in (CV, RT):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "Q", _check_psd(self.Q, "Q"))
        if not self.R > 0:
            raise ValueError("R must be positive")
        dt = float(self.dt)
        a = (1.0, dt, 0.0, 1.0) if self.variant == CV else (1.0, 0.0, 0.0, 0.0)
        object.__setattr__(self, "_a", a)
        object.__setattr__(self, "_q", (float(self.Q[0, 0]), float(self.Q[0, 1]), float(self.Q[1, 1])))

    @property
    def A(self) -> np.ndarray:
        return np.array(self._a).reshape(2, 2)

    @property
    def B(self) -> np.ndarray | None:
        return np.array([[self.dt], [1.0]]) if self.variant == RT else None

    @property
    def C(self) -> np.ndarray:
        return np.array([[1.0, 0.0]])


@dataclass(slots=True)
class KfState:
    """Posterior ``(r, rdot, P)`` plus the priors from the last predict.

    Covariances are stored as their three unique entries, so symmetry holds
    by construction.
    """

    r: float
    rdot: float
    p00: float
    p01: float
    p11: float
    r_prior: float = 0.0
    rdot_prior: float = 0.0
    pp00: float = 0.0
    pp01: float = 0.0
    pp11: float = 0.0
    predicted: bool = field(default=False)

    @property
    def x_hat(self) -> np.ndarray:
        return np.array([self.r, self.rdot])

    @property
    def P(self) -> np.ndarray:
        return np.array([[self.p00, self.p01], [self.p01, self.p11]])

    @property
    def x_prior(self) -> np.ndarray:
        return np.array([self.r_prior, self.rdot_prior])

    @property
    def P_prior(self) -> np.ndarray:
        return np.array([[self.pp00, self.pp01], [self.pp01, self.pp11]])

    @property
    def trace_P(self) -> float:
        return self.p00 + self.p11

    def copy(self) -> "KfState":
        return replace(self)


def kf_init(r0: float, rdot0: float, P0) -> KfState:
    if not 0.0 <= r0 <= 1.0:
        raise ValueError(f"progress out of range: {r0}")
    P0 = np.asarray(P0, dtype=float)
    if P0.ndim == 0:
        P0 = np.eye(2) * float(P0)
    P0 = _check_psd(P0, "P0")
    p00, p01, p11 = float(P0[0, 0]), float(P0[0, 1]), float(P0[1, 1])
    return KfState(float(r0), float(rdot0), p00, p01, p11, float(r0), float(rdot0), p00, p01, p11)


def kf_predict(state: KfState, model: KfModel, u: float | None = None) -> KfState:
    """Time update, in place. Returns ``state`` for chaining.

    The posterior is overwritten with the prior, so repeated calls without an
    update propagate the open-loop covariance (dropout mode).
    """
    if model.variant == RT:
        if u is None:
            raise ValueError("RT model needs a nominal rate u")
    elif u is not None:
        raise ValueError("CV model takes no input")
    a00, a01, a10, a11 = model._a
    q00, q01, q11 = model._q
    r, rd = state.r, state.rdot
    p00, p01, p11 = state.p00, state.p01, state.p11

    xr = a00 * r + a01 * rd
    xd = a10 * r + a11 * rd
    if u is not None:
        xr += model.dt * u
        xd += u
    m00 = a00 * p00 + a01 * p01
    m01 = a00 * p01 + a01 * p11
    m10 = a10 * p00 + a11 * p01
    m11 = a10 * p01 + a11 * p11
    n00 = m00 * a00 + m01 * a01 + q00
    n01 = m00 * a10 + m01 * a11 + q01
    n11 = m10 * a10 + m11 * a11 + q11

    state.r_prior = state.r = xr
    state.rdot_prior = state.rdot = xd
    state.pp00 = state.p00 = n00
    state.pp01 = state.p01 = n01
    state.pp11 = state.p11 = n11
    state.predicted = True
    return state


def kf_update(state: KfState, model: KfModel, y: float) -> tuple[KfState, float, float]:
    """Measurement update, in place. Returns ``(state, innovation, S)``."""
    if not state.predicted:
        raise RuntimeError("kf_update called without a preceding kf_predict")
    pp00, pp01, pp11 = state.pp00, state.pp01, state.pp11
    S = pp00 + model.R
    if not S > 0.0:
        raise ValueError("degenerate innovation covariance")
    innov = float(y) - state.r_prior
    k0 = pp00 / S
    k1 = pp01 / S
    state.r = state.r_prior + k0 * innov
    state.rdot = state.rdot_prior + k1 * innov
    # (I - K C) P^-; the two off-diagonal products agree up to rounding
    off = 0.5 * ((pp01 - k0 * pp01) + (pp01 - k1 * pp00))
    state.p00 = pp00 - k0 * pp00
    state.p01 = off
    state.p11 = pp11 - k1 * pp01
    state.predicted = False
    return state, innov, S


def scale_covariances(L: float, sigma_xy: float = 0.007, Q0_base=None, L_min: float = L_MIN):
    """Distance-normalized ``(Q, R)`` for a progress stream of length ``L``.

    ``R = sigma_xy^2 / L^2`` and ``Q = Q0_base / L^2``, with ``L`` floored
    at ``L_min``.
    """
    if not L > 0:
        raise ValueError("distance must be positive")
    Lc = max(float(L), L_min)
    base = Q0_BASE if Q0_base is None else np.asarray(Q0_base, dtype=float)
    return base / Lc**2, sigma_xy**2 / Lc**2


def inflate_process_noise(model: KfModel, mean_nis: float, lo: float = 0.5, hi: float = 4.0) -> KfModel:
    """Scale Q by the windowed mean NIS, clamped to ``[lo, hi]``."""
    factor = min(hi, max(lo, float(mean_nis)))
    return replace(model, Q=model.Q * factor)


def _cv_power_sums(P: np.ndarray, Q: np.ndarray, dt: float, D: int) -> np.ndarray:
    # A^D P A^D^T with A^D = [[1, D dt], [0, 1]]
    k = D * dt
    p00, p01, p11 = P[0, 0], P[0, 1], P[1, 1]
    out = np.array([[p00 + 2 * k * p01 + k * k * p11, p01 + k * p11], [p01 + k * p11, p11]])
    # sum_{j<D} A^j Q A^j^T via sums of j and j^2
    s1 = dt * D * (D - 1) / 2.0
    s2 = dt * dt * (D - 1) * D * (2 * D - 1) / 6.0
    q00, q01, q11 = Q[0, 0], Q[0, 1], Q[1, 1]
    out[0, 0] += D * q00 + 2 * s1 * q01 + s2 * q11
    out[0, 1] += D * q01 + s1 * q11
    out[1, 0] = out[0, 1]
    out[1, 1] += D * q11
    return out


def dropout_covariance(P, model: KfModel, D: int) -> np.ndarray:
    """Open-loop covariance after ``D`` prediction-only steps."""
    if D < 0:
        raise ValueError("D must be non-negative")
    P = np.asarray(P, dtype=float)
    if D == 0:
        return P.copy()
    if model.variant == CV:
        return _cv_power_sums(P, model.Q, model.dt, int(D))
    # A_rt^j = diag(1, 0) for j >= 1
    e = np.array([[1.0, 0.0], [0.0, 0.0]])
    Q = model.Q
    return P[0, 0] * e + Q + (D - 1) * Q[0, 0] * e


def _cv_trace_critical_points(P, Q, dt) -> list[float]:
    """Stationary points of the CV open-loop trace, viewed as a cubic in ``D``.

    trace(A^D P A^D') = P11 + P22 + 2 D dt P12 + D^2 dt^2 P22, and the
    process-noise power sum adds D (Q11 + Q22) + dt Q12 D (D - 1)
    + dt^2 Q22 (D - 1) D (2D - 1) / 6.
    """
    c3 = dt * dt * Q[1, 1] / 3.0
    c2 = dt * dt * P[1, 1] + dt * Q[0, 1] - dt * dt * Q[1, 1] / 2.0
    c1 = 2.0 * dt * P[0, 1] + Q[0, 0] + Q[1, 1] - dt * Q[0, 1] + dt * dt * Q[1, 1] / 6.0
    roots = np.roots([3.0 * c3, 2.0 * c2, c1]) if (c3 or c2) else np.array([])
    return sorted(float(r.real) for r in np.atleast_1d(roots) if abs(r.imag) < 1e-12)


def max_informative_outage(P, model: KfModel, gamma: float, cap: int = 10**6) -> int:
    """Outage length ``D`` just before the predicted covariance trace first exceeds gamma.

    The trace need not be monotone in ``D`` (a negative position/rate
    correlation shrinks it at first under CV), so ``[1, cap]`` is split at
    the stationary points of the trace and each monotone piece is searched
    in order. Returns ``cap`` if the trace never exceeds gamma up to ``cap``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    P = np.asarray(P, dtype=float)
    if np.trace(P) > gamma:
        return ALREADY_UNINFORMATIVE

    def over(D: int) -> bool:
        return np.trace(dropout_covariance(P, model, D)) > gamma

    cuts = {1, cap}
    if model.variant == CV:
        # RT is linear in D from D = 1 on, hence a single monotone piece
        for c in _cv_trace_critical_points(P, model.Q, model.dt):
            if 1 < c < cap:
                cuts.update((int(c), int(c) + 1))
    bounds = sorted(cuts)
    for a, b in zip(bounds, bounds[1:] + [bounds[-1]]):
        if over(a):
            return a - 1
        if not over(b):
            continue
        # monotone piece going from <= gamma at a to > gamma at b
        while b - a > 1:
            mid = (a + b) // 2
            if over(mid):
                b = mid
            else:
                a = mid
        return a
    return cap
