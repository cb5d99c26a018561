import numpy as np
import pytest
from hypothesis import given, strategies as st

from progfd import estimator as est
from oracles import iterate_predict_cov, joseph_update, linear_scan_dmax, textbook_kf_update

ZERO = np.zeros((2, 2))


def model(variant="CV", Q=ZERO, R=1e-4, dt=0.1):
    return est.KfModel(variant, dt, np.asarray(Q, dtype=float), R)


@st.composite
def psd2(draw, scale=1e-2):
    a = np.array(draw(st.lists(st.floats(-1, 1), min_size=4, max_size=4))).reshape(2, 2)
    return scale * (a @ a.T)


def test_init():
    s = est.kf_init(0.0, 0.0, np.diag([1e-4, 1e-4]))
    np.testing.assert_array_equal(s.x_hat, [0.0, 0.0])
    s = est.kf_init(0.5, 0.01, 0.0)
    np.testing.assert_array_equal(s.P, ZERO)
    with pytest.raises(ValueError, match="out of range"):
        est.kf_init(1.2, 0.0, ZERO)
    with pytest.raises(ValueError, match="positive semidefinite"):
        est.kf_init(0.0, 0.0, np.diag([1.0, -1.0]))


def test_model_matrices():
    cv, rt = model("CV"), model("RT")
    np.testing.assert_array_equal(cv.A, [[1, 0.1], [0, 1]])
    assert cv.B is None
    np.testing.assert_array_equal(rt.A, [[1, 0], [0, 0]])
    np.testing.assert_array_equal(rt.B, [[0.1], [1.0]])
    np.testing.assert_array_equal(cv.C, [[1, 0]])
    with pytest.raises(ValueError):
        model(R=0.0)
    with pytest.raises(ValueError):
        model("XY")


def test_predict_cv_and_rt():
    s = est.kf_init(0.5, 0.1, ZERO)
    est.kf_predict(s, model("CV"))
    np.testing.assert_allclose(s.x_prior, [0.51, 0.1], atol=1e-15)
    np.testing.assert_array_equal(s.P_prior, ZERO)
    s = est.kf_init(0.5, -3.0, ZERO)
    est.kf_predict(s, model("RT"), u=0.2)
    np.testing.assert_allclose(s.x_prior, [0.52, 0.2], atol=1e-15)


def test_predict_input_contract():
    with pytest.raises(ValueError):
        est.kf_predict(est.kf_init(0, 0, ZERO), model("CV"), u=0.1)
    with pytest.raises(ValueError):
        est.kf_predict(est.kf_init(0, 0, ZERO), model("RT"))


def test_update_examples():
    s = est.kf_init(0.2, 0.1, np.diag([1e-3, 1e-3]))
    est.kf_predict(s, model())
    prior = s.x_prior
    _, innov, _ = est.kf_update(s, model(), prior[0])
    assert innov == 0.0
    np.testing.assert_allclose(s.x_hat, prior)

    s = est.kf_init(0.2, 0.1, ZERO)
    est.kf_predict(s, model())
    est.kf_update(s, model(R=0.3), 0.9)
    np.testing.assert_allclose(s.x_hat, [0.21, 0.1])


def test_update_requires_predict():
    with pytest.raises(RuntimeError):
        est.kf_update(est.kf_init(0, 0, ZERO), model(), 0.1)


def test_update_matches_textbook_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        a = rng.normal(size=(2, 2))
        P_prior = a @ a.T * 1e-3
        R = rng.uniform(1e-5, 1e-2)
        x_prior = rng.uniform(0, 1, 2)
        y = rng.uniform(0, 1)
        s = est.KfState(*x_prior, P_prior[0, 0], P_prior[0, 1], P_prior[1, 1],
                        *x_prior, P_prior[0, 0], P_prior[0, 1], P_prior[1, 1], predicted=True)
        _, innov, S = est.kf_update(s, model(R=R), y)
        x_ref, P_ref, innov_ref, S_ref = textbook_kf_update(x_prior, P_prior, R, y)
        np.testing.assert_allclose(s.x_hat, x_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(s.P, 0.5 * (P_ref + P_ref.T), rtol=0, atol=1e-12)
        assert innov == pytest.approx(innov_ref, abs=1e-12)
        assert S == pytest.approx(S_ref, abs=1e-12)


@given(psd2(), st.floats(1e-6, 1e-2), st.floats(0, 1))
def test_update_keeps_psd_and_matches_joseph(P_prior, R, y):
    s = est.KfState(0.3, 0.1, P_prior[0, 0], P_prior[0, 1], P_prior[1, 1],
                    0.3, 0.1, P_prior[0, 0], P_prior[0, 1], P_prior[1, 1], predicted=True)
    est.kf_update(s, model(R=R), y)
    P = s.P
    np.testing.assert_array_equal(P, P.T)
    assert np.linalg.eigvalsh(P).min() >= -1e-12
    np.testing.assert_allclose(P, joseph_update(P_prior, R), rtol=0, atol=1e-10)


def test_scale_covariances():
    Q, R = est.scale_covariances(1.0, 0.007)
    assert R == pytest.approx(4.9e-5, rel=1e-12)
    np.testing.assert_allclose(Q, np.diag([1e-6, 5e-5]), rtol=1e-12)
    _, R = est.scale_covariances(0.5, 0.007)
    assert R == pytest.approx(1.96e-4, rel=1e-12)
    with pytest.raises(ValueError):
        est.scale_covariances(0.0)
    # below the floor the scaling freezes
    np.testing.assert_array_equal(est.scale_covariances(0.001)[0], est.scale_covariances(est.L_MIN)[0])


def test_inflate_process_noise_clamps():
    m = model(Q=np.diag([1e-6, 1e-5]))
    np.testing.assert_allclose(est.inflate_process_noise(m, 10.0).Q, m.Q * 4.0)
    np.testing.assert_allclose(est.inflate_process_noise(m, 0.1).Q, m.Q * 0.5)
    np.testing.assert_allclose(est.inflate_process_noise(m, 1.3).Q, m.Q * 1.3)


@pytest.mark.parametrize("variant", ["CV", "RT"])
def test_dropout_covariance_matches_iteration(variant):
    Q = np.diag([1e-6, 5e-5])
    m = model(variant, Q=Q)
    P = np.array([[2e-4, 3e-5], [3e-5, 1e-4]])
    np.testing.assert_array_equal(est.dropout_covariance(P, m, 0), P)
    s = est.kf_init(0.0, 0.0, P)
    est.kf_predict(s, m, 0.1 if variant == "RT" else None)
    np.testing.assert_allclose(est.dropout_covariance(P, m, 1), s.P_prior, atol=1e-15)
    for D in (2, 5, 17):
        np.testing.assert_allclose(est.dropout_covariance(P, m, D), iterate_predict_cov(P, m.A, Q, D),
                                   rtol=0, atol=1e-12)


@given(psd2(1e-3), psd2(1e-4), st.sampled_from(["CV", "RT"]))
def test_dropout_trace_monotone(P, Q, variant):
    m = model(variant, Q=Q)
    # the rate-tracking model overwrites the rate with the command, so its
    # trace may drop on the first prediction; it is monotone from D=1 on.
    # Under CV each step adds 2 dt P12 + (2D+1) dt^2 P22 plus a PSD trace,
    # so a non-negative position/rate correlation makes it monotone
    if variant == "CV":
        P = P.copy()
        P[0, 1] = P[1, 0] = abs(P[0, 1])
    first = 0 if variant == "CV" else 1
    traces = [np.trace(est.dropout_covariance(P, m, D)) for D in range(first, 30)]
    assert all(a <= b + 1e-15 for a, b in zip(traces, traces[1:]))


def test_dropout_trace_can_dip_then_cross():
    m = model("CV", Q=ZERO)
    P = np.array([[1e-3, -1e-3], [-1e-3, 1e-3]])
    traces = [np.trace(est.dropout_covariance(P, m, D)) for D in range(40)]
    assert traces[1] < traces[0]
    gamma = traces[0] + 1e-6
    got = est.max_informative_outage(P, m, gamma)
    assert got == linear_scan_dmax(P, m.A, m.Q, gamma)
    assert max(traces[: got + 1]) <= gamma < traces[got + 1]


def test_max_informative_outage():
    m = model("CV", Q=np.diag([1e-6, 5e-5]))
    P = np.diag([1e-4, 1e-4])
    expected = linear_scan_dmax(P, m.A, m.Q, 0.01)
    assert est.max_informative_outage(P, m, 0.01) == expected
    assert expected > 0
    assert est.max_informative_outage(ZERO, model("CV"), 0.01, cap=1000) == 1000
    assert est.max_informative_outage(np.eye(2), m, 0.01) == est.ALREADY_UNINFORMATIVE
    assert est.max_informative_outage(np.diag([0.005, 0.00496]), m, 0.01) == 0


@given(psd2(1e-3), psd2(1e-4), st.floats(1e-3, 0.1), st.sampled_from(["CV", "RT"]))
def test_max_informative_outage_linear_scan(P, Q, gamma, variant):
    m = model(variant, Q=Q + 1e-7 * np.eye(2))
    got = est.max_informative_outage(P, m, gamma, cap=5000)
    if np.trace(P) > gamma:
        assert got == est.ALREADY_UNINFORMATIVE
    else:
        assert got == linear_scan_dmax(P, m.A, m.Q, gamma, cap=5000)


def test_cv_converges_on_noiseless_ramp():
    m = model("CV", Q=ZERO, R=1e-8)
    s = est.kf_init(0.0, 0.0, np.diag([1e-2, 1e-2]))
    errors = []
    for k in range(1, 60):
        est.kf_predict(s, m)
        truth = 0.004 * k
        est.kf_update(s, m, truth)
        errors.append(abs(s.r - truth))
    tail = errors[5:]
    assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
    assert tail[-1] < 1e-6
