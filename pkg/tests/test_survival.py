import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st

from fcox.survival import (
    FunctionalPredictor,
    ProfiledPoissonKernel,
    StratifiedCoxKernel,
    SurvivalData,
    cox_partial_loglik,
    jitter_ties,
    kaplan_meier,
    nelson_aalen,
    poisson_expand,
    quadrature_weights,
)
from fcox.tensor import KroneckerDesign


def random_data(rng, n=30, p=0):
    time = rng.exponential(1.0, n)
    event = (rng.uniform(size=n) < 0.7).astype(int)
    return SurvivalData(np.arange(1, n + 1), time, event, rng.normal(size=(n, p)))


def brute_loglik(eta, data):
    ll = 0.0
    for i in range(data.n):
        if data.event[i]:
            ll += eta[i] - np.log(np.sum(np.exp(eta[data.time >= data.time[i]])))
    return ll


def test_loglik_small_examples():
    assert cox_partial_loglik([0.0], SurvivalData([1], [1.0], [1])) == 0.0
    two = SurvivalData([1, 2], [1.0, 2.0], [1, 0])
    assert np.isclose(cox_partial_loglik([0.3, 0.3], two), -np.log(2.0), atol=1e-15)
    three = SurvivalData([1, 2, 3], [1.0, 2.0, 3.0], [1, 0, 1])
    eta = np.array([0.5, -0.2, 0.1])
    ref = (0.5 - np.log(np.exp(0.5) + np.exp(-0.2) + np.exp(0.1))) + (0.1 - np.log(np.exp(0.1)))
    assert abs(cox_partial_loglik(eta, three) - ref) < 1e-12


def test_loglik_matches_brute_force():
    rng = np.random.default_rng(0)
    data = random_data(rng, 40)
    eta = rng.normal(size=40)
    assert abs(cox_partial_loglik(eta, data) - brute_loglik(eta, data)) < 1e-10


def test_ties_rejected_with_guidance():
    data = SurvivalData([1, 2, 3], [1.0, 1.0, 2.0], [1, 1, 0])
    with pytest.raises(ValueError, match="jitter"):
        cox_partial_loglik(np.zeros(3), data)
    fixed = SurvivalData(data.id, jitter_ties(data.time, data.event, data.id), data.event)
    assert np.isfinite(cox_partial_loglik(np.zeros(3), fixed))


def test_non_finite_eta_rejected():
    with pytest.raises(ValueError):
        cox_partial_loglik([np.nan, 0.0], SurvivalData([1, 2], [1.0, 2.0], [1, 1]))


def test_breslow_ties_when_allowed():
    data = SurvivalData([1, 2, 3, 4], [1.0, 1.0, 2.0, 3.0], [1, 1, 0, 1])
    eta = np.array([0.2, -0.1, 0.4, 0.0])
    ref = brute_loglik(eta, data)
    assert abs(cox_partial_loglik(eta, data, allow_ties=True) - ref) < 1e-12


def test_shift_invariance():
    rng = np.random.default_rng(1)
    data = random_data(rng)
    eta = rng.normal(size=data.n)
    c = 0.7
    assert abs(cox_partial_loglik(eta + c, data) - cox_partial_loglik(eta, data)) < 1e-12
    order = np.argsort(data.time)
    k = StratifiedCoxKernel(data.time[order], data.event[order], np.zeros(data.n))
    H0 = nelson_aalen(k, eta[order])[0]
    H1 = nelson_aalen(k, eta[order] + c)[0]
    np.testing.assert_allclose(H1.jumps, H0.jumps * np.exp(-c), rtol=1e-12)


def test_gradient_and_hessian_against_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(5):
        data = random_data(rng, 30)
        eta = rng.normal(size=30)
        ll, g, H = cox_partial_loglik(eta, data, derivatives=True)
        h = 1e-5
        E = np.eye(30) * h
        g_fd = np.array([(cox_partial_loglik(eta + E[i], data) - cox_partial_loglik(eta - E[i], data)) / (2 * h)
                         for i in range(30)])
        assert np.max(np.abs(g - g_fd)) <= 1e-6 * max(1.0, np.max(np.abs(g)))
        H_fd = np.array([(cox_partial_loglik(eta + E[i], data, derivatives=True)[1]
                          - cox_partial_loglik(eta - E[i], data, derivatives=True)[1]) / (2 * h) for i in range(30)])
        assert np.max(np.abs(H - H_fd)) <= 1e-6 * max(1.0, np.max(np.abs(H)))
        assert np.linalg.eigvalsh(H).max() <= 1e-10


def test_poisson_expand_counts():
    ex = poisson_expand(SurvivalData([1, 2], [1.0, 2.0], [1, 0]))
    assert ex.n_rows == 2
    np.testing.assert_array_equal(ex.outcome, [1, 0])
    n = 9
    ex = poisson_expand(SurvivalData(np.arange(n), np.arange(1.0, n + 1), np.ones(n, int)))
    assert ex.n_rows == n * (n + 1) // 2


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), seed=st.integers(0, 2**31 - 1))
def test_poisson_expand_structure_property(n, seed):
    rng = np.random.default_rng(seed)
    data = random_data(rng, n)
    ex = poisson_expand(data)
    ev_times = np.sort(data.time[data.event == 1])
    assert ex.n_rows == sum(int(np.sum(data.time >= t)) for t in ev_times)
    np.testing.assert_array_equal(ex.event_times, ev_times)
    for k, t in enumerate(ev_times):
        rows = ex.stratum == k
        subj = ex.subject[rows]
        assert set(subj) == set(np.flatnonzero(data.time >= t))
        hit = subj[ex.outcome[rows] == 1]
        assert hit.size == 1 and data.time[hit[0]] == t and data.event[hit[0]] == 1


def test_profiled_poisson_matches_glm_with_free_intercepts():
    rng = np.random.default_rng(3)
    data = random_data(rng, 25, p=2)
    ex = poisson_expand(data)
    X = data.x[ex.subject]
    beta = np.array([0.3, -0.5])
    eta = X @ beta
    kern = ProfiledPoissonKernel(ex.outcome, ex.stratum)
    dummies = np.eye(ex.event_times.size)[ex.stratum]
    glm = sm.GLM(ex.outcome, dummies, family=sm.families.Poisson(), offset=eta).fit(tol=1e-12)
    ll_glm = glm.llf  # log y! vanishes for binary outcomes
    assert abs(kern.loglik(eta) - ll_glm) < 1e-8
    np.testing.assert_allclose(kern.intercepts(eta), glm.params, atol=1e-6)
    # profiled Poisson likelihood is the partial likelihood less one per event
    n_events = int(data.event.sum())
    assert abs(kern.loglik(eta) - (cox_partial_loglik(data.x @ beta, data) - n_events)) < 1e-10


def test_profiled_poisson_derivatives_finite_differences():
    rng = np.random.default_rng(4)
    data = random_data(rng, 20, p=3)
    ex = poisson_expand(data)
    D = KroneckerDesign.from_dense(data.x[ex.subject])
    kern = ProfiledPoissonKernel(ex.outcome, ex.stratum)
    b = rng.normal(size=3) * 0.3
    ll, g, Hn = kern.derivatives(D.dot(b), D)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (kern.loglik(D.dot(b + e)) - kern.loglik(D.dot(b - e))) / (2 * h)
        assert abs(fd - g[j]) < 1e-6 * max(1.0, abs(g[j]))
        gp = kern.derivatives(D.dot(b + e), D)[1]
        gm = kern.derivatives(D.dot(b - e), D)[1]
        np.testing.assert_allclose(-(gp - gm) / (2 * h), Hn[:, j], atol=1e-6)


def test_nelson_aalen_examples():
    n = 6
    data = SurvivalData(np.arange(n), np.arange(1.0, n + 1), np.ones(n, int))
    k = StratifiedCoxKernel(data.time, data.event, np.zeros(n))
    H = nelson_aalen(k, np.zeros(n))[0]
    m = 4
    assert abs(H(data.time[m - 1]) - sum(1.0 / (n - j) for j in range(m))) < 1e-14
    assert H(0.5) == 0.0
    cens = StratifiedCoxKernel(data.time, np.zeros(n), np.zeros(n))
    H0 = nelson_aalen(cens, np.zeros(n), n_strata=1)[0]
    assert H0(10.0) == 0.0
    single = StratifiedCoxKernel(np.array([1.0, 2.0, 3.0]), np.array([1, 0, 0]), np.zeros(3))
    assert nelson_aalen(single, np.zeros(3))[0].jumps[0] == pytest.approx(1 / 3)


def test_kaplan_meier_explicit():
    t, S = kaplan_meier([1.0, 2.0, 2.0, 3.0, 4.0], [1, 1, 0, 1, 0])
    np.testing.assert_allclose(t, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(S, [4 / 5, 4 / 5 * 3 / 4, 4 / 5 * 3 / 4 * 1 / 2])


def test_jitter_ties_is_deterministic_and_breaks_ties():
    time = np.array([2.0, 1.0, 2.0, 2.0, 3.0])
    event = np.array([1, 1, 1, 0, 1])
    ids = np.array([5, 1, 3, 4, 2])
    out = jitter_ties(time, event, ids)
    assert out[3] == 2.0  # censored time untouched
    assert out[2] == 2.0  # smallest id in the tied run keeps its time
    assert out[0] < 2.0 and 2.0 - out[0] < 1e-8
    ev = out[event == 1]
    assert np.unique(ev).size == ev.size
    np.testing.assert_array_equal(out, jitter_ties(time, event, ids))


def test_survival_data_validation():
    with pytest.raises(ValueError):
        SurvivalData([1, 2], [1.0, -1.0], [1, 0])
    with pytest.raises(ValueError):
        SurvivalData([1, 1], [1.0, 2.0], [1, 0])
    with pytest.raises(ValueError):
        SurvivalData([1, 2], [1.0, 2.0], [1, 2])


def test_functional_predictor_and_weights():
    Z = FunctionalPredictor.uniform(np.ones((2, 4)))
    np.testing.assert_allclose(Z.grid, [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(Z.weights, 0.25)
    np.testing.assert_allclose(quadrature_weights(np.array([0.0, 2.0, 4.0, 6.0])), 2.0)
    np.testing.assert_allclose(quadrature_weights(np.array([0.0, 1.0, 2.0]), "trapezoid"), [0.5, 1.0, 0.5])
    with pytest.raises(ValueError):
        FunctionalPredictor(np.array([[1.0, np.nan]]), np.array([0.0, 1.0]))
