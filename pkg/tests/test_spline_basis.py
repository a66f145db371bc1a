import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.interpolate import BSpline, CubicSpline

from fcox.spline_basis import BasisSpec, evaluate_basis, make_basis, marginal_penalty, penalty_null_space


def _cardinal_oracle(spec, x, deriv=0):
    """Each basis function as the scipy interpolant of a unit vector."""
    knots = np.asarray(spec.knots)
    K = spec.dimension
    cols = []
    for j in range(K):
        e = np.zeros(K)
        e[j] = 1.0
        if spec.family == "cyclic_cubic":
            cs = CubicSpline(knots, np.append(e, e[0]), bc_type="periodic")
        else:
            cs = CubicSpline(knots, e, bc_type="natural")
        cols.append(cs(x, deriv))
    return np.column_stack(cols)


def _bspline_oracle(spec, x):
    a, b = spec.domain
    t = np.concatenate([[a] * 3, spec.knots, [b] * 3])
    return BSpline.design_matrix(x, t, 3).toarray()


def test_make_basis_knot_placement():
    spec = make_basis("cubic_regression", 5, (0.0, 1.0))
    np.testing.assert_allclose(spec.knots, [0, 0.25, 0.5, 0.75, 1.0])
    cyc = make_basis("cyclic_cubic", 4, (0.0, 1.0))
    assert cyc.dimension == 4 and len(cyc.knots) == 5
    bs = make_basis("bspline_cubic", 10, (0.0, 1.0))
    assert evaluate_basis(bs, [0.3]).shape == (1, 10)


@pytest.mark.parametrize("family", ["cubic_regression", "cyclic_cubic", "bspline_cubic"])
def test_invalid_specs_rejected(family):
    with pytest.raises(ValueError):
        make_basis(family, 2, (0.0, 1.0))
    with pytest.raises(ValueError):
        make_basis(family, 5, (1.0, 1.0))


def test_unknown_family():
    with pytest.raises(ValueError):
        BasisSpec("thin_plate", (0.0, 1.0), (0.0, 1.0), 3)


@pytest.mark.parametrize("family", ["cubic_regression", "cyclic_cubic"])
@pytest.mark.parametrize("deriv", [0, 1, 2])
def test_cardinal_bases_match_scipy_interpolants(family, deriv):
    spec = make_basis(family, 7, (0.0, 2.0))
    x = np.linspace(0.0, 2.0, 301)
    np.testing.assert_allclose(evaluate_basis(spec, x, deriv), _cardinal_oracle(spec, x, deriv), atol=1e-11)


def test_bspline_matches_scipy_design_matrix():
    spec = make_basis("bspline_cubic", 10, (0.0, 1.0))
    x = np.linspace(0.0, 1.0, 257)[:-1]
    np.testing.assert_allclose(evaluate_basis(spec, x), _bspline_oracle(spec, x), atol=1e-13)


def test_partition_of_unity_random_points():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.0, 1.0, 1000)
    B = evaluate_basis(make_basis("bspline_cubic", 10, (0.0, 1.0)), x)
    assert np.all(B >= 0)
    assert np.max(np.abs(B.sum(axis=1) - 1.0)) < 1e-10


def test_cardinal_identity_at_knots():
    spec = make_basis("cubic_regression", 6, (-1.0, 3.0))
    np.testing.assert_allclose(evaluate_basis(spec, spec.knots), np.eye(6), atol=1e-10)


@pytest.mark.parametrize("deriv", [0, 1, 2])
def test_cyclic_periodicity(deriv):
    spec = make_basis("cyclic_cubic", 5, (0.0, 1.0))
    B = evaluate_basis(spec, [0.0, 1.0], deriv)
    np.testing.assert_allclose(B[0], B[1], atol=1e-8)


def test_cyclic_wraps_modulo_period():
    spec = make_basis("cyclic_cubic", 5, (0.0, 1.0))
    np.testing.assert_allclose(evaluate_basis(spec, [1.3, -0.2]), evaluate_basis(spec, [0.3, 0.8]), atol=1e-12)


@pytest.mark.parametrize("family", ["cubic_regression", "bspline_cubic"])
def test_out_of_domain_is_an_error(family):
    spec = make_basis(family, 6, (0.0, 1.0))
    with pytest.raises(ValueError):
        evaluate_basis(spec, [1.01])


def _penalty_by_quadrature(spec, xi):
    a, b = spec.domain
    breaks = np.unique(np.concatenate([[a, b], np.asarray(spec.knots, float)]))
    total = 0.0
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        total += quad(lambda x: (evaluate_basis(spec, [x], 2)[0] @ xi) ** 2, lo, hi, epsabs=1e-14, epsrel=1e-12)[0]
    return total


@pytest.mark.parametrize("family,K", [("cubic_regression", 6), ("cyclic_cubic", 6), ("bspline_cubic", 9)])
def test_penalty_matches_quadrature(family, K):
    spec = make_basis(family, K, (0.0, 2.0))
    P = marginal_penalty(spec)
    rng = np.random.default_rng(K)
    for _ in range(3):
        xi = rng.normal(size=K)
        ref = _penalty_by_quadrature(spec, xi)
        assert abs(xi @ P @ xi - ref) <= 1e-6 * ref


@pytest.mark.parametrize("family,nulldim", [("cubic_regression", 2), ("cyclic_cubic", 1), ("bspline_cubic", 2)])
def test_penalty_psd_and_null_space(family, nulldim):
    spec = make_basis(family, 8, (0.0, 1.0))
    P = marginal_penalty(spec)
    np.testing.assert_allclose(P, P.T, rtol=1e-12, atol=1e-12 * np.abs(P).max())
    vals = np.linalg.eigvalsh(P)
    assert vals.min() >= -1e-10 * vals.max()
    assert np.sum(vals < 1e-9 * vals.max()) == nulldim
    assert spec.null_space_dimension == nulldim
    N = penalty_null_space(spec)
    assert N.shape == (8, nulldim)
    assert np.abs(P @ N).max() < 1e-9 * vals.max()
    assert np.abs(P @ np.ones(8)).max() < 1e-9 * vals.max()


def test_linear_trend_is_unpenalized_for_natural_spline():
    spec = make_basis("cubic_regression", 7, (0.0, 3.0))
    line = 2.0 - 0.5 * np.asarray(spec.knots)
    assert abs(line @ marginal_penalty(spec) @ line) < 1e-10


@settings(max_examples=40, deadline=None)
@given(
    K=st.integers(3, 12),
    a=st.floats(-5, 5),
    width=st.floats(0.1, 10),
    family=st.sampled_from(["cubic_regression", "cyclic_cubic"]),
)
def test_cardinal_bases_reproduce_constants(K, a, width, family):
    spec = make_basis(family, K, (a, a + width))
    x = np.linspace(a, a + width, 50)
    B = evaluate_basis(spec, x)
    assert np.all(np.isfinite(B))
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(K=st.integers(4, 14), seed=st.integers(0, 2**31 - 1))
def test_bspline_partition_of_unity_property(K, seed):
    spec = make_basis("bspline_cubic", K, (0.0, 1.0))
    x = np.random.default_rng(seed).uniform(0, 1, 100)
    B = evaluate_basis(spec, x)
    assert np.all(B >= -1e-15)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-10)
