import warnings

import numpy as np
import pytest

from fcox.fitter import PenalizedProblem, newton_fit
from fcox.fpca import fpca, fpca_design, project_scores, smooth_diagonal
from fcox.simulate import simulate_curves
from fcox.spline_basis import evaluate_basis, make_basis
from fcox.survival import FunctionalPredictor, StratifiedCoxKernel
from fcox.tensor import KroneckerDesign, tensor_design


def linear_curves(rng, n=200, J=40):
    """Curves ``a + b u``; their covariance is exactly quadratic along rows."""
    u = (np.arange(J) + 0.5) / J
    ab = rng.normal(size=(n, 2)) * [1.0, 2.0]
    return FunctionalPredictor.uniform(ab[:, :1] + ab[:, 1:] * u)


def check_orthonormal(r):
    G = r.eigenfunctions.T @ (r.weights[:, None] * r.eigenfunctions)
    assert np.max(np.abs(G - np.eye(G.shape[0]))) < 1e-8
    assert np.all(np.diff(r.eigenvalues) <= 0) and np.all(r.eigenvalues >= 0)


def test_rank_one_recovers_direction():
    rng = np.random.default_rng(0)
    J = 30
    u = (np.arange(J) + 0.5) / J
    v = 1.0 + u
    Z = FunctionalPredictor.uniform(rng.normal(size=(100, 1)) * v)
    with pytest.warns(UserWarning, match="numerical rank"):
        r = fpca(Z, n_components=3)
    check_orthonormal(r)
    assert r.eigenvalues.size == 1
    psi = r.eigenfunctions[:, 0]
    cos = abs(psi @ (Z.weights * v)) / np.sqrt((psi @ (Z.weights * psi)) * (v @ (Z.weights * v)))
    assert cos > 1 - 1e-10
    full = np.linalg.eigvalsh(r.covariance * Z.weights[None, :])
    assert np.sort(np.abs(full))[-2] < 1e-8 * r.eigenvalues[0]


def test_noise_free_curves_give_zero_noise_variance():
    r = fpca(linear_curves(np.random.default_rng(1)), n_components=2)
    assert r.sigma2 < 1e-6 * r.eigenvalues[0]
    check_orthonormal(r)


def test_noise_variance_under_simulation_design():
    _, z_obs, _ = simulate_curves(2000, 100, np.random.default_rng(2))
    r = fpca(FunctionalPredictor.uniform(z_obs))
    assert 0.04 <= r.sigma2 <= 0.09
    check_orthonormal(r)


@pytest.mark.parametrize("seed", range(5))
def test_score_covariance_is_diagonal_eigenvalues(seed):
    _, z_obs, _ = simulate_curves(2000, 100, np.random.default_rng(seed))
    r = fpca(FunctionalPredictor.uniform(z_obs))
    C = np.cov(r.scores.T)
    assert np.max(np.abs(np.diag(C) / r.eigenvalues - 1)) < 0.15
    assert np.max(np.abs(C - np.diag(np.diag(C)))) < 0.15 * r.eigenvalues[0]


def test_smooth_diagonal_exact_for_quadratic_rows():
    J = 15
    i, j = np.meshgrid(np.arange(J), np.arange(J), indexing="ij")
    C = 1.0 + 0.3 * i + 0.2 * j + 0.05 * i * j
    np.testing.assert_allclose(smooth_diagonal(C + np.eye(J)), np.diag(C), atol=1e-10)


def test_project_scores_examples():
    r = fpca(linear_curves(np.random.default_rng(3)), n_components=2)
    r.mean = np.zeros_like(r.mean)
    np.testing.assert_allclose(project_scores(r.eigenfunctions[:, 0], r), [[1.0, 0.0]], atol=1e-10)
    np.testing.assert_array_equal(project_scores(np.zeros(r.grid.size), r), [[0.0, 0.0]])
    with pytest.raises(ValueError):
        project_scores(np.zeros(r.grid.size), r, grid=r.grid[::-1])


def test_reconstruction_error_decreases_with_components():
    rng = np.random.default_rng(4)
    Z = FunctionalPredictor.uniform(rng.normal(size=(60, 40)).cumsum(axis=1))
    errs = []
    for K in range(1, 9):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            r = fpca(Z, n_components=K)
        c = project_scores(Z.values, r)
        errs.append(np.linalg.norm(Z.values - r.mean - c @ r.eigenfunctions.T))
    assert all(b <= a + 1e-10 for a, b in zip(errs, errs[1:]))


def test_design_matches_triple_loop_oracle():
    rng = np.random.default_rng(5)
    Z = FunctionalPredictor.uniform(rng.normal(size=(12, 9)).cumsum(axis=1))
    r = fpca(Z, n_components=3)
    spec_u = make_basis("cyclic_cubic", 4, (0.0, 1.0))
    Bu = evaluate_basis(spec_u, r.grid)
    Bt = rng.normal(size=(12, 3))
    D = fpca_design(r, spec_u, Bt)
    ref = np.zeros_like(D)
    for i in range(12):
        for k in range(3):
            for j in range(4):
                # sum over components of score times int psi B_j
                ref[i, k * 4 + j] = Bt[i, k] * sum(
                    r.scores[i, c] * np.sum(r.weights * r.eigenfunctions[:, c] * Bu[:, j]) for c in range(3)
                )
    np.testing.assert_allclose(D, ref, atol=1e-10)


def test_single_component_constant_bases():
    r = fpca(linear_curves(np.random.default_rng(6)), n_components=1)
    const = make_basis("constant", 1, (0.0, 1.0))
    D = fpca_design(r, const, np.ones((r.scores.shape[0], 1)))
    np.testing.assert_allclose(D[:, 0], r.scores[:, 0] * np.sum(r.weights * r.eigenfunctions[:, 0]), atol=1e-12)


def test_design_and_fit_agree_with_direct_tensor_design_in_span():
    rng = np.random.default_rng(7)
    n = 150
    Z = linear_curves(rng, n=n, J=30)
    r = fpca(Z, n_components=2)
    spec_u = make_basis("cyclic_cubic", 5, (0.0, 1.0))
    Bu = evaluate_basis(spec_u, Z.grid)
    Bt = np.ones((n, 1))
    D_fpca = fpca_design(r, spec_u, Bt)
    D_direct = tensor_design(Bu, Bt, (Z.values - r.mean) * Z.weights)
    np.testing.assert_allclose(D_fpca, D_direct, atol=1e-8)
    eta = D_direct @ rng.normal(size=5)
    t = rng.exponential(np.exp(-eta))
    order = np.argsort(t)
    kern = StratifiedCoxKernel(t[order], np.ones(n, int), np.zeros(n))
    P = np.eye(5)
    fits = [newton_fit(PenalizedProblem(kern, KroneckerDesign.from_dense(D[order]), [(P, 0)]), [1.0]) for D in
            (D_fpca, D_direct)]
    u = np.linspace(0, 1, 11)
    g = [evaluate_basis(spec_u, u) @ f.coef for f in fits]
    assert np.max(np.abs(g[0] - g[1])) < 1e-6
