"""Functional principal components for densely observed curves.

The sample covariance is smoothed on the diagonal only: each diagonal
entry is replaced by a local quadratic fit through the nearby off-diagonal
entries of its row, which are free of measurement error. The gap between
the raw and the smoothed diagonal estimates the error variance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from fcox.spline_basis import evaluate_basis
from fcox.survival import FunctionalPredictor
from fcox.tensor import tensor_design


@dataclass
class FPCAResult:
    """Principal components of a sample of curves.

    Attributes
    ----------
    mean : ndarray (J,)
    eigenvalues : ndarray (K,)
    eigenfunctions : ndarray (J, K)
        Orthonormal under the quadrature weights: ``psi' W psi = I``.
    scores : ndarray (n, K)
    sigma2 : float
        Measurement error variance.
    grid, weights : ndarray
    covariance : ndarray (J, J)
        Smoothed covariance.
    """

    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    scores: np.ndarray
    sigma2: float
    grid: np.ndarray
    weights: np.ndarray
    covariance: np.ndarray

    def reconstruct(self) -> np.ndarray:
        """Smoothed curves ``mean + scores @ psi'``."""
        return self.mean[None, :] + self.scores @ self.eigenfunctions.T


def smooth_diagonal(C: np.ndarray, half_width: int = 5) -> np.ndarray:
    """Diagonal of ``C`` predicted from off-diagonal neighbours.

    For each row ``v`` a quadratic in the offset ``h = w - v`` is fitted by
    least squares to ``C[v, w]`` for ``1 <= |h| <= half_width`` and evaluated
    at ``h = 0``.
    """
    J = C.shape[0]
    out = np.empty(J)
    for v in range(J):
        h = np.array([k for k in range(-half_width, half_width + 1) if k != 0 and 0 <= v + k < J])
        X = np.column_stack([np.ones(h.size), h, h**2])
        if h.size < 3:
            out[v] = np.mean(C[v, v + h])
            continue
        coef, *_ = np.linalg.lstsq(X, C[v, v + h], rcond=None)
        out[v] = coef[0]
    return out


def fpca(Z: FunctionalPredictor, n_components: int = None, variance_explained: float = 0.99, half_width: int = 5):
    """Principal component decomposition of curves on a common grid.

    Parameters
    ----------
    Z : FunctionalPredictor
    n_components : int, optional
        Number of components; chosen by ``variance_explained`` when omitted.
    variance_explained : float
        Fraction of total variance the retained components must explain.
    half_width : int
        Off-diagonal steps used by the diagonal smoother.

    Returns
    -------
    FPCAResult
    """
    X = Z.values
    n, J = X.shape
    mu = X.mean(axis=0)
    R = X - mu
    C = R.T @ R / (n - 1)
    diag_raw = np.diag(C).copy()
    diag_s = smooth_diagonal(C, half_width)
    sigma2 = max(float(np.mean(diag_raw - diag_s)), 0.0)
    Cs = C.copy()
    Cs[np.diag_indices(J)] = diag_s
    sw = np.sqrt(Z.weights)
    M = sw[:, None] * Cs * sw[None, :]
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    pos = vals > 0
    if n_components is None:
        frac = np.cumsum(vals[pos]) / np.sum(vals[pos])
        n_components = int(np.searchsorted(frac, variance_explained - 1e-12) + 1)
    rank = int(np.sum(vals > 1e-12 * max(vals[0], 0.0))) if vals[0] > 0 else 0
    if n_components > rank:
        warnings.warn(f"requested {n_components} components but the covariance has numerical rank {rank}")
    K = int(min(n_components, rank))
    psi = vecs[:, :K] / sw[:, None]
    # fix signs so the largest loading is positive
    flip = np.sign(psi[np.argmax(np.abs(psi), axis=0), np.arange(K)])
    psi = psi * flip
    scores = (R * Z.weights[None, :]) @ psi
    return FPCAResult(mu, vals[:K], psi, scores, sigma2, Z.grid, Z.weights, Cs)


def project_scores(values, result: FPCAResult, grid=None) -> np.ndarray:
    """Quadrature inner products of centered curves with the eigenfunctions.

    Parameters
    ----------
    values : ndarray (n, J)
    result : FPCAResult
    grid : ndarray, optional
        Grid of ``values``; must match the fitted grid when given.
    """
    if grid is not None and (np.shape(grid) != result.grid.shape or not np.allclose(grid, result.grid)):
        raise ValueError("curves are on a different grid than the fitted components")
    values = np.atleast_2d(np.asarray(values, float))
    return ((values - result.mean) * result.weights[None, :]) @ result.eigenfunctions


def fpca_design(result: FPCAResult, spec_u, Bt: np.ndarray, rows=None) -> np.ndarray:
    """Tensor design built from reconstructed, centered curves.

    Parameters
    ----------
    result : FPCAResult
    spec_u : BasisSpec
        Functional margin.
    Bt : ndarray (n_rows, K_t)
        Time-margin basis for each row.
    rows : ndarray of int, optional
        Subject index of each row; all subjects in order when omitted.

    Returns
    -------
    ndarray (n_rows, K_u * K_t)
    """
    curves = result.scores @ result.eigenfunctions.T
    if rows is not None:
        curves = curves[rows]
    Bu = evaluate_basis(spec_u, result.grid)
    return tensor_design(Bu, Bt, curves * result.weights[None, :])
