"""Marginal spline bases and their roughness penalties.

Five families are supported:

``cyclic_cubic``
    Cubic regression spline whose value, slope and curvature wrap around
    the domain. Parameterized by the function values at ``K`` knots; the
    last knot is identified with the first.
``cubic_regression``
    Natural cubic regression spline parameterized by its values at ``K``
    knots (cardinal basis).
``bspline_cubic``
    Clamped cubic B-spline basis with ``K`` functions.
``constant``
    A single function equal to one, with a zero penalty.
``indicator``
    One function per knot equal to one exactly at that knot. Used to give
    each landmark its own unsmoothed coefficient block.

All penalties are the integrated squared second derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

FAMILIES = ("cyclic_cubic", "cubic_regression", "bspline_cubic", "constant", "indicator")

# Relative slack for points that sit on a domain edge up to rounding.
_EDGE_TOL = 1e-10


@dataclass(frozen=True)
class BasisSpec:
    """Description of a marginal basis.

    Parameters
    ----------
    family : str
        One of :data:`FAMILIES`.
    knots : tuple of float
        Strictly increasing knot locations. For ``cyclic_cubic`` this has
        ``dimension + 1`` entries spanning one period; for ``bspline_cubic``
        these are the breakpoints (``dimension - 2`` of them).
    domain : tuple of float
        Closed interval ``(a, b)`` on which the basis is defined.
    dimension : int
        Number of basis functions.
    """

    family: str
    knots: tuple
    domain: tuple
    dimension: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}")
        knots = np.asarray(self.knots, dtype=float)
        a, b = (float(v) for v in self.domain)
        if not b > a and self.family not in ("constant", "indicator"):
            raise ValueError("domain must satisfy a < b")
        if knots.size > 1 and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        expected = {
            "cyclic_cubic": self.dimension + 1,
            "cubic_regression": self.dimension,
            "bspline_cubic": self.dimension - 2,
            "constant": 0,
            "indicator": self.dimension,
        }[self.family]
        if self.family == "constant":
            if self.dimension != 1:
                raise ValueError("constant basis has dimension 1")
            return
        if knots.size != expected:
            raise ValueError(
                f"{self.family} with dimension {self.dimension} needs {expected} knots, "
                f"got {knots.size}"
            )
        if self.family in ("cyclic_cubic", "cubic_regression") and self.dimension < 3:
            raise ValueError(f"{self.family} needs dimension >= 3")
        if self.family == "bspline_cubic" and self.dimension < 4:
            raise ValueError("bspline_cubic needs dimension >= 4")
        if self.family != "indicator":
            tol = _EDGE_TOL * (b - a)
            if knots[0] < a - tol or knots[-1] > b + tol:
                raise ValueError("knots must lie inside the domain")

    @property
    def null_space_dimension(self) -> int:
        """Dimension of the penalty null space."""
        return {
            "cyclic_cubic": 1,
            "cubic_regression": 2,
            "bspline_cubic": 2,
            "constant": 1,
            "indicator": self.dimension,
        }[self.family]


def make_basis(family: str, dimension: int, domain=(0.0, 1.0), knots=None) -> BasisSpec:
    """Build a :class:`BasisSpec` with evenly spaced knots by default.

    Parameters
    ----------
    family : str
        Basis family name.
    dimension : int
        Number of basis functions.
    domain : tuple of float
        Interval ``(a, b)``.
    knots : array_like, optional
        Explicit knots. Required for ``indicator``.

    Returns
    -------
    BasisSpec
    """
    a, b = float(domain[0]), float(domain[1])
    if knots is None:
        if family == "cyclic_cubic":
            knots = np.linspace(a, b, dimension + 1)
        elif family == "cubic_regression":
            knots = np.linspace(a, b, dimension)
        elif family == "bspline_cubic":
            knots = np.linspace(a, b, dimension - 2)
        elif family == "constant":
            knots = ()
        else:
            raise ValueError("indicator basis needs explicit knots")
    return BasisSpec(family, tuple(float(k) for k in np.asarray(knots, float)), (a, b), int(dimension))


def _natural_second_derivative_map(knots: np.ndarray):
    """Return ``(F, D, Bm)`` for the natural cardinal spline.

    ``F`` maps knot values to knot second derivatives, and the penalty is
    ``D.T @ inv(Bm) @ D``.
    """
    k = knots.size
    h = np.diff(knots)
    D = np.zeros((k - 2, k))
    Bm = np.zeros((k - 2, k - 2))
    for i in range(1, k - 1):
        r = i - 1
        D[r, i - 1] = 1.0 / h[i - 1]
        D[r, i] = -1.0 / h[i - 1] - 1.0 / h[i]
        D[r, i + 1] = 1.0 / h[i]
        Bm[r, r] = (h[i - 1] + h[i]) / 3.0
        if r > 0:
            Bm[r, r - 1] = h[i - 1] / 6.0
        if r < k - 3:
            Bm[r, r + 1] = h[i] / 6.0
    F = np.zeros((k, k))
    F[1:-1] = np.linalg.solve(Bm, D)
    return F, D, Bm


def _cyclic_second_derivative_map(knots: np.ndarray):
    """Return ``(F, D, Bm)`` for the cyclic cardinal spline.

    ``knots`` holds ``K + 1`` values, the last one identified with the first.
    """
    k = knots.size - 1
    h = np.diff(knots)
    D = np.zeros((k, k))
    Bm = np.zeros((k, k))
    for i in range(k):
        hm, hp = h[i - 1], h[i]
        im, ip = (i - 1) % k, (i + 1) % k
        D[i, im] += 1.0 / hm
        D[i, i] += -1.0 / hm - 1.0 / hp
        D[i, ip] += 1.0 / hp
        Bm[i, im] += hm / 6.0
        Bm[i, i] += (hm + hp) / 3.0
        Bm[i, ip] += hp / 6.0
    F = np.linalg.solve(Bm, D)
    return F, D, Bm


def _bspline_knot_vector(spec: BasisSpec) -> np.ndarray:
    br = np.asarray(spec.knots, float)
    return np.concatenate([np.repeat(br[0], 3), br, np.repeat(br[-1], 3)])


def _check_points(spec: BasisSpec, x: np.ndarray) -> np.ndarray:
    a, b = spec.domain
    if spec.family == "cyclic_cubic":
        period = spec.knots[-1] - spec.knots[0]
        return spec.knots[0] + np.mod(x - spec.knots[0], period)
    tol = _EDGE_TOL * max(b - a, 1.0)
    if np.any(x < a - tol) or np.any(x > b + tol):
        bad = x[(x < a - tol) | (x > b + tol)]
        raise ValueError(f"points outside basis domain [{a}, {b}]: {bad[:5]}")
    return np.clip(x, a, b)


def _cardinal_eval(knots, F, x, deriv, nvals):
    """Evaluate a cardinal cubic spline basis given the curvature map ``F``."""
    idx = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, knots.size - 2)
    x0, x1 = knots[idx], knots[idx + 1]
    h = x1 - x0
    am, ap = (x1 - x) / h, (x - x0) / h
    n = x.size
    out = np.zeros((n, nvals))
    lo = idx % nvals
    hi = (idx + 1) % nvals
    rows = np.arange(n)
    if deriv == 0:
        wa_lo, wa_hi = am, ap
        wc_lo = ((x1 - x) ** 3 / h - h * (x1 - x)) / 6.0
        wc_hi = ((x - x0) ** 3 / h - h * (x - x0)) / 6.0
    elif deriv == 1:
        wa_lo, wa_hi = -1.0 / h, 1.0 / h
        wc_lo = -(3.0 * (x1 - x) ** 2 / h - h) / 6.0
        wc_hi = (3.0 * (x - x0) ** 2 / h - h) / 6.0
        wa_lo = np.broadcast_to(wa_lo, x.shape)
        wa_hi = np.broadcast_to(wa_hi, x.shape)
    elif deriv == 2:
        wa_lo = np.zeros_like(x)
        wa_hi = np.zeros_like(x)
        wc_lo, wc_hi = am, ap
    else:
        raise ValueError("deriv must be 0, 1 or 2")
    np.add.at(out, (rows, lo), wa_lo)
    np.add.at(out, (rows, hi), wa_hi)
    out += wc_lo[:, None] * F[lo] + wc_hi[:, None] * F[hi]
    return out


def evaluate_basis(spec: BasisSpec, points, deriv: int = 0) -> np.ndarray:
    """Evaluate the basis (or a derivative) at ``points``.

    Parameters
    ----------
    spec : BasisSpec
    points : array_like
        Evaluation points. Non-cyclic families reject points outside the
        domain; cyclic points are wrapped into one period.
    deriv : int
        Derivative order, 0 to 2.

    Returns
    -------
    ndarray of shape (len(points), spec.dimension)
    """
    x = np.atleast_1d(np.asarray(points, dtype=float)).ravel()
    fam = spec.family
    if fam == "constant":
        return np.full((x.size, 1), 1.0 if deriv == 0 else 0.0)
    if fam == "indicator":
        knots = np.asarray(spec.knots)
        hit = np.isclose(x[:, None], knots[None, :], rtol=0.0, atol=1e-12 * max(1.0, np.abs(knots).max()))
        if np.any(hit.sum(axis=1) != 1):
            raise ValueError("indicator basis evaluated away from its knots")
        return hit.astype(float) if deriv == 0 else np.zeros(hit.shape)
    x = _check_points(spec, x)
    knots = np.asarray(spec.knots, float)
    if fam == "cubic_regression":
        F, _, _ = _natural_second_derivative_map(knots)
        return _cardinal_eval(knots, F, x, deriv, spec.dimension)
    if fam == "cyclic_cubic":
        F, _, _ = _cyclic_second_derivative_map(knots)
        return _cardinal_eval(knots, F, x, deriv, spec.dimension)
    t = _bspline_knot_vector(spec)
    spl = BSpline(t, np.eye(spec.dimension), 3, extrapolate=False)
    out = spl(x, nu=deriv)
    # the right edge is closed
    edge = x >= t[-1]
    if np.any(edge):
        out[edge] = BSpline(t, np.eye(spec.dimension), 3, extrapolate=True)(x[edge], nu=deriv)
    return np.nan_to_num(out)


def marginal_penalty(spec: BasisSpec) -> np.ndarray:
    """Integrated squared second derivative penalty.

    Returns
    -------
    ndarray of shape (K, K)
        Symmetric positive semi-definite matrix ``P`` with
        ``c @ P @ c == integral of f''(x)**2`` for ``f = B @ c``.
    """
    fam = spec.family
    if fam in ("constant", "indicator"):
        return np.zeros((spec.dimension, spec.dimension))
    knots = np.asarray(spec.knots, float)
    if fam == "cubic_regression":
        _, D, Bm = _natural_second_derivative_map(knots)
        P = D.T @ np.linalg.solve(Bm, D)
    elif fam == "cyclic_cubic":
        _, D, Bm = _cyclic_second_derivative_map(knots)
        P = D.T @ np.linalg.solve(Bm, D)
    else:
        # f'' is piecewise linear, so a 3-point Gauss rule per interval is exact
        gx, gw = np.polynomial.legendre.leggauss(3)
        lo, hi = knots[:-1], knots[1:]
        pts = (0.5 * (hi - lo)[:, None] * gx[None, :] + 0.5 * (hi + lo)[:, None]).ravel()
        wts = (0.5 * (hi - lo)[:, None] * gw[None, :]).ravel()
        B2 = evaluate_basis(spec, pts, deriv=2)
        P = B2.T @ (wts[:, None] * B2)
    return 0.5 * (P + P.T)


def penalty_null_space(spec: BasisSpec, tol: float = 1e-9) -> np.ndarray:
    """Orthonormal basis for the null space of the marginal penalty."""
    P = marginal_penalty(spec)
    vals, vecs = np.linalg.eigh(P)
    scale = max(vals.max(), 1.0) if vals.size else 1.0
    return vecs[:, vals <= tol * scale]
