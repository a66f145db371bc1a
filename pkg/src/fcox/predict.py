"""Coefficient surfaces, survival curves and dynamic prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fcox.spline_basis import BasisSpec, evaluate_basis

Z_975 = 1.959963984540054


@dataclass
class CoefficientSurface:
    """Tensor-spline surface ``gamma(u, t) = Bu(u)' xi Bt(t)``.

    Attributes
    ----------
    xi : ndarray (K_u, K_t)
    spec_u, spec_t : BasisSpec
    covariance : ndarray (K_u K_t, K_u K_t)
        Covariance of the coefficients in the ``u``-fastest order.
    """

    xi: np.ndarray
    spec_u: BasisSpec
    spec_t: BasisSpec
    covariance: np.ndarray = None


def eval_surface(surface: CoefficientSurface, u, t, se: bool = True):
    """Evaluate a surface and its pointwise standard error on a grid.

    Parameters
    ----------
    surface : CoefficientSurface
    u, t : array_like
        Grid coordinates.
    se : bool
        Also return standard errors.

    Returns
    -------
    values : ndarray (len(u), len(t))
    se : ndarray (len(u), len(t)), only when ``se`` is true

    Raises
    ------
    ValueError
        If a grid point lies outside its margin's domain.
    """
    for name, pts, spec in (("u", u, surface.spec_u), ("t", t, surface.spec_t)):
        lo, hi = spec.domain
        pts = np.asarray(pts, float)
        if pts.size and (pts.min() < lo - 1e-12 or pts.max() > hi + 1e-12):
            raise ValueError(f"{name} grid leaves the basis domain [{lo}, {hi}]")
    Bu = evaluate_basis(surface.spec_u, u)
    Bt = evaluate_basis(surface.spec_t, t)
    vals = Bu @ surface.xi @ Bt.T
    if not se:
        return vals
    Ku, Kt = surface.xi.shape
    V = surface.covariance.reshape(Kt, Ku, Kt, Ku)
    # var(u, t) = sum Bt[t,k] Bu[u,j] V[k,j,l,i] Bt[t,l] Bu[u,i]
    W = np.einsum("tk,kjli,tl->tji", Bt, V, Bt, optimize=True)
    var = np.einsum("uj,tji,ui->ut", Bu, W, Bu, optimize=True)
    return vals, np.sqrt(np.maximum(var, 0.0))


def confidence_band(values, se, level_z: float = Z_975):
    """Pointwise Wald interval ``values +/- z * se``."""
    return values - level_z * se, values + level_z * se


def survival_curve(fit, z, x=None, landmark: int = None, times=None):
    """Predicted survival for one subject.

    For the landmark route the curve is conditional on survival to the
    landmark time: ``exp(-H_l(t) exp(eta_l))`` for ``t`` from ``s_l``. For
    the Poisson route the linear predictor varies with time and the curve is
    ``exp(-sum_{t_k <= t} exp(eta(t_k)) dH_k)``.

    Returns
    -------
    times : ndarray
        Jump times of the curve (or the requested times).
    survival : ndarray
    """
    z = np.atleast_2d(np.asarray(z, float))
    xr = None if x is None else np.atleast_2d(np.asarray(x, float))
    if fit.route == "landmark":
        H = fit.baselines[landmark]
        eta = fit.linear_predictor(z, xr, landmark=landmark)[0]
        tt = H.times if times is None else np.asarray(times, float)
        return tt, np.exp(-H(tt) * np.exp(eta))
    H = fit.baselines[0]
    eta_k = np.array([fit.linear_predictor(z, xr, t=tk)[0] for tk in H.times]) if H.times.size else np.zeros(0)
    cum = np.cumsum(np.exp(eta_k) * H.jumps)
    tt = H.times if times is None else np.asarray(times, float)
    k = np.searchsorted(H.times, tt, side="right")
    vals = np.concatenate([[0.0], cum])[k]
    return tt, np.exp(-vals)


def _landmark_survival(fit, z, x, l, t):
    """Conditional survival from landmark ``l`` to time ``t``."""
    H = fit.baselines[l]
    eta = fit.linear_predictor(z, x, landmark=l)[0]
    return float(np.exp(-H(t) * np.exp(eta)))


def _covered(intervals, a: float, b: float) -> bool:
    """Whether ``[a, b]`` lies inside the union of ``intervals``."""
    if intervals is None:
        return False
    pos = a
    for lo, hi in sorted(map(tuple, np.asarray(intervals, float))):
        if lo <= pos + 1e-12 and hi > pos:
            pos = hi
        if pos >= b - 1e-12:
            return True
    return False


def dynamic_predict(fit, z, x=None, t_star: float = None, origin: int = 0, z_updates=None):
    """Probability of surviving to ``t_star`` given survival to landmark ``origin``.

    Two estimates are returned. The direct estimate reads the origin
    stratum while its window covers ``t_star``. The chained estimate
    multiplies the conditional survivals of consecutive landmarks up to the
    latest one before ``t_star``, using updated curves from ``z_updates``
    when given. Windows dropped from the fit for lack of events count as
    survival one.

    Parameters
    ----------
    fit : FunctionalCoxFit
        A landmark-route fit.
    z : ndarray (J,)
        Curve known at the origin landmark.
    x : ndarray, optional
        Scalar covariates.
    t_star : float
        Horizon.
    origin : int
        Index of the origin landmark.
    z_updates : dict, optional
        Landmark index to updated curve.

    Returns
    -------
    dict
        ``direct`` (nan when the origin window does not reach ``t_star``),
        ``chained`` and ``difference``.
    """
    if fit.route != "landmark":
        raise ValueError("dynamic prediction needs a landmark fit")
    s = fit.landmarks
    w = fit.windows
    if t_star < s[origin]:
        raise ValueError("horizon precedes the origin landmark")
    z_updates = {} if z_updates is None else z_updates
    direct = _landmark_survival(fit, z, x, origin, t_star) if t_star <= s[origin] + w[origin] else float("nan")
    last = int(np.searchsorted(s, t_star, side="right") - 1)
    last = max(last, origin)
    prob = 1.0
    for l in range(origin, last + 1):
        zl = z_updates.get(l, z)
        end = t_star if l == last else s[l + 1]
        reach = s[l] + w[l]
        if end > reach + 1e-12:
            # a gap left by dropped event-free windows contributes a factor of one
            if not _covered(fit.null_windows, reach, end):
                raise ValueError(f"windows do not cover the horizon at landmark {float(s[l])!r}")
            end = reach
        prob *= _landmark_survival(fit, zl, x, l, end)
    return {"direct": direct, "chained": prob, "difference": prob - direct}
