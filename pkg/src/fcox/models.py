"""Fitting routes for the time-varying functional Cox model.

The log hazard of subject ``i`` at time ``t`` is

    log h0(t) + x_i' beta + int Z_i(u) gamma(u, t) du

with ``gamma`` a tensor-product spline. Two routes estimate ``gamma``:

``fit_poisson_route``
    Expands the records into one row per (event time, subject at risk) and
    maximizes the Poisson likelihood with a free intercept per event time.
    This is the full partial likelihood with time-varying design rows.
``fit_landmark_route``
    Stacks records over landmark times and maximizes a stratified partial
    likelihood in which ``gamma(u, s)`` is evaluated at the landmark time
    ``s`` of each stratum.
"""

from __future__ import annotations

import time as _time
import warnings
from dataclasses import dataclass, field

import numpy as np

from fcox.fitter import FitResult, PenalizedProblem, newton_fit, select_smoothing
from fcox.landmark import StackedLandmarkData, build_landmark_dataset, center_by_landmark
from fcox.spline_basis import BasisSpec, evaluate_basis, make_basis, marginal_penalty
from fcox.survival import (
    CumulativeHazard,
    FunctionalPredictor,
    ProfiledPoissonKernel,
    StratifiedCoxKernel,
    SurvivalData,
    nelson_aalen,
    poisson_expand,
)
from fcox.tensor import KroneckerDesign, apply_sum_to_zero_constraint, tensor_penalties


def normalized_penalty(spec: BasisSpec) -> np.ndarray:
    """Marginal penalty scaled to unit largest eigenvalue (zero stays zero)."""
    P = marginal_penalty(spec)
    top = np.linalg.eigvalsh(P).max() if P.size else 0.0
    return P / top if top > 0 else P


def functional_scores(Z: FunctionalPredictor, spec_u: BasisSpec, values=None) -> np.ndarray:
    """Quadrature integrals ``int Z(u) B_j(u) du`` for each curve."""
    Bu = evaluate_basis(spec_u, Z.grid)
    vals = Z.values if values is None else np.atleast_2d(values)
    return (vals * Z.weights[None, :]) @ Bu


@dataclass
class FunctionalCoxFit:
    """A fitted time-varying functional Cox model.

    Attributes
    ----------
    route : str
        ``"poisson"`` or ``"landmark"``.
    result : FitResult
    spec_u, spec_t : BasisSpec
        Functional and time margins.
    spec_scalar : BasisSpec or None
        Basis for landmark-varying scalar effects.
    grid, weights : ndarray
        Functional grid and quadrature weights.
    n_scalar : int
        Number of scalar covariates.
    baselines : list of CumulativeHazard
        One per landmark stratum, or a single one for the Poisson route.
    landmarks, windows : ndarray or None
    z_means : ndarray (L, J) or None
        Per-landmark mean curves removed before fitting.
    null_windows : ndarray (m, 2) or None
        ``(start, end)`` of windows dropped for having no events; the
        baseline hazard is zero there.
    n_rows : int
        Rows of the fitted data set.
    expansion_seconds, fit_seconds : float
    notes : list of str
    """

    route: str
    result: FitResult
    spec_u: BasisSpec
    spec_t: BasisSpec
    spec_scalar: BasisSpec
    grid: np.ndarray
    weights: np.ndarray
    n_scalar: int
    baselines: list
    landmarks: np.ndarray = None
    windows: np.ndarray = None
    z_means: np.ndarray = None
    null_windows: np.ndarray = None
    n_rows: int = 0
    n_constrained: int = 0
    expansion_seconds: float = 0.0
    fit_seconds: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def n_surface_coef(self) -> int:
        return self.spec_u.dimension * self.spec_t.dimension

    def surface(self):
        """The fitted coefficient surface with its covariance."""
        from fcox.predict import CoefficientSurface

        p = self.n_surface_coef
        xi = self.result.coef[:p].reshape(self.spec_t.dimension, self.spec_u.dimension).T
        return CoefficientSurface(xi, self.spec_u, self.spec_t, self.result.covariance[:p, :p])

    def scalar_effects(self, s=None) -> np.ndarray:
        """Scalar coefficients, evaluated at landmark time ``s`` when they vary."""
        p = self.n_surface_coef
        b = self.result.coef[p:]
        if self.n_scalar == 0:
            return np.zeros(0)
        if self.spec_scalar is None:
            return b
        K1 = self.spec_scalar.dimension
        phi = evaluate_basis(self.spec_scalar, [s])[0]
        return phi @ b.reshape(K1, self.n_scalar)

    def linear_predictor(self, z, x=None, t=None, landmark: int = None) -> np.ndarray:
        """Linear predictor for curves ``z`` (n, J) at time ``t`` or a landmark.

        For the landmark route the curves are centered with the stored mean
        of the chosen landmark and the surface is read at the landmark time.
        """
        z = np.atleast_2d(np.asarray(z, float))
        x = np.zeros((z.shape[0], self.n_scalar)) if x is None else np.atleast_2d(np.asarray(x, float))
        if self.route == "landmark":
            if landmark is None:
                raise ValueError("landmark index required")
            t = self.landmarks[landmark]
            if self.z_means is not None:
                z = z - self.z_means[landmark]
        Bu = evaluate_basis(self.spec_u, self.grid)
        A = (z * self.weights[None, :]) @ Bu
        bt = evaluate_basis(self.spec_t, [t])[0]
        xi = self.surface().xi
        eta = A @ (xi @ bt)
        if self.n_scalar:
            eta = eta + x @ self.scalar_effects(t)
        return eta


def _time_spec(family, k, domain, landmarks=None):
    if k == 1 or family == "constant":
        return make_basis("constant", 1, domain)
    if family == "indicator":
        return make_basis("indicator", len(landmarks), domain, knots=landmarks)
    return make_basis(family, k, domain)


def _build_penalties(spec_u, spec_t, n_scalar, spec_scalar, transform):
    Ku, Kt = spec_u.dimension, spec_t.dimension
    p_f = Ku * Kt
    Pu, Pt = tensor_penalties(normalized_penalty(spec_u), normalized_penalty(spec_t))
    K1 = 1 if spec_scalar is None else spec_scalar.dimension
    p = p_f + K1 * n_scalar
    raw = []
    for P in (Pu, Pt):
        if np.any(P):
            full = np.zeros((p, p))
            full[:p_f, :p_f] = P
            raw.append(full)
    if spec_scalar is not None and n_scalar:
        Ps = normalized_penalty(spec_scalar)
        if np.any(Ps):
            for j in range(n_scalar):
                E = np.zeros((n_scalar, n_scalar))
                E[j, j] = 1.0
                full = np.zeros((p, p))
                full[p_f:, p_f:] = np.kron(Ps, E)
                raw.append(full)
    return raw, p


def _fit(problem, lambdas, bounds):
    if lambdas is None:
        return select_smoothing(problem, bounds=bounds)
    lam = np.atleast_1d(np.asarray(lambdas, float))
    if lam.size != problem.n_lambda:
        raise ValueError(f"expected {problem.n_lambda} smoothing parameters, got {lam.size}")
    fit = newton_fit(problem, lam)
    return fit


def fit_poisson_route(
    data: SurvivalData,
    Z: FunctionalPredictor,
    k_u: int = 5,
    k_t: int = 5,
    family_u: str = "cyclic_cubic",
    family_t: str = "cubic_regression",
    time_domain=None,
    lambdas=None,
    bounds=(-6.0, 8.0),
) -> FunctionalCoxFit:
    """Fit the model by Poisson expansion of the partial likelihood.

    Parameters
    ----------
    data : SurvivalData
        Records with distinct event times (see :func:`~fcox.survival.jitter_ties`).
    Z : FunctionalPredictor
    k_u, k_t : int
        Basis dimensions of the functional and time margins.
    family_u, family_t : str
        Margin families.
    time_domain : tuple, optional
        Domain of the time margin; ``(0, max time)`` by default.
    lambdas : array_like, optional
        Fixed smoothing parameters; selected by restricted likelihood when
        omitted.
    bounds : tuple
        Search range for ``log10(lambda)``.

    Returns
    -------
    FunctionalCoxFit
    """
    t0 = _time.perf_counter()
    if time_domain is None:
        time_domain = (0.0, float(data.time.max()))
    spec_u = make_basis(family_u, k_u, Z.domain)
    spec_t = _time_spec(family_t, k_t, time_domain)
    ex = poisson_expand(data)
    if ex.event_times.size == 0:
        raise ValueError("no events to fit")
    expansion = _time.perf_counter() - t0

    t1 = _time.perf_counter()
    problem, kernel, design, r = poisson_problem(data, Z, ex, spec_u, spec_t)
    result = _fit(problem, lambdas, bounds)
    eta = design.dot(result.coef)
    alpha = kernel.intercepts(eta)
    baseline = CumulativeHazard(ex.event_times, np.exp(alpha))
    fit_seconds = _time.perf_counter() - t1
    return FunctionalCoxFit(
        route="poisson",
        result=result,
        spec_u=spec_u,
        spec_t=spec_t,
        spec_scalar=None,
        grid=Z.grid,
        weights=Z.weights,
        n_scalar=data.x.shape[1],
        baselines=[baseline],
        n_rows=ex.n_rows,
        n_constrained=r,
        expansion_seconds=expansion,
        fit_seconds=fit_seconds,
    )


def poisson_problem(data: SurvivalData, Z: FunctionalPredictor, ex, spec_u: BasisSpec, spec_t: BasisSpec):
    """Assemble the penalized Poisson problem on an expansion of ``data``.

    Returns
    -------
    (PenalizedProblem, ProfiledPoissonKernel, KroneckerDesign, int)
        The problem, its kernel and design, and the number of constrained
        directions. Design rows follow the expansion order, grouped by
        event time.
    """
    A = functional_scores(Z, spec_u)
    px = data.x.shape[1]
    Bt = evaluate_basis(spec_t, ex.event_times)
    Ku = spec_u.dimension
    blocks = [(Bt, np.arange(Ku))]
    if px:
        blocks.append((np.ones((ex.event_times.size, 1)), Ku + np.arange(px)))
    starts = ex.stratum_starts
    design = KroneckerDesign.from_source(np.hstack([A, data.x]), ex.subject, starts, blocks)
    kernel = ProfiledPoissonKernel(ex.outcome, ex.stratum)
    raw, p = _build_penalties(spec_u, spec_t, px, None, None)
    T, pens, r = apply_sum_to_zero_constraint(design, starts, raw)
    terms = {"gamma": slice(0, Ku * spec_t.dimension)}
    if px:
        terms["x"] = slice(Ku * spec_t.dimension, p)
    problem = PenalizedProblem(kernel, design, [(P, j) for j, P in enumerate(pens)], None if r == 0 else T, terms)
    return problem, kernel, design, r


def landmark_problem(
    stacked: StackedLandmarkData,
    spec_u: BasisSpec,
    spec_t: BasisSpec,
    spec_scalar: BasisSpec = None,
):
    """Assemble the stratified penalized problem for stacked landmark rows.

    Returns
    -------
    (PenalizedProblem, StratifiedCoxKernel, KroneckerDesign, ndarray, int)
        The problem, its kernel and design, the row order applied to the
        stacked rows and the number of constrained directions.
    """
    order = np.lexsort((stacked.time, stacked.landmark))
    lm = stacked.landmark[order]
    L = stacked.landmarks.size
    starts = np.searchsorted(lm, np.arange(L + 1), side="left")
    A = (stacked.zmat[order] * stacked.weights[None, :]) @ evaluate_basis(spec_u, stacked.grid)
    px = stacked.x.shape[1]
    F = np.hstack([A, stacked.x[order]])
    Ku = spec_u.dimension
    Bs = evaluate_basis(spec_t, stacked.landmarks)
    blocks = [(Bs, np.arange(Ku))]
    if px:
        Phi = np.ones((L, 1)) if spec_scalar is None else evaluate_basis(spec_scalar, stacked.landmarks)
        blocks.append((Phi, Ku + np.arange(px)))
    design = KroneckerDesign(F, starts, blocks)
    kernel = StratifiedCoxKernel(stacked.time[order], stacked.d[order], lm)
    raw, p = _build_penalties(spec_u, spec_t, px, spec_scalar, None)
    T, pens, r = apply_sum_to_zero_constraint(design, kernel.strata_starts, raw)
    terms = {"gamma": slice(0, Ku * spec_t.dimension)}
    if px:
        terms["x"] = slice(Ku * spec_t.dimension, p)
    problem = PenalizedProblem(kernel, design, [(P, j) for j, P in enumerate(pens)], None if r == 0 else T, terms)
    return problem, kernel, design, order, r


def fit_landmark_route(
    data: SurvivalData,
    Z: FunctionalPredictor,
    landmarks,
    windows,
    k_u: int = 5,
    k_t: int = 5,
    k_scalar: int = None,
    family_u: str = "cyclic_cubic",
    family_t: str = "cubic_regression",
    center: bool = True,
    time_domain=None,
    lambdas=None,
    bounds=(-6.0, 8.0),
) -> FunctionalCoxFit:
    """Fit the landmark approximation on stacked data.

    Parameters
    ----------
    data : SurvivalData
    Z : FunctionalPredictor
    landmarks : array_like
        Landmark times.
    windows : float or array_like
        Prediction windows.
    k_u, k_t : int
        Basis dimensions; ``k_t = 1`` gives a surface constant in time.
    k_scalar : int, optional
        Basis dimension for landmark-varying scalar effects, by default
        ``min(5, L)``; values below 3 give constant effects.
    family_t : str
        ``"indicator"`` gives every landmark its own unsmoothed block.
    center : bool
        Center the curves within each landmark.
    time_domain : tuple, optional
        Domain of the time margin; ``(0, max time)`` by default.
    lambdas : array_like, optional
        Fixed smoothing parameters.

    Returns
    -------
    FunctionalCoxFit
    """
    t0 = _time.perf_counter()
    if time_domain is None:
        time_domain = (0.0, float(data.time.max()))
    stacked = build_landmark_dataset(data, Z, landmarks, windows)
    if center:
        stacked = center_by_landmark(stacked)
    notes = [m for m in stacked.report if not m.endswith("has no events in its window")]
    has_event = np.bincount(stacked.landmark, weights=stacked.d, minlength=stacked.landmarks.size) > 0
    if not has_event.any():
        raise ValueError("no events inside any landmark window")
    null_windows = None
    if not has_event.all():
        gone = np.flatnonzero(~has_event)
        null_windows = np.column_stack([stacked.landmarks[gone], stacked.landmarks[gone] + stacked.windows[gone]])
        for l in gone:
            msg = f"landmark {float(stacked.landmarks[l])!r} has no events and was dropped"
            notes.append(msg)
            warnings.warn(msg)
        stacked = _drop_landmarks(stacked, has_event)
    L = stacked.landmarks.size
    spec_u = make_basis(family_u, k_u, Z.domain)
    spec_t = _time_spec(family_t, k_t, time_domain, stacked.landmarks)
    px = data.x.shape[1]
    spec_scalar = None
    if px:
        K1 = min(5, L) if k_scalar is None else k_scalar
        spec_scalar = _time_spec("cubic_regression" if K1 >= 3 else "constant", K1, time_domain)
    expansion = _time.perf_counter() - t0

    t1 = _time.perf_counter()
    problem, kernel, design, order, r = landmark_problem(stacked, spec_u, spec_t, spec_scalar)
    result = _fit(problem, lambdas, bounds)
    eta = design.dot(result.coef)
    baselines = nelson_aalen(kernel, eta, L)
    fit_seconds = _time.perf_counter() - t1
    return FunctionalCoxFit(
        route="landmark",
        result=result,
        spec_u=spec_u,
        spec_t=spec_t,
        spec_scalar=spec_scalar,
        grid=Z.grid,
        weights=Z.weights,
        n_scalar=px,
        baselines=baselines,
        landmarks=stacked.landmarks,
        windows=stacked.windows,
        z_means=stacked.z_means,
        null_windows=null_windows,
        n_rows=stacked.n_rows,
        n_constrained=r,
        expansion_seconds=expansion,
        fit_seconds=fit_seconds,
        notes=notes,
    )


def _drop_landmarks(stacked: StackedLandmarkData, keep: np.ndarray) -> StackedLandmarkData:
    new_index = np.cumsum(keep) - 1
    rows = keep[stacked.landmark]
    fields = dict(stacked.__dict__)
    for name in ("id", "subject", "time", "d", "svec", "x", "zmat"):
        fields[name] = fields[name][rows]
    fields["landmark"] = new_index[stacked.landmark[rows]]
    fields["landmarks"] = stacked.landmarks[keep]
    fields["windows"] = stacked.windows[keep]
    if stacked.z_means is not None:
        fields["z_means"] = stacked.z_means[keep]
    return StackedLandmarkData(**fields)


def fit_separate_landmarks(data, Z, landmarks, windows, k_u=5, lambdas=None, center=True, family_u="cyclic_cubic"):
    """Fit an independent functional Cox model at each landmark.

    Returns
    -------
    list of FunctionalCoxFit
        One fit per landmark with events, each with a surface constant in time.
    """
    fits = []
    w = np.broadcast_to(np.asarray(windows, float), np.shape(landmarks))
    for s, wl in zip(np.atleast_1d(landmarks), np.atleast_1d(w)):
        fits.append(
            fit_landmark_route(
                data, Z, [s], [wl], k_u=k_u, k_t=1, center=center, lambdas=lambdas, family_u=family_u
            )
        )
    return fits


def plan_rows(data: SurvivalData, landmarks) -> dict:
    """Row counts of both routes without building either data set.

    Returns
    -------
    dict
        ``poisson_rows``, ``landmark_rows`` and the number of distinct event
        times.
    """
    ys = np.sort(data.time)
    ev = np.unique(data.time[data.event == 1])
    poisson_rows = int(np.sum(data.n - np.searchsorted(ys, ev, side="left")))
    s = np.atleast_1d(np.asarray(landmarks, float))
    landmark_rows = int(np.sum(data.n - np.searchsorted(ys, s, side="right")))
    return {"poisson_rows": poisson_rows, "landmark_rows": landmark_rows, "event_times": int(ev.size)}


def cost_planner(n, k_u, k_t, event_rate, landmarks, time_max=1.0) -> dict:
    """Approximate sizes of both routes before any data exist.

    Observed times are taken as uniform on ``(0, time_max]``, so a fraction
    ``1 - s / time_max`` is at risk at landmark ``s`` and the Poisson
    expansion has about ``n**2 * event_rate / 2`` rows.

    Returns
    -------
    dict
        ``poisson_rows``, ``landmark_rows`` and ``*_flops``, the latter
        proportional to ``rows * (k_u * k_t)**2``.
    """
    s = np.atleast_1d(np.asarray(landmarks, float))
    poisson = n * n * event_rate / 2.0
    landmark = n * float(np.sum(np.clip(1.0 - s / time_max, 0.0, 1.0)))
    p2 = (k_u * k_t) ** 2
    return {"poisson_rows": poisson, "landmark_rows": landmark, "poisson_flops": poisson * p2,
            "landmark_flops": landmark * p2}


def _spec_to_dict(spec):
    if spec is None:
        return None
    return {"family": spec.family, "knots": list(map(float, spec.knots)), "domain": list(map(float, spec.domain)),
            "dimension": int(spec.dimension)}


def _spec_from_dict(d):
    if d is None:
        return None
    return BasisSpec(d["family"], tuple(d["knots"]), tuple(d["domain"]), int(d["dimension"]))


def _array_or_none(v):
    return None if v is None else np.asarray(v, float)


def fit_to_dict(fit: FunctionalCoxFit) -> dict:
    """JSON-ready description of a fit, sufficient for prediction.

    Floats survive the round trip exactly since JSON stores their shortest
    repr. Infinite windows are written as the string ``"inf"``.
    """
    res = fit.result
    return {
        "format": "fcox-model-1",
        "route": fit.route,
        "spec_u": _spec_to_dict(fit.spec_u),
        "spec_t": _spec_to_dict(fit.spec_t),
        "spec_scalar": _spec_to_dict(fit.spec_scalar),
        "grid": fit.grid.tolist(),
        "weights": fit.weights.tolist(),
        "n_scalar": int(fit.n_scalar),
        "coef": res.coef.tolist(),
        "covariance": res.covariance.tolist(),
        "lambdas": res.lambdas.tolist(),
        "edf": float(res.edf),
        "loglik": float(res.loglik),
        "penalized_loglik": float(res.penalized_loglik),
        "iterations": int(res.iterations),
        "score_norm": float(res.score_norm),
        "baselines": [{"times": H.times.tolist(), "jumps": H.jumps.tolist()} for H in fit.baselines],
        "landmarks": None if fit.landmarks is None else fit.landmarks.tolist(),
        "windows": None if fit.windows is None else [float(v) if np.isfinite(v) else "inf" for v in fit.windows],
        "z_means": None if fit.z_means is None else fit.z_means.tolist(),
        "null_windows": None if fit.null_windows is None else [
            [float(a), float(b) if np.isfinite(b) else "inf"] for a, b in fit.null_windows
        ],
        "n_rows": int(fit.n_rows),
        "notes": list(fit.notes),
    }


def fit_from_dict(d: dict) -> FunctionalCoxFit:
    """Rebuild a fit written by :func:`fit_to_dict`."""
    if d.get("format") != "fcox-model-1":
        raise ValueError("not an fcox model description")
    coef = np.asarray(d["coef"], float)
    result = FitResult(
        coef=coef,
        phi=coef,
        covariance=np.asarray(d["covariance"], float),
        lambdas=np.asarray(d["lambdas"], float),
        edf=d["edf"],
        edf_terms={},
        loglik=d["loglik"],
        penalized_loglik=d["penalized_loglik"],
        iterations=d["iterations"],
        score_norm=d["score_norm"],
        hessian=None,
    )
    windows = None if d["windows"] is None else np.array([float(v) for v in d["windows"]])
    return FunctionalCoxFit(
        route=d["route"],
        result=result,
        spec_u=_spec_from_dict(d["spec_u"]),
        spec_t=_spec_from_dict(d["spec_t"]),
        spec_scalar=_spec_from_dict(d["spec_scalar"]),
        grid=np.asarray(d["grid"], float),
        weights=np.asarray(d["weights"], float),
        n_scalar=d["n_scalar"],
        baselines=[CumulativeHazard(b["times"], b["jumps"]) for b in d["baselines"]],
        landmarks=_array_or_none(d["landmarks"]),
        windows=windows,
        z_means=_array_or_none(d["z_means"]),
        null_windows=None if d.get("null_windows") is None else np.array(
            [[float(a), float(b)] for a, b in d["null_windows"]]
        ),
        n_rows=d["n_rows"],
        notes=list(d["notes"]),
    )
