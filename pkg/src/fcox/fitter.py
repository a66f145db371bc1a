"""Penalized Newton fitting and marginal-likelihood smoothing selection.

The objective is ``l(theta) - 0.5 * theta' S_lambda theta`` with
``S_lambda = sum_j lambda_j S_j``. Smoothing parameters maximize the Laplace
approximate restricted likelihood

    V = l(theta_hat) - 0.5 theta_hat' S theta_hat
        + 0.5 log|S|_+ - 0.5 log|H + S|

where ``H`` is the negative Hessian of ``l`` and ``|S|_+`` the product of the
positive eigenvalues of ``S``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


class NonConvergence(RuntimeError):
    """Newton iterations failed to converge.

    Attributes
    ----------
    trace : list of dict
        One entry per iteration with the objective and score norm.
    """

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class SingularHessianError(RuntimeError):
    """The penalized Hessian is not positive definite.

    Attributes
    ----------
    direction : ndarray
        Unit coefficient vector along the smallest eigenvalue.
    """

    def __init__(self, message, direction):
        super().__init__(message)
        self.direction = direction


@dataclass
class PenalizedProblem:
    """A likelihood kernel, a design and a set of penalties.

    Parameters
    ----------
    kernel : object
        Provides ``loglik(eta)`` and ``derivatives(eta, design)``.
    design : KroneckerDesign
        Design in the original coefficients.
    penalties : list of (ndarray, int)
        Penalty matrices in the fitted coefficients with the index of the
        smoothing parameter multiplying each one.
    transform : ndarray, optional
        Columns mapping fitted coefficients ``phi`` to ``theta = T phi``.
    terms : dict, optional
        Names of coefficient groups mapped to slices of ``theta``, used for
        per-term effective degrees of freedom.
    """

    kernel: object
    design: object
    penalties: list = field(default_factory=list)
    transform: np.ndarray = None
    terms: dict = None
    n_evals: int = 0

    def __post_init__(self):
        p = self.design.n_cols if self.transform is None else self.transform.shape[1]
        for P, j in self.penalties:
            if P.shape != (p, p):
                raise ValueError("penalty shape does not match the coefficients")
        self._diag = None
        self._roots = []
        for P, j in self.penalties:
            vals, vecs = np.linalg.eigh(0.5 * (P + P.T))
            keep = vals > 1e-13 * max(vals.max(), 0.0)
            self._roots.append((np.sqrt(vals[keep])[:, None] * vecs[:, keep].T, j))

    def penalty_quadratic(self, phi, lambdas) -> float:
        """``phi' S_lambda phi`` as a sum of squares, free of cancellation."""
        return float(sum(lambdas[j] * np.sum((R @ phi) ** 2) for R, j in self._roots))

    def penalty_gradient(self, phi, lambdas) -> np.ndarray:
        """``S_lambda @ phi`` from the square-root factors."""
        out = np.zeros(self.n_coef)
        for R, j in self._roots:
            out += lambdas[j] * (R.T @ (R @ phi))
        return out

    @property
    def n_coef(self) -> int:
        return self.design.n_cols if self.transform is None else self.transform.shape[1]

    @property
    def n_lambda(self) -> int:
        return 1 + max((j for _, j in self.penalties), default=-1)

    def theta(self, phi):
        return phi if self.transform is None else self.transform @ phi

    def loglik(self, phi) -> float:
        self.n_evals += 1
        return self.kernel.loglik(self.design.dot(self.theta(phi)))

    def derivatives(self, phi):
        self.n_evals += 1
        ll, g, Hn = self.kernel.derivatives(self.design.dot(self.theta(phi)), self.design)
        if self.transform is not None:
            T = self.transform
            g, Hn = T.T @ g, T.T @ Hn @ T
        return ll, g, Hn

    def penalty_matrix(self, lambdas) -> np.ndarray:
        lambdas = np.asarray(lambdas, float)
        S = np.zeros((self.n_coef, self.n_coef))
        for P, j in self.penalties:
            S += lambdas[j] * P
        return S

    def _penalty_diagonalization(self):
        """Common eigenbasis of the penalties when they commute."""
        if self._diag is not None:
            return self._diag
        mats = [np.zeros((self.n_coef, self.n_coef)) for _ in range(self.n_lambda)]
        for P, j in self.penalties:
            mats[j] += P
        mats = [M / max(np.abs(M).max(), 1e-300) for M in mats]
        commute = all(
            np.abs(A @ B - B @ A).max() <= 1e-10 for i, A in enumerate(mats) for B in mats[i + 1 :]
        )
        if commute and mats:
            combo = sum(M * (1.0 + 0.618 * i + 0.1 * i * i) for i, M in enumerate(mats))
            _, Q = np.linalg.eigh(combo)
            D = np.array([np.einsum("ij,ij->j", Q, M @ Q) for M in mats])
            D[D < 1e-11] = 0.0
            keep = D.sum(axis=0) > 0
            self._diag = ("diag", D[:, keep])
        else:
            total = sum(mats) if mats else np.zeros((self.n_coef, self.n_coef))
            vals = np.linalg.eigvalsh(total)
            rank = int(np.sum(vals > 1e-11 * max(vals.max(), 1e-300))) if vals.size else 0
            self._diag = ("eig", rank)
        return self._diag

    def log_det_penalty(self, lambdas) -> float:
        """``log|S_lambda|_+`` on the range of the penalties."""
        if not self.penalties:
            return 0.0
        kind, info = self._penalty_diagonalization()
        lambdas = np.asarray(lambdas, float)
        scales = [max(np.abs(sum(P for P, k in self.penalties if k == j)).max(), 1e-300) for j in range(self.n_lambda)]
        if kind == "diag":
            ev = (lambdas * np.asarray(scales)) @ info
            with np.errstate(divide="ignore"):
                return float(np.sum(np.log(ev)))
        vals = np.sort(np.linalg.eigvalsh(self.penalty_matrix(lambdas)))[::-1]
        return float(np.sum(np.log(vals[:info])))


@dataclass
class FitResult:
    """Result of a penalized fit.

    Attributes
    ----------
    coef : ndarray
        Coefficients in the original parameterization, ``theta = T phi``.
    phi : ndarray
        Fitted coefficients in the constrained parameterization.
    covariance : ndarray
        Bayesian posterior covariance of ``theta``, ``T (H + S)^-1 T'``.
    lambdas : ndarray
        Smoothing parameters.
    edf : float
        Total effective degrees of freedom, ``tr((H + S)^-1 H)``.
    edf_terms : dict
        Effective degrees of freedom per named term.
    loglik, penalized_loglik : float
    iterations : int
    score_norm : float
        Norm of the penalized score at the solution.
    hessian : ndarray
        Negative log-likelihood Hessian in ``phi``.
    criterion : float
        Restricted likelihood criterion at the solution.
    trace : list of dict
    """

    coef: np.ndarray
    phi: np.ndarray
    covariance: np.ndarray
    lambdas: np.ndarray
    edf: float
    edf_terms: dict
    loglik: float
    penalized_loglik: float
    iterations: int
    score_norm: float
    hessian: np.ndarray
    criterion: float = float("nan")
    trace: list = field(default_factory=list)


def _chol(A, problem=None):
    try:
        return cho_factor(A, lower=True)
    except LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (A + A.T))
        d = vecs[:, 0]
        big = np.argsort(-np.abs(d))[:3]
        raise SingularHessianError(
            f"penalized Hessian is singular (smallest eigenvalue {vals[0]:.3g}); "
            f"null direction loads on coefficients {big.tolist()}",
            d,
        ) from None


def newton_fit(problem: PenalizedProblem, lambdas, start=None, max_iter: int = 200, tol: float = 1e-8) -> FitResult:
    """Maximize the penalized log likelihood by damped Newton steps.

    Parameters
    ----------
    problem : PenalizedProblem
    lambdas : array_like
        Smoothing parameters, one per penalty index.
    start : ndarray, optional
        Starting value for ``phi``; zero by default.
    max_iter : int
    tol : float
        Convergence when ``|score| < tol * (1 + |objective|)``.

    Returns
    -------
    FitResult

    Raises
    ------
    NonConvergence
        When the iteration limit is reached.
    SingularHessianError
        When ``H + S`` is not positive definite.
    """
    lambdas = np.asarray(lambdas, float)
    if np.any(lambdas < 0):
        raise ValueError("smoothing parameters must be nonnegative")
    S = problem.penalty_matrix(lambdas)
    phi = np.zeros(problem.n_coef) if start is None else np.array(start, float)
    ll, g, Hn = problem.derivatives(phi)
    pq = problem.penalty_quadratic
    obj = ll - 0.5 * pq(phi, lambdas)
    if not np.isfinite(obj):
        phi = np.zeros(problem.n_coef)
        ll, g, Hn = problem.derivatives(phi)
        obj = ll - 0.5 * pq(phi, lambdas)
    trace = []
    it = 0
    converged = False
    tiny = False
    while it < max_iter:
        score = g - problem.penalty_gradient(phi, lambdas)
        snorm = float(np.linalg.norm(score))
        trace.append({"iteration": it, "objective": obj, "score_norm": snorm})
        if snorm < tol * (1.0 + abs(obj)):
            converged = True
            break
        cf = _chol(Hn + S)
        step = cho_solve(cf, score)
        # Newton decrement below rounding of the objective: the line search
        # cannot tell steps apart, so take the full step and stop if it recurs
        if score @ step < 1e-13 * (1.0 + abs(obj)):
            if tiny:
                converged = True
                break
            tiny = True
            phi = phi + step
            ll, g, Hn = problem.derivatives(phi)
            obj = ll - 0.5 * pq(phi, lambdas)
            it += 1
            continue
        tiny = False
        t = 1.0
        new = phi + step
        ll_n, g_n, Hn_n = problem.derivatives(new)
        obj_n = ll_n - 0.5 * pq(new, lambdas)
        while not (np.isfinite(obj_n) and obj_n >= obj):
            t *= 0.5
            if t < 1e-9:
                break
            new = phi + t * step
            obj_n = problem.loglik(new) - 0.5 * pq(new, lambdas)
            if np.isfinite(obj_n) and obj_n >= obj:
                ll_n, g_n, Hn_n = problem.derivatives(new)
                obj_n = ll_n - 0.5 * pq(new, lambdas)
        it += 1
        if t < 1e-9:
            # no ascent possible; accept when the score is at rounding level
            if snorm < 1e-5 * (1.0 + abs(obj)):
                converged = True
                break
            raise NonConvergence(f"step halving failed at iteration {it}", trace)
        phi, ll, g, Hn, obj = new, ll_n, g_n, Hn_n, obj_n
    if not converged:
        raise NonConvergence(f"no convergence in {max_iter} iterations", trace)
    return _finish(problem, phi, lambdas, S, ll, g, Hn, obj, it, trace)


def _finish(problem, phi, lambdas, S, ll, g, Hn, obj, it, trace):
    cf = _chol(Hn + S)
    cov_phi = cho_solve(cf, np.eye(problem.n_coef))
    cov_phi = 0.5 * (cov_phi + cov_phi.T)
    F = cov_phi @ Hn
    T = problem.transform
    theta = problem.theta(phi)
    cov = cov_phi if T is None else T @ cov_phi @ T.T
    edf_terms = {}
    if problem.terms:
        # edf in the original coordinates: diag of T F T^+ restricted to the term
        Fth = F if T is None else T @ F @ T.T
        for name, sl in problem.terms.items():
            edf_terms[name] = float(np.trace(Fth[sl, sl]))
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    crit = obj + 0.5 * problem.log_det_penalty(lambdas) - 0.5 * logdet
    return FitResult(
        coef=theta,
        phi=phi,
        covariance=cov,
        lambdas=np.asarray(lambdas, float),
        edf=float(np.trace(F)),
        edf_terms=edf_terms,
        loglik=float(ll),
        penalized_loglik=float(obj),
        iterations=it,
        score_norm=float(np.linalg.norm(g - problem.penalty_gradient(phi, lambdas))),
        hessian=Hn,
        criterion=float(crit),
        trace=trace,
    )


def reml_criterion(problem: PenalizedProblem, log10_lambdas, start=None):
    """Restricted likelihood criterion at ``10 ** log10_lambdas``.

    Returns
    -------
    (float, FitResult)
    """
    lam = 10.0 ** np.asarray(log10_lambdas, float)
    fit = newton_fit(problem, lam, start=start)
    return fit.criterion, fit


def _golden_max(f, lo, hi, tol):
    """Golden-section maximization of a scalar function on ``[lo, hi]``."""
    a, b = lo, hi
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def select_smoothing(
    problem: PenalizedProblem,
    bounds=(-6.0, 8.0),
    sweeps: int = 2,
    tol: float = 0.05,
    start=None,
    polish: bool = True,
):
    """Choose smoothing parameters by maximizing the restricted likelihood.

    Coordinate-wise golden-section search over ``log10(lambda)`` within
    ``bounds``, repeated for ``sweeps`` passes, followed by one Newton step
    on finite-difference derivatives of the criterion when it improves.

    Returns
    -------
    FitResult
        Fit at the selected smoothing parameters, with ``criterion`` set.
    """
    m = problem.n_lambda
    if m == 0:
        return newton_fit(problem, np.zeros(0), start=start)
    lo, hi = float(bounds[0]), float(bounds[1])
    rho = np.zeros(m)
    cache = {}
    state = {"best": -np.inf, "fit": None, "warm": start}

    def crit(r):
        r = np.clip(np.asarray(r, float), lo, hi)
        key = tuple(np.round(r, 10))
        if key in cache:
            return cache[key]
        try:
            v, fit = reml_criterion(problem, r, start=state["warm"])
        except (NonConvergence, SingularHessianError):
            v, fit = -np.inf, None
        if not np.isfinite(v):
            v = -np.inf
        cache[key] = v
        if fit is not None:
            state["warm"] = fit.phi
            if v > state["best"]:
                state["best"], state["fit"], state["rho"] = v, fit, r.copy()
        return v

    crit(rho)
    for _ in range(sweeps):
        for j in range(m):
            def f1(x, j=j):
                r = rho.copy()
                r[j] = x
                return crit(r)

            x, _ = _golden_max(f1, lo, hi, tol)
            rho = state.get("rho", rho).copy()
    if state["fit"] is None:
        raise NonConvergence("criterion is not finite at any probed smoothing parameter", [])
    if polish:
        _newton_polish(crit, state, lo, hi, h=0.1)
    return state["fit"]


def _newton_polish(crit, state, lo, hi, h):
    rho = state["rho"].copy()
    m = rho.size
    f0 = state["best"]
    grad = np.zeros(m)
    hess = np.zeros((m, m))
    E = np.eye(m) * h
    fp = [crit(rho + E[j]) for j in range(m)]
    fm = [crit(rho - E[j]) for j in range(m)]
    for j in range(m):
        grad[j] = (fp[j] - fm[j]) / (2 * h)
        hess[j, j] = (fp[j] - 2 * f0 + fm[j]) / h**2
        for k in range(j):
            v = (crit(rho + E[j] + E[k]) - fp[j] - fp[k] + f0) / h**2
            hess[j, k] = hess[k, j] = v
    # skip coordinates pinned at a bound
    free = (rho > lo + h) & (rho < hi - h)
    if not np.all(np.isfinite(grad)) or not np.all(np.isfinite(hess)) or not free.any():
        return
    Hf = hess[np.ix_(free, free)]
    try:
        if np.linalg.eigvalsh(Hf).max() >= 0:
            return
        step = np.zeros(m)
        step[free] = -np.linalg.solve(Hf, grad[free])
    except np.linalg.LinAlgError:
        return
    step = np.clip(step, -1.0, 1.0)
    crit(rho + step)
