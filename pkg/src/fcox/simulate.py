"""Simulation of survival data with a time-varying functional effect.

Curves are ``Z_i(u) = sum_k b_ik phi_k(u)`` with ``phi_k`` cubic B-splines
and correlated normal scores, observed with white noise on a grid. The log
hazard is ``log h0 + int Z_i(u) gamma(u, t) du``; the cumulative hazard is
accumulated by left Riemann sums on a regular time grid and the event time
is the first grid point where survival drops below a uniform draw.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import asdict, dataclass

import numpy as np

from fcox.landmark import landmark_grid
from fcox.models import fit_landmark_route, fit_poisson_route
from fcox.predict import Z_975, eval_surface
from fcox.spline_basis import evaluate_basis, make_basis
from fcox.survival import FunctionalPredictor, SurvivalData, jitter_ties, uniform_grid

TRUE_SURFACES = {
    "f1": lambda u, t: np.sin(2 * np.pi * u) / (t + 0.5),
    "f2": lambda u, t: np.sin(2 * np.pi * u) / (t / 2 + 1),
    "f3": lambda u, t: 10 * np.cos(4 * np.pi * (t - u)),
    "f4": lambda u, t: np.cos(2 * np.pi * (t**3 - 2 / (u**2 + 1))),
}

METHODS = ("landmark_0.04", "landmark_inf", "poisson")


def gamma_true(name: str, u, t) -> np.ndarray:
    """Evaluate one of the named true surfaces."""
    if name not in TRUE_SURFACES:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(TRUE_SURFACES)}")
    return TRUE_SURFACES[name](np.asarray(u, float), np.asarray(t, float))


def amse(estimates, truth) -> float:
    """Mean over replications of the grid-average squared error.

    Parameters
    ----------
    estimates : sequence of ndarray
        One surface per replication on the grid of ``truth``.
    truth : ndarray
    """
    truth = np.asarray(truth, float)
    errs = []
    for est in estimates:
        est = np.asarray(est, float)
        if est.shape != truth.shape:
            raise ValueError(f"estimate on a {est.shape} grid, truth on {truth.shape}")
        errs.append(np.mean((est - truth) ** 2))
    return float(np.mean(errs))


def coverage(estimates, ses, truth, z: float = Z_975):
    """Pointwise and grid-average coverage of Wald intervals.

    Returns
    -------
    (ndarray, float)
        Fraction of replications whose interval contains the truth at each
        grid point, and its grid average.
    """
    truth = np.asarray(truth, float)
    if ses is None or any(s is None for s in ses):
        raise ValueError("standard errors are required for coverage")
    hits = []
    for est, se in zip(estimates, ses):
        est, se = np.asarray(est, float), np.asarray(se, float)
        if est.shape != truth.shape or se.shape != truth.shape:
            raise ValueError("estimate, standard error and truth grids differ")
        with np.errstate(invalid="ignore"):
            hits.append(np.abs(est - truth) <= z * se)
    cmap = np.mean(hits, axis=0)
    return cmap, float(cmap.mean())


@dataclass(frozen=True)
class SimulationConfig:
    """Settings of a simulation study.

    Parameters
    ----------
    scenario : str
        Key of :data:`TRUE_SURFACES`.
    n : int
        Subjects per replication.
    J : int
        Grid points of the functional predictor.
    replications : int
    seed : int
        Master seed; replication ``b`` uses ``SeedSequence([seed, b])``.
    n_time : int
        Cells of the time grid on ``[0, 1]``.
    k_u, k_t : int
        Basis dimensions of the fitted surface.
    landmark_step : float
        Spacing of the landmark times from 0; the finite window equals it.
    methods : tuple of str
        Subset of :data:`METHODS`.
    noise_sd : float
        Measurement error of the observed curves.
    score_var, score_corr : float
        Variance and common correlation of the basis scores.
    n_curve_basis : int
        Number of cubic B-splines generating the curves.
    baseline_hazard : float
        Constant baseline hazard.
    pred_points : int
        Points per axis of the evaluation grid on ``[0, 1]^2``.
    """

    scenario: str = "f1"
    n: int = 500
    J: int = 100
    replications: int = 1
    seed: int = 1
    n_time: int = 100
    k_u: int = 5
    k_t: int = 5
    landmark_step: float = 0.04
    methods: tuple = METHODS
    noise_sd: float = 0.25
    score_var: float = 4.0
    score_corr: float = 0.3
    n_curve_basis: int = 10
    baseline_hazard: float = 1.0
    pred_points: int = 101

    def __post_init__(self):
        if self.scenario not in TRUE_SURFACES:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.n < 2 or self.J < 2 or self.replications < 1 or self.n_time < 1:
            raise ValueError("n, J, replications and n_time must be positive")
        if not set(self.methods) <= set(METHODS):
            raise ValueError(f"methods must be drawn from {METHODS}")
        if not (self.noise_sd >= 0 and self.score_var > 0 and -1 < self.score_corr < 1):
            raise ValueError("invalid noise or score settings")


@dataclass
class SimulatedData:
    """One simulated data set.

    Attributes
    ----------
    data : SurvivalData
        Observed records after tie-breaking.
    Z : FunctionalPredictor
        Noisy curves as observed.
    z_true : ndarray (n, J)
        Noise-free curves.
    event_time : ndarray
        Latent event times, ``inf`` when no event by the end of the grid.
    censor_time : ndarray
    """

    data: SurvivalData
    Z: FunctionalPredictor
    z_true: np.ndarray
    event_time: np.ndarray
    censor_time: np.ndarray


def replication_rng(seed: int, b: int) -> np.random.Generator:
    """Independent generator for replication ``b`` of a study seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(b)]))


def score_covariance(k: int, var: float, corr: float) -> np.ndarray:
    """Exchangeable covariance of the curve scores."""
    return var * ((1 - corr) * np.eye(k) + corr * np.ones((k, k)))


def simulate_curves(n, J, rng, n_basis=10, var=4.0, corr=0.3, noise_sd=0.25):
    """Smooth random curves on the midpoint grid and their noisy observations.

    Returns
    -------
    (ndarray, ndarray, ndarray)
        True curves, observed curves (both ``(n, J)``) and the scores.
    """
    L = np.linalg.cholesky(score_covariance(n_basis, var, corr))
    b = rng.standard_normal((n, n_basis)) @ L.T
    phi = evaluate_basis(make_basis("bspline_cubic", n_basis), uniform_grid(J))
    z_true = b @ phi.T
    z_obs = z_true + noise_sd * rng.standard_normal((n, J))
    return z_true, z_obs, b


def simulate_event_times(z_true, gamma, rng, n_time=100, baseline_hazard=1.0, uniforms=None):
    """Discrete-grid event times under a time-varying functional effect.

    Parameters
    ----------
    z_true : ndarray (n, J)
        Curves on the midpoint grid of ``[0, 1]``.
    gamma : callable
        ``gamma(u, t)`` broadcasting over arrays.
    rng : Generator
    n_time : int
        Cells of the time grid ``t_m = m / n_time``.
    baseline_hazard : float or callable
    uniforms : ndarray, optional
        Preset uniform draws, mainly for testing.

    Returns
    -------
    ndarray
        Event times on the grid, ``inf`` when survival stays above the draw.
    """
    n, J = z_true.shape
    u = uniform_grid(J)
    t = np.arange(n_time) / n_time
    G = gamma(u[:, None], t[None, :])
    eta = (z_true / J) @ G
    h0 = baseline_hazard(t) if callable(baseline_hazard) else np.full(n_time, float(baseline_hazard))
    cumhaz = np.cumsum(np.exp(eta) * h0[None, :] / n_time, axis=1)
    surv = np.exp(-cumhaz)
    U = rng.uniform(size=n) if uniforms is None else np.asarray(uniforms, float)
    hit = surv <= U[:, None]
    first = np.argmax(hit, axis=1)
    return np.where(hit.any(axis=1), (first + 1) / n_time, np.inf)


def generate_dataset(config: SimulationConfig, rng: np.random.Generator) -> SimulatedData:
    """Draw curves, event and censoring times for one replication."""
    z_true, z_obs, _ = simulate_curves(
        config.n, config.J, rng, config.n_curve_basis, config.score_var, config.score_corr, config.noise_sd
    )
    T = simulate_event_times(z_true, TRUE_SURFACES[config.scenario], rng, config.n_time, config.baseline_hazard)
    C = np.minimum(1.0, rng.exponential(1.0, size=config.n))
    y = np.minimum(T, C)
    delta = (T <= C).astype(np.int64)
    ids = np.arange(1, config.n + 1)
    y = jitter_ties(y, delta, ids)
    data = SurvivalData(ids, y, delta)
    return SimulatedData(data, FunctionalPredictor.uniform(z_obs), z_true, T, C)


@dataclass
class StudyReport:
    """Outcome of a simulation study.

    Attributes
    ----------
    config : SimulationConfig
    ise : dict
        Method name to per-replication integrated squared errors (``nan``
        for failed fits).
    amse : dict
        Method name to the mean over successful replications.
    coverage : list of float
        Per-replication grid-average coverage of the Poisson-route bands.
    coverage_map : ndarray or None
        Pointwise coverage averaged over replications.
    failures : dict
        Method name to a list of ``(replication, message)``.
    rows : dict
        Method name to per-replication row counts.
    seconds : dict
        Method name to per-replication wall times.
    phases : dict
        Method name to per-replication ``(expansion, fit)`` seconds.
    """

    config: SimulationConfig
    ise: dict
    amse: dict
    coverage: list
    coverage_map: np.ndarray
    failures: dict
    rows: dict
    seconds: dict
    phases: dict = None

    @property
    def mean_coverage(self) -> float:
        return float(np.mean(self.coverage)) if self.coverage else float("nan")

    def coverage_deviation(self, nominal: float = 0.95):
        """Mean and maximum absolute gap between pointwise coverage and ``nominal``."""
        if self.coverage_map is None:
            return float("nan"), float("nan")
        gap = np.abs(self.coverage_map - nominal)
        return float(gap.mean()), float(gap.max())

    def to_text(self) -> str:
        """Plain-text report; timing lines start with ``#``."""
        out = ["# fcox simulation report"]
        for k, v in asdict(self.config).items():
            out.append(f"config.{k} = {_fmt(v)}")
        for m in self.config.methods:
            out.append(f"amse.{m} = {_fmt(self.amse[m])}")
            out.append(f"failures.{m} = {len(self.failures[m])}")
        if "poisson" in self.config.methods:
            out.append(f"coverage.mean = {_fmt(self.mean_coverage)}")
            dev_mean, dev_max = self.coverage_deviation()
            out.append(f"coverage.mean_abs_deviation = {_fmt(dev_mean)}")
            out.append(f"coverage.max_abs_deviation = {_fmt(dev_max)}")
        out.append("replication,method,ise,rows")
        for b in range(self.config.replications):
            for m in self.config.methods:
                out.append(f"{b},{m},{_fmt(self.ise[m][b])},{self.rows[m][b]}")
        for m in self.config.methods:
            s = self.seconds[m]
            out.append(f"# seconds.{m} = " + ",".join(_fmt(v) for v in s))
            if self.phases is not None:
                out.append(f"# expansion_seconds.{m} = " + ",".join(_fmt(e) for e, _ in self.phases[m]))
                out.append(f"# fit_seconds.{m} = " + ",".join(_fmt(f) for _, f in self.phases[m]))
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def fit_method(method: str, sim: SimulatedData, config: SimulationConfig):
    """Fit one method to a simulated data set, returning the fit and wall time."""
    t0 = _time.perf_counter()
    if method == "poisson":
        fit = fit_poisson_route(sim.data, sim.Z, k_u=config.k_u, k_t=config.k_t, time_domain=(0.0, 1.0))
    else:
        s = landmark_grid(0.0, 1.0 - config.landmark_step, config.landmark_step)
        w = np.full(s.size, config.landmark_step) if method == "landmark_0.04" else np.inf
        fit = fit_landmark_route(sim.data, sim.Z, s, w, k_u=config.k_u, k_t=config.k_t, time_domain=(0.0, 1.0))
    return fit, _time.perf_counter() - t0


def run_study(config: SimulationConfig, progress=None, surface_sink=None) -> StudyReport:
    """Run all replications and methods of a study.

    Failed fits are recorded and the study continues.

    Parameters
    ----------
    config : SimulationConfig
    progress : callable, optional
        Called as ``progress(b, {method: ise})`` after each replication.
    surface_sink : callable, optional
        Called as ``surface_sink(b, method, grid, estimate, se)`` for every
        successful fit; ``se`` is None for the landmark methods.
    """
    grid = np.linspace(0.0, 1.0, config.pred_points)
    truth = gamma_true(config.scenario, grid[:, None], grid[None, :])
    B = config.replications
    ise = {m: [math.nan] * B for m in config.methods}
    rows = {m: [0] * B for m in config.methods}
    seconds = {m: [math.nan] * B for m in config.methods}
    phases = {m: [(math.nan, math.nan)] * B for m in config.methods}
    failures = {m: [] for m in config.methods}
    cover = []
    cov_sum = np.zeros_like(truth)
    for b in range(B):
        sim = generate_dataset(config, replication_rng(config.seed, b))
        for m in config.methods:
            try:
                fit, secs = fit_method(m, sim, config)
            except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
                failures[m].append((b, f"{type(exc).__name__}: {exc}"))
                continue
            seconds[m][b] = secs
            phases[m][b] = (fit.expansion_seconds, fit.fit_seconds)
            rows[m][b] = fit.n_rows
            if m == "poisson":
                est, se = eval_surface(fit.surface(), grid, grid)
                hit, avg = coverage([est], [se], truth)
                cover.append(avg)
                cov_sum += hit
            else:
                est, se = eval_surface(fit.surface(), grid, grid, se=False), None
            if surface_sink is not None:
                surface_sink(b, m, grid, est, se)
            ise[m][b] = amse([est], truth)
        if progress is not None:
            progress(b, {m: ise[m][b] for m in config.methods})
    summary = {m: float(np.nanmean(ise[m])) if np.any(np.isfinite(ise[m])) else math.nan for m in config.methods}
    cov_map = cov_sum / len(cover) if cover else None
    return StudyReport(config, ise, summary, cover, cov_map, failures, rows, seconds, phases)
