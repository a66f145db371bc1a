"""Survival data containers and likelihood kernels.

Two kernels evaluate the log likelihood, its gradient and the negative
Hessian in coefficient space for a :class:`~fcox.tensor.KroneckerDesign`:

* :class:`StratifiedCoxKernel` is the Breslow partial likelihood with a
  separate baseline per stratum, computed from sorted cumulative sums.
* :class:`ProfiledPoissonKernel` is the Poisson likelihood of an expanded
  data set with one free intercept per stratum, profiled out in closed form.

On a Poisson expansion of the same records the two agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fcox.tensor import KroneckerDesign, _segment_sums


@dataclass
class SurvivalData:
    """Right-censored survival records.

    Parameters
    ----------
    id : ndarray of int
        Subject identifiers, unique.
    time : ndarray of float
        Observed times ``min(T, C)``, positive.
    event : ndarray of int
        1 for an observed event, 0 for censoring.
    x : ndarray (n, p)
        Scalar covariates.
    """

    id: np.ndarray
    time: np.ndarray
    event: np.ndarray
    x: np.ndarray = None

    def __post_init__(self):
        self.id = np.asarray(self.id)
        self.time = np.asarray(self.time, dtype=float)
        self.event = np.asarray(self.event).astype(np.int64)
        n = self.time.size
        if self.x is None:
            self.x = np.zeros((n, 0))
        self.x = np.asarray(self.x, dtype=float).reshape(n, -1)
        if self.id.shape != (n,) or self.event.shape != (n,):
            raise ValueError("id, time and event must have equal length")
        if np.unique(self.id).size != n:
            raise ValueError("subject ids must be unique")
        if np.any(~np.isfinite(self.time)) or np.any(self.time <= 0):
            raise ValueError("observed times must be positive and finite")
        if np.any((self.event != 0) & (self.event != 1)):
            raise ValueError("event indicators must be 0 or 1")

    @property
    def n(self) -> int:
        return self.time.size

    def subset(self, mask) -> "SurvivalData":
        return SurvivalData(self.id[mask], self.time[mask], self.event[mask], self.x[mask])


@dataclass
class FunctionalPredictor:
    """Functional covariate observed on a common grid.

    Parameters
    ----------
    values : ndarray (n, J)
        Curve values, one row per subject.
    grid : ndarray (J,)
        Strictly increasing abscissae.
    weights : ndarray (J,)
        Quadrature weights; Riemann spacing by default.
    domain : tuple of float
        Interval carrying the functional basis.
    """

    values: np.ndarray
    grid: np.ndarray
    weights: np.ndarray = None
    domain: tuple = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.grid = np.asarray(self.grid, dtype=float)
        J = self.grid.size
        if self.values.shape[1] != J:
            raise ValueError("values must have one column per grid point")
        if J > 1 and np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(~np.isfinite(self.values)):
            raise ValueError("functional predictor contains missing values")
        if self.weights is None:
            self.weights = quadrature_weights(self.grid, "riemann")
        self.weights = np.asarray(self.weights, dtype=float)
        if self.domain is None:
            h = np.mean(np.diff(self.grid)) if J > 1 else 1.0
            self.domain = (float(self.grid[0] - h / 2), float(self.grid[-1] + h / 2))

    @classmethod
    def uniform(cls, values, J=None):
        """Curves on midpoints of ``J`` equal cells of ``[0, 1]``."""
        values = np.atleast_2d(np.asarray(values, float))
        J = values.shape[1] if J is None else J
        return cls(values, uniform_grid(J), np.full(J, 1.0 / J), (0.0, 1.0))


def uniform_grid(J: int) -> np.ndarray:
    """Midpoints ``(v - 0.5) / J`` of ``J`` equal cells of ``[0, 1]``."""
    return (np.arange(1, J + 1) - 0.5) / J


def quadrature_weights(grid, rule: str = "riemann") -> np.ndarray:
    """Quadrature weights on a grid.

    ``riemann`` uses the forward spacing, repeating the last spacing at the
    final point; ``trapezoid`` halves the end cells.
    """
    grid = np.asarray(grid, float)
    if grid.size == 1:
        return np.ones(1)
    d = np.diff(grid)
    if rule == "riemann":
        return np.append(d, d[-1])
    if rule == "trapezoid":
        w = np.zeros(grid.size)
        w[:-1] += d / 2
        w[1:] += d / 2
        return w
    raise ValueError(f"unknown quadrature rule {rule!r}")


def jitter_ties(time, event, ids, scale: float = 1e-9) -> np.ndarray:
    """Break ties among event times by small downward shifts.

    Within each set of tied event times, the subject with the smallest id
    keeps its time and the ``r``-th next is moved down by
    ``r * scale * max|time|``. Censored times are never moved.
    """
    time = np.asarray(time, float).copy()
    event = np.asarray(event).astype(bool)
    ids = np.asarray(ids)
    eps = scale * np.max(np.abs(time)) if time.size else 0.0
    ev = np.flatnonzero(event)
    order = ev[np.lexsort((ids[ev], time[ev]))]
    t = time[order]
    new_run = np.ones(t.size, bool)
    new_run[1:] = t[1:] != t[:-1]
    run_id = np.cumsum(new_run) - 1
    run_first = np.flatnonzero(new_run)
    rank = np.arange(t.size) - run_first[run_id]
    time[order] = t - rank * eps
    return time


def _starts_from_labels(labels: np.ndarray) -> np.ndarray:
    """Offsets of consecutive runs of equal labels."""
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    return np.concatenate([[0], change, [labels.size]]).astype(np.int64)


class StratifiedCoxKernel:
    """Breslow partial likelihood with stratum-specific baselines.

    Rows must be sorted by stratum and then by time, and strata must be
    nested within the design groups. The risk set of an event in stratum
    ``s`` at time ``t`` is every row of ``s`` with time at least ``t``.

    Parameters
    ----------
    time, event, strata : ndarray
        Row-level arrays in sorted order.
    """

    def __init__(self, time, event, strata):
        time = np.asarray(time, float)
        event = np.asarray(event).astype(float)
        strata = np.asarray(strata)
        n = time.size
        if n and np.any((strata[1:] < strata[:-1]) | ((strata[1:] == strata[:-1]) & (time[1:] < time[:-1]))):
            raise ValueError("rows must be sorted by stratum and time")
        self.time, self.event, self.strata = time, event, strata
        self.strata_starts = _starts_from_labels(strata) if n else np.array([0, 0])
        # tie groups: consecutive rows sharing stratum and time
        new = np.ones(n, bool)
        new[1:] = (strata[1:] != strata[:-1]) | (time[1:] != time[:-1])
        tie_id = np.cumsum(new) - 1
        tie_first = np.flatnonzero(new)
        tie_last = np.append(tie_first[1:], n) - 1
        self.row_tie_last = tie_last[tie_id]
        row_stratum_idx = np.repeat(np.arange(self.strata_starts.size - 1), np.diff(self.strata_starts))
        self.row_stratum_idx = row_stratum_idx
        self.row_stratum_first = self.strata_starts[:-1][row_stratum_idx]
        d_tie = np.bincount(tie_id, weights=event, minlength=tie_first.size)
        has = d_tie > 0
        self.ev_first = tie_first[has]
        self.ev_count = d_tie[has]
        self.ev_stratum = row_stratum_idx[self.ev_first]
        self.sum_event_rows = event.astype(bool)

    def _weights(self, eta):
        shift = np.maximum.reduceat(eta, self.strata_starts[:-1]) if eta.size else np.zeros(0)
        w = np.exp(eta - shift[self.row_stratum_idx])
        return w, shift

    def _risk_sums(self, w):
        """Reverse cumulative sums of ``w`` within strata."""
        R = np.empty_like(w)
        st = self.strata_starts
        for s in range(st.size - 1):
            a, b = st[s], st[s + 1]
            R[a:b] = np.cumsum(w[a:b][::-1])[::-1]
        return R

    def loglik(self, eta: np.ndarray) -> float:
        w, shift = self._weights(eta)
        S0 = self._risk_sums(w)[self.ev_first]
        return float(eta[self.sum_event_rows].sum() - np.sum(self.ev_count * (np.log(S0) + shift[self.ev_stratum])))

    def derivatives(self, eta: np.ndarray, design):
        """Log likelihood, gradient and negative Hessian in coefficient space."""
        w, shift = self._weights(eta)
        S0 = self._risk_sums(w)[self.ev_first]
        ll = float(eta[self.sum_event_rows].sum() - np.sum(self.ev_count * (np.log(S0) + shift[self.ev_stratum])))
        a = self.ev_count / S0
        A = np.zeros(eta.size)
        A[self.ev_first] = a
        C = np.cumsum(A)
        c = C[self.row_tie_last] - np.where(self.row_stratum_first > 0, C[self.row_stratum_first - 1], 0.0)
        wc = w * c
        grad = design.tdot(self.event - wc)
        # first moments of the features over each risk set
        F = design.features
        WF = w[:, None] * F
        st = self.strata_starts
        S1 = np.empty((self.ev_first.size, F.shape[1]))
        ev_strat_starts = np.searchsorted(self.ev_stratum, np.arange(st.size), side="left")
        for s in range(st.size - 1):
            e0, e1 = ev_strat_starts[s], ev_strat_starts[s + 1]
            if e1 == e0:
                continue
            lo, hi = st[s], st[s + 1]
            R = np.cumsum(WF[lo:hi][::-1], axis=0)[::-1]
            S1[e0:e1] = R[self.ev_first[e0:e1] - lo]
        means = S1 / S0[:, None]
        groups = design.row_group[self.ev_first]
        Hn = design.gram(wc) - design.outer_sum(means, groups, self.ev_count)
        return ll, grad, 0.5 * (Hn + Hn.T)

    def risk_totals(self, eta):
        """Event times, counts, strata and risk-set sums of ``exp(eta)``."""
        w, shift = self._weights(eta)
        S0 = self._risk_sums(w)[self.ev_first] * np.exp(shift[self.ev_stratum])
        return self.time[self.ev_first], self.ev_count, self.ev_stratum, S0


class ProfiledPoissonKernel:
    """Poisson likelihood with one free log-intercept per stratum.

    The intercepts are profiled out: ``alpha_s = log(y_s / sum_s exp(eta))``.
    The profiled value equals the full Poisson log likelihood at the
    profiled intercepts for 0/1 outcomes.

    Parameters
    ----------
    outcome : ndarray
        Counts, rows sorted by stratum.
    strata : ndarray
        Stratum labels, nondecreasing. Every stratum must have a positive
        outcome total.
    """

    def __init__(self, outcome, strata):
        y = np.asarray(outcome, float)
        strata = np.asarray(strata)
        if y.size and np.any(strata[1:] < strata[:-1]):
            raise ValueError("rows must be sorted by stratum")
        self.y = y
        self.strata_starts = _starts_from_labels(strata)
        self.row_stratum_idx = np.repeat(np.arange(self.strata_starts.size - 1), np.diff(self.strata_starts))
        self.y_s = np.add.reduceat(y, self.strata_starts[:-1])
        if np.any(self.y_s <= 0):
            raise ValueError("every stratum needs a positive outcome total")
        self.const = float(np.sum(self.y_s * np.log(self.y_s) - self.y_s))

    def _weights(self, eta):
        shift = np.maximum.reduceat(eta, self.strata_starts[:-1])
        w = np.exp(eta - shift[self.row_stratum_idx])
        S0 = np.add.reduceat(w, self.strata_starts[:-1])
        return w, shift, S0

    def loglik(self, eta: np.ndarray) -> float:
        w, shift, S0 = self._weights(eta)
        return float(self.y @ eta - self.y_s @ (np.log(S0) + shift) + self.const)

    def derivatives(self, eta: np.ndarray, design):
        w, shift, S0 = self._weights(eta)
        ll = float(self.y @ eta - self.y_s @ (np.log(S0) + shift) + self.const)
        mu = w * (self.y_s / S0)[self.row_stratum_idx]
        grad = design.tdot(self.y - mu)
        if np.array_equal(design.group_starts, self.strata_starts):
            q = design.group_sums(mu)
        else:
            q = _segment_sums(design.features * mu[:, None], self.strata_starts)
        groups = design.row_group[self.strata_starts[:-1]]
        Hn = design.gram(mu) - design.outer_sum(q, groups, 1.0 / self.y_s)
        return ll, grad, 0.5 * (Hn + Hn.T)

    def intercepts(self, eta: np.ndarray) -> np.ndarray:
        """Profiled log-intercepts ``alpha_s``."""
        w, shift, S0 = self._weights(eta)
        return np.log(self.y_s) - np.log(S0) - shift


def poisson_loglik(y, eta, alpha, strata_index) -> float:
    """Full Poisson log likelihood with explicit stratum intercepts (0/1 outcomes)."""
    mu_log = np.asarray(alpha)[strata_index] + eta
    return float(np.sum(y * mu_log - np.exp(mu_log)))


@dataclass
class PoissonExpansion:
    """Expanded data: one row per (event time, subject at risk).

    Attributes
    ----------
    subject : ndarray of int
        Index into the original records.
    stratum : ndarray of int
        Index of the distinct event time; rows are sorted by it.
    outcome : ndarray of int
        1 when the subject has its event at that time.
    event_times : ndarray
        Distinct event times, increasing.
    """

    subject: np.ndarray
    stratum: np.ndarray
    outcome: np.ndarray
    event_times: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.subject.size

    @property
    def stratum_starts(self) -> np.ndarray:
        return _starts_from_labels(self.stratum)


def poisson_expand(data: SurvivalData) -> PoissonExpansion:
    """Expand records into the Poisson form of the partial likelihood.

    For every distinct event time ``t_k`` a stratum is created holding all
    subjects with observed time at least ``t_k``; the outcome is 1 for the
    subjects failing at ``t_k``. Within a stratum subjects are ordered by
    observed time, ties by input order.
    """
    order = np.argsort(data.time, kind="stable")
    ys = data.time[order]
    ev_times = np.unique(data.time[data.event == 1])
    first = np.searchsorted(ys, ev_times, side="left")
    sizes = data.n - first
    total = int(sizes.sum())
    offs = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if sizes.size else np.zeros(0, np.int64)
    pos = np.arange(total) - np.repeat(offs, sizes) + np.repeat(first, sizes)
    subject = order[pos]
    stratum = np.repeat(np.arange(ev_times.size), sizes)
    outcome = ((data.event[subject] == 1) & (data.time[subject] == ev_times[stratum])).astype(np.int64)
    return PoissonExpansion(subject, stratum, outcome, ev_times)


@dataclass
class CumulativeHazard:
    """Right-continuous step function of a Breslow cumulative hazard.

    Attributes
    ----------
    times : ndarray
        Jump locations, increasing.
    jumps : ndarray
        Hazard increments at each jump.
    """

    times: np.ndarray
    jumps: np.ndarray
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.jumps = np.asarray(self.jumps, float)
        self.values = np.cumsum(self.jumps)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        k = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate([[0.0], self.values])
        return vals[k]


def nelson_aalen(kernel: StratifiedCoxKernel, eta: np.ndarray, n_strata: int = None):
    """Breslow cumulative baseline hazard for each stratum.

    Jumps are ``d_k / sum_{risk set} exp(eta)`` at each distinct event time.

    Returns
    -------
    list of CumulativeHazard
        One per stratum (empty for strata without events).
    """
    t, d, s, S0 = kernel.risk_totals(np.asarray(eta, float))
    n_strata = kernel.strata_starts.size - 1 if n_strata is None else n_strata
    out = []
    for k in range(n_strata):
        m = s == k
        out.append(CumulativeHazard(t[m], d[m] / S0[m]))
    return out


def cox_partial_loglik(eta, data: SurvivalData, strata=None, derivatives: bool = False, allow_ties: bool = False):
    """Partial log likelihood for a linear predictor per record.

    Parameters
    ----------
    eta : ndarray (n,)
    data : SurvivalData
    strata : ndarray, optional
        Stratum label per record; one stratum when omitted.
    derivatives : bool
        Also return the gradient and Hessian with respect to ``eta``. The
        Hessian is dense, so this is meant for small problems.
    allow_ties : bool
        Accept tied event times (Breslow handling). By default ties raise,
        since the equivalence with the Poisson expansion needs distinct
        event times.

    Returns
    -------
    float, or (float, ndarray (n,), ndarray (n, n))
    """
    eta = np.asarray(eta, float)
    if eta.shape != (data.n,) or not np.all(np.isfinite(eta)):
        raise ValueError("eta must be finite with one value per record")
    strata = np.zeros(data.n, np.int64) if strata is None else np.asarray(strata)
    if not allow_ties:
        key = np.stack([strata[data.event == 1].astype(float), data.time[data.event == 1]], axis=1)
        if np.unique(key, axis=0).shape[0] != key.shape[0]:
            raise ValueError("tied event times; break them with jitter_ties first")
    order = np.lexsort((data.time, strata))
    k = StratifiedCoxKernel(data.time[order], data.event[order], strata[order])
    if not derivatives:
        return k.loglik(eta[order])
    ll, g, Hn = k.derivatives(eta[order], KroneckerDesign.from_dense(np.eye(data.n)))
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return ll, g[inv], -Hn[np.ix_(inv, inv)]


def kaplan_meier(time, event):
    """Kaplan-Meier survival estimate at the distinct event times."""
    time = np.asarray(time, float)
    event = np.asarray(event).astype(bool)
    ut = np.unique(time[event])
    at_risk = time.size - np.searchsorted(np.sort(time), ut, side="left")
    d = np.bincount(np.searchsorted(ut, time[event]), minlength=ut.size)
    return ut, np.cumprod(1.0 - d / at_risk)
