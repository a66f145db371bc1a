"""Stacked landmark data sets.

For landmark times ``s_1 < ... < s_L`` with windows ``w_l``, subject ``i``
contributes one row at landmark ``l`` when still under observation
(``y_i > s_l``). The row carries the time ``min(y_i, s_l + w_l)``, an event
indicator that is 1 only for events inside ``(s_l, s_l + w_l]``, and the
functional predictor on its grid together with the landmark time and the
quadrature weights.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from fcox.survival import FunctionalPredictor, SurvivalData


@dataclass
class StackedLandmarkData:
    """Rows of a landmark data set, ordered by landmark then subject id.

    Attributes
    ----------
    id : ndarray
        Subject identifier of each row.
    subject : ndarray of int
        Index of the subject in the source records.
    time : ndarray
        Window-capped observed time.
    d : ndarray of int
        Event inside the window.
    landmark : ndarray of int
        Index of the landmark time.
    svec : ndarray
        Landmark time of each row.
    x : ndarray (n, p)
        Scalar covariates.
    umat, zmat, smat, lmat, zlmat : ndarray (n, J)
        Grid, curve values, landmark time, quadrature weights and the
        product ``zmat * lmat``. ``umat``, ``smat`` and ``lmat`` are
        read-only broadcast views.
    landmarks, windows : ndarray
        The landmark grid and windows that produced the rows.
    z_means : ndarray (L, J) or None
        Per-landmark means removed by :func:`center_by_landmark`.
    report : list of str
        Warnings raised while building.
    """

    id: np.ndarray
    subject: np.ndarray
    time: np.ndarray
    d: np.ndarray
    landmark: np.ndarray
    svec: np.ndarray
    x: np.ndarray
    zmat: np.ndarray
    grid: np.ndarray
    weights: np.ndarray
    landmarks: np.ndarray
    windows: np.ndarray
    z_means: np.ndarray = None
    report: list = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return self.time.size

    @property
    def umat(self):
        return np.broadcast_to(self.grid, self.zmat.shape)

    @property
    def lmat(self):
        return np.broadcast_to(self.weights, self.zmat.shape)

    @property
    def smat(self):
        return np.broadcast_to(self.svec[:, None], self.zmat.shape)

    @property
    def zlmat(self):
        return self.zmat * self.weights[None, :]

    @property
    def landmark_starts(self) -> np.ndarray:
        return np.searchsorted(self.landmark, np.arange(self.landmarks.size + 1), side="left")


def landmark_grid(start: float, stop: float, step: float) -> np.ndarray:
    """Evenly spaced landmark times from ``start`` to ``stop`` inclusive."""
    n = int(np.floor((stop - start) / step + 1e-6)) + 1
    return start + step * np.arange(n)


def partition_windows(landmarks) -> np.ndarray:
    """Windows that tile the time axis: ``w_l = s_{l+1} - s_l``, last one unbounded."""
    s = np.asarray(landmarks, float)
    return np.append(np.diff(s), np.inf)


def build_landmark_dataset(
    data: SurvivalData, Z: FunctionalPredictor, landmarks, windows, drop_empty: bool = True
) -> StackedLandmarkData:
    """Stack records over landmark times.

    Parameters
    ----------
    data : SurvivalData
    Z : FunctionalPredictor
        One curve per record, in the same order.
    landmarks : array_like
        Strictly increasing landmark times.
    windows : float or array_like
        Prediction window per landmark, positive; ``inf`` for no cap.
    drop_empty : bool
        Drop landmarks with nobody at risk, recording a warning.

    Returns
    -------
    StackedLandmarkData
    """
    s = np.atleast_1d(np.asarray(landmarks, float))
    if s.size == 0 or np.any(np.diff(s) <= 0):
        raise ValueError("landmark times must be strictly increasing")
    w = np.broadcast_to(np.asarray(windows, float), s.shape).astype(float)
    if np.any(~(w > 0)):
        raise ValueError("windows must be positive")
    if Z.values.shape[0] != data.n:
        raise ValueError("one functional observation per record is required")
    report = []
    keep_l = []
    for l in range(s.size):
        if np.any(data.time > s[l]):
            keep_l.append(l)
        else:
            msg = f"landmark {float(s[l])!r} has an empty risk set and was dropped"
            if not drop_empty:
                raise ValueError(msg)
            report.append(msg)
            warnings.warn(msg)
    s, w = s[keep_l], w[keep_l]
    by_id = np.argsort(data.id, kind="stable")
    parts = []
    for l in range(s.size):
        rows = by_id[data.time[by_id] > s[l]]
        parts.append((l, rows))
    subject = np.concatenate([r for _, r in parts])
    landmark = np.concatenate([np.full(r.size, l) for l, r in parts])
    sv = s[landmark]
    end = sv + w[landmark]
    y = data.time[subject]
    time = np.minimum(y, end)
    d = ((data.event[subject] == 1) & (y <= end)).astype(np.int64)
    for l in range(s.size):
        if not np.any(d[landmark == l]):
            report.append(f"landmark {float(s[l])!r} has no events in its window")
    return StackedLandmarkData(
        id=data.id[subject],
        subject=subject,
        time=time,
        d=d,
        landmark=landmark,
        svec=sv,
        x=data.x[subject],
        zmat=Z.values[subject].copy(),
        grid=Z.grid,
        weights=Z.weights,
        landmarks=s,
        windows=w,
        report=report,
    )


def center_by_landmark(stacked: StackedLandmarkData) -> StackedLandmarkData:
    """Subtract the landmark-wise mean curve from every row.

    The stratified partial likelihood is unchanged, since the shift is
    constant within each landmark stratum; the centering makes the
    functional term sum to zero over the subjects at risk.
    """
    st = stacked.landmark_starts
    z = stacked.zmat.copy()
    means = np.zeros((stacked.landmarks.size, z.shape[1]))
    for l in range(stacked.landmarks.size):
        a, b = st[l], st[l + 1]
        if b > a:
            means[l] = z[a:b].mean(axis=0)
            z[a:b] -= means[l]
    out = StackedLandmarkData(**{**stacked.__dict__, "zmat": z, "z_means": means, "report": list(stacked.report)})
    return out


def two_subject_example():
    """The two-subject illustration of a stacked landmark data set.

    Subjects die at 4.5 and 3.5 with scalar covariates 7 and 4. Curves are
    observed at ``u = 0, 2, 4, 6`` with Riemann multiplier 2, and landmarks
    ``0, 1, 2, 3, 4`` carry unit windows.

    Returns
    -------
    data : SurvivalData
    Z : FunctionalPredictor
    landmarks, windows : ndarray
    """
    data = SurvivalData(id=np.array([1, 2]), time=np.array([4.5, 3.5]), event=np.array([1, 1]),
                        x=np.array([[7.0], [4.0]]))
    Z = FunctionalPredictor(
        values=np.array([[1.0, 0.3, 0.7, 1.1], [1.2, 0.2, 0.6, 1.5]]),
        grid=np.array([0.0, 2.0, 4.0, 6.0]),
        weights=np.full(4, 2.0),
        domain=(0.0, 6.0),
    )
    landmarks = np.arange(5.0)
    return data, Z, landmarks, np.ones(5)
