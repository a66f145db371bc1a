"""Shared data generators for the test suite."""

import numpy as np

from fcox.simulate import simulate_curves, simulate_event_times
from fcox.survival import FunctionalPredictor, SurvivalData, jitter_ties

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def simulated_records(n, gamma, rng, J=20, p=0, beta=None, noise_sd=0.0, censor_mean=1.0):
    """Curves, event and censoring times under the simulation mechanism.

    Scalar covariates, when requested, enter the hazard as ``x @ beta`` by
    rescaling the constant baseline per subject.
    """
    z_true, z_obs, _ = simulate_curves(n, J, rng, noise_sd=noise_sd)
    x = rng.normal(size=(n, p))
    if p:
        shift = x @ np.asarray(beta, float)
        T = np.array([simulate_event_times(z_true[i:i + 1], gamma, rng, baseline_hazard=np.exp(shift[i]))[0]
                      for i in range(n)])
    else:
        T = simulate_event_times(z_true, gamma, rng)
    C = np.minimum(1.0, rng.exponential(censor_mean, n))
    y = np.minimum(T, C)
    d = (T <= C).astype(int)
    ids = np.arange(1, n + 1)
    data = SurvivalData(ids, jitter_ties(y, d, ids), d, x)
    return data, FunctionalPredictor.uniform(z_obs)


def write_functional_csv(path, data, Z, names=()):
    """Write records in the wide layout read by the command line."""
    J = Z.grid.size
    with open(path, "w") as fh:
        fh.write(",".join(["id", "time", "delta", *names] + [f"z_{j + 1:04d}" for j in range(J)]) + "\n")
        for i in range(data.n):
            vals = [str(data.id[i]), repr(float(data.time[i])), str(int(data.event[i]))]
            vals += [repr(float(v)) for v in data.x[i]] + [repr(float(v)) for v in Z.values[i]]
            fh.write(",".join(vals) + "\n")
