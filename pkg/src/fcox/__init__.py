"""Time-varying functional Cox models fitted by penalized splines.

Two routes are provided for the same coefficient surface: a Poisson
expansion of the full partial likelihood and a stacked landmark
approximation with a stratified baseline.
"""

from fcox.spline_basis import BasisSpec, evaluate_basis, marginal_penalty, make_basis
from fcox.survival import SurvivalData, FunctionalPredictor
from fcox.fitter import FitResult, NonConvergence, SingularHessianError
from fcox.models import fit_poisson_route, fit_landmark_route, FunctionalCoxFit

__all__ = [
    "BasisSpec",
    "evaluate_basis",
    "marginal_penalty",
    "make_basis",
    "SurvivalData",
    "FunctionalPredictor",
    "FitResult",
    "NonConvergence",
    "SingularHessianError",
    "fit_poisson_route",
    "fit_landmark_route",
    "FunctionalCoxFit",
]

__version__ = "0.1.0"
