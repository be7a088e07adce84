"""Model-based sparse coding: mixture-model dictionary learning fitted by fast EM."""

from .core import (
    BINOMIAL, GAUSSIAN, POISSON, SPATIAL,
    AtomUnusedError, Dataset, DegenerateSignalError, InvalidArgumentError,
    MixtureState, MSCError, NumericFailureError, SupportSet,
)
from .em import FitConfig, FitResult, fit_msc, log_likelihood
from .synth import SimSpec, simulate, subspace_distance

__version__ = "0.1.0"
