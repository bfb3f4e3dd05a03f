"""Iterative ensemble smoother with implicit sampling for Bayesian inversion.

Modules:

- :mod:`iesis.forward` flow and fractional diffusion solvers, sensors
- :mod:`iesis.dct` cosine-basis field parameterization
- :mod:`iesis.gmm` Gaussian mixtures fitted by smoothed EM
- :mod:`iesis.ensemble` ensemble statistics, weights, resampling
- :mod:`iesis.ies` smoother update, implicit map, mixture analysis
- :mod:`iesis.drivers` iteration loops
- :mod:`iesis.postprocess` two-facies projection
- :mod:`iesis.oracle` closed-form linear posterior and quadrature
- :mod:`iesis.diagnostics` error metrics and interval summaries
- :mod:`iesis.experiments` and :mod:`iesis.cli` twin experiments and CLI
"""

from .errors import DegenerateError, SolverError, ValidationError

__version__ = "0.1.0"

__all__ = ["DegenerateError", "SolverError", "ValidationError", "__version__"]
