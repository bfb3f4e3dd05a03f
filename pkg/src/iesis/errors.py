"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad input: wrong shape, out-of-range value, unknown config key."""


class SolverError(RuntimeError):
    """A forward solve or a matrix factorization failed."""


class DegenerateError(RuntimeError):
    """Weights, components or Hessians that carry no usable information."""
