"""Blockwise regularized projection toward two facies values.

Each gridblock value ``a`` is replaced by the minimizer over ``[lower, upper]``
of ``(a - A)^2 + tau * (b1 A - b2)(b3 - b4 A)``. The objective is a convex
quadratic when ``1 - tau b1 b4 > 0``, so the minimizer is the clamped vertex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class PostProcessSpec:
    tau: float = 0.75
    b: tuple[float, float, float, float] = (1.0, 0.0, 1.0, 1.0)
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValidationError(f"tau must lie in (0, 1), got {self.tau}")
        if len(self.b) != 4:
            raise ValidationError("penalty needs four coefficients b1..b4")
        if not 1.0 - self.tau * self.b[0] * self.b[3] > 0.0:
            raise ValidationError("penalty is not convex: 1 - tau*b1*b4 must be positive")
        if not self.lower < self.upper:
            raise ValidationError("lower bound must be below upper bound")

    def objective(self, a_tilde, A):
        b1, b2, b3, b4 = self.b
        return (a_tilde - A) ** 2 + self.tau * (b1 * A - b2) * (b3 - b4 * A)

    def vertex(self, a_tilde):
        b1, b2, b3, b4 = self.b
        return (2.0 * np.asarray(a_tilde, dtype=float) - self.tau * (b1 * b3 + b2 * b4)) / (
            2.0 * (1.0 - self.tau * b1 * b4))


def project_block(a_tilde: float, spec: PostProcessSpec) -> float:
    return float(np.clip(spec.vertex(a_tilde), spec.lower, spec.upper))


def project_field(field, spec: PostProcessSpec) -> np.ndarray:
    """Apply :func:`project_block` to every gridblock (any array shape)."""
    return np.clip(spec.vertex(field), spec.lower, spec.upper)


def project_log_field(log_field, spec: PostProcessSpec, facies: tuple[float, float]) -> np.ndarray:
    """Project a log-permeability field whose two facies take values ``facies``.

    The field is mapped affinely so the facies land on ``spec.lower`` and
    ``spec.upper``, projected, and mapped back.
    """
    lo, hi = facies
    if hi == lo:
        raise ValidationError("facies values must differ")
    scale = (spec.upper - spec.lower) / (hi - lo)
    z = spec.lower + (np.asarray(log_field, dtype=float) - lo) * scale
    return lo + (project_field(z, spec) - spec.lower) / scale
