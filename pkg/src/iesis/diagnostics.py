"""Error metrics, interval summaries and ensemble field statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


def relative_error(estimate, truth) -> float:
    """``|estimate - truth| / |truth|`` in the Euclidean norm."""
    t = np.asarray(truth, dtype=float).ravel()
    e = np.asarray(estimate, dtype=float).ravel()
    nt = np.linalg.norm(t)
    if nt == 0.0:
        raise ValidationError("truth has zero norm")
    return float(np.linalg.norm(e - t) / nt)


relative_error_theta = relative_error
relative_error_endpoints = relative_error


def fracture_endpoints(theta) -> np.ndarray:
    """End points ``(x0, y0 - L/2, x0, y0 + L/2)`` from ``(alpha, x0, y0, L)``."""
    _, x0, y0, L = np.asarray(theta, dtype=float)
    return np.array([x0, y0 - 0.5 * L, x0, y0 + 0.5 * L])


@dataclass
class IntervalSummary:
    """Per-component quantiles; each field has one entry per component."""

    lower95: np.ndarray
    p25: np.ndarray
    median: np.ndarray
    p75: np.ndarray
    upper95: np.ndarray

    def as_rows(self):
        return np.column_stack([self.lower95, self.p25, self.median, self.p75, self.upper95])


def _weighted_quantiles(x, w, qs):
    keep = w > 0
    x, w = x[keep], w[keep]
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    cdf = np.cumsum(ws) - 0.5 * ws
    cdf /= ws.sum()
    return np.interp(qs, cdf, xs)


def ensemble_percentiles(ens, weights=None) -> IntervalSummary:
    """Quantiles at 2.5/25/50/75/97.5 percent per row of ``ens``.

    Unweighted quantiles interpolate linearly between order statistics;
    weighted ones interpolate the midpoint empirical CDF.
    """
    X = np.atleast_2d(np.asarray(ens, dtype=float))
    if weights is None:
        Q = np.quantile(X, QUANTILES, axis=1, method="linear")
    else:
        w = np.asarray(weights, dtype=float)
        Q = np.stack([_weighted_quantiles(row, w, QUANTILES) for row in X], axis=1)
    # interpolation can break exact ordering by an ulp when values coincide
    Q = np.maximum.accumulate(Q, axis=0)
    return IntervalSummary(*Q)


def prediction_intervals(predictions, sigma: float, rng: np.random.Generator):
    """Credible and prediction intervals per sensor.

    The prediction interval adds independent ``N(0, sigma^2)`` noise to every
    member's predicted value before taking quantiles.
    """
    Y = np.atleast_2d(np.asarray(predictions, dtype=float))
    credible = ensemble_percentiles(Y)
    noisy = Y + sigma * rng.standard_normal(Y.shape)
    return credible, ensemble_percentiles(noisy)


def state_std_field(states) -> np.ndarray:
    """Pointwise ensemble standard deviation (``1/n_e`` normalization).

    ``states`` has the member axis first.
    """
    S = np.asarray(states, dtype=float)
    if S.shape[0] < 2:
        raise ValidationError("need at least two members")
    return S.std(axis=0)


def marginal_histograms(ens, bins: int = 30, weights=None):
    """Density-normalized histograms of each parameter component."""
    X = np.atleast_2d(np.asarray(ens, dtype=float))
    out = []
    for row in X:
        lo, hi = row.min(), row.max()
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        dens, edges = np.histogram(row, bins=bins, range=(lo, hi), weights=weights, density=True)
        out.append((edges, dens))
    return out
