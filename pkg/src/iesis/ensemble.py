"""Ensemble statistics, importance weights and resampling.

An ensemble is an ``(n_theta, n_e)`` array with one member per column.
Covariances use the ``1/n_e`` normalization throughout.
"""

from __future__ import annotations

import math
import zlib

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateError, ValidationError


class RngStreams:
    """Named, independent random streams derived from one master seed.

    ``streams.get("xi", 3, 1)`` always yields the same generator for the same
    seed, regardless of how many other streams were drawn before it.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def get(self, name: str, *index: int) -> np.random.Generator:
        key = [self.seed, zlib.crc32(name.encode()), *(int(i) for i in index)]
        return np.random.default_rng(np.random.SeedSequence(key))


def as_ensemble(samples) -> np.ndarray:
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValidationError("ensemble must be a 2D array with members as columns")
    if X.shape[1] < 2:
        raise ValidationError("ensemble needs at least two members")
    if not np.all(np.isfinite(X)):
        raise ValidationError("ensemble contains non-finite entries")
    return X


def ensemble_mean(ens) -> np.ndarray:
    return np.asarray(ens, dtype=float).mean(axis=1)


def _deviations(X, center):
    c = X.mean(axis=1) if center is None else np.asarray(center, dtype=float)
    return X - c.reshape(-1, 1)


def mc_cov_theta(ens) -> np.ndarray:
    """``(1/n_e) sum_j (theta_j - mean)(theta_j - mean)^T``."""
    X = np.atleast_2d(np.asarray(ens, dtype=float))
    D = _deviations(X, None)
    C = D @ D.T / X.shape[1]
    return 0.5 * (C + C.T)


def mc_cross_cov(ens, predictions, center=None) -> np.ndarray:
    """Parameter/prediction cross covariance.

    Prediction deviations are taken about ``center`` when given (for example
    the forward response at the ensemble mean), else about their sample mean.
    """
    X = np.atleast_2d(np.asarray(ens, dtype=float))
    Y = np.atleast_2d(np.asarray(predictions, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise ValidationError(f"ensemble has {X.shape[1]} members, predictions {Y.shape[1]}")
    return _deviations(X, None) @ _deviations(Y, center).T / X.shape[1]


def mc_data_cov(predictions, center=None) -> np.ndarray:
    Y = np.atleast_2d(np.asarray(predictions, dtype=float))
    D = _deviations(Y, center)
    C = D @ D.T / Y.shape[1]
    return 0.5 * (C + C.T)


def weighted_mc_covs(ens, gamma_row, mu_i, predictions, g_mu_i):
    """Membership-weighted covariances of one mixture component.

    Parameter deviations are taken about ``mu_i`` and prediction deviations
    about ``g_mu_i``, each weighted by ``gamma_row`` and divided by its sum.

    Returns
    -------
    c_tt, c_td, c_dd : ndarray
    """
    X = np.atleast_2d(np.asarray(ens, dtype=float))
    Y = np.atleast_2d(np.asarray(predictions, dtype=float))
    g = np.asarray(gamma_row, dtype=float)
    if X.shape[1] != Y.shape[1] or g.shape != (X.shape[1],):
        raise ValidationError("ensemble, predictions and memberships disagree in size")
    n_i = g.sum()
    if not n_i > 0:
        raise DegenerateError("component has zero total membership")
    Dt = X - np.asarray(mu_i, dtype=float).reshape(-1, 1)
    Dd = Y - np.asarray(g_mu_i, dtype=float).reshape(-1, 1)
    c_tt = (g * Dt) @ Dt.T / n_i
    c_td = (g * Dt) @ Dd.T / n_i
    c_dd = (g * Dd) @ Dd.T / n_i
    return 0.5 * (c_tt + c_tt.T), c_td, 0.5 * (c_dd + c_dd.T)


def normalize_weights(log_ratios, rho: float = 1.0) -> np.ndarray:
    """``w_j ∝ exp(delta_j / rho)``, normalized in log space.

    Non-finite entries (NaN or -inf) receive zero weight.
    """
    if not rho > 0:
        raise ValidationError("weight scale rho must be positive")
    d = np.asarray(log_ratios, dtype=float) / rho
    d = np.where(np.isnan(d), -np.inf, d)
    if np.any(d == np.inf):
        raise DegenerateError("infinite log weight")
    lse = logsumexp(d)
    if not np.isfinite(lse):
        raise DegenerateError("all importance weights are zero")
    w = np.exp(d - lse)
    return w / w.sum()


def effective_sample_size(w) -> float:
    w = np.asarray(w, dtype=float)
    return float(1.0 / np.sum(w * w))


def scale_for_ess(log_ratios, rho: float, target: float, max_scale: float = 1e12,
                  n_bisect: int = 60) -> float:
    """Smallest scale ``>= rho`` (to bisection accuracy) whose weights reach ESS ``target``.

    Returns ``rho`` itself when its weights already reach the target. Larger
    scales flatten the weights without changing their order.
    """
    if effective_sample_size(normalize_weights(log_ratios, rho)) >= target:
        return float(rho)
    lo, hi = math.log(rho), math.log(max_scale)
    if effective_sample_size(normalize_weights(log_ratios, math.exp(hi))) < target:
        return float(math.exp(hi))
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        if effective_sample_size(normalize_weights(log_ratios, math.exp(mid))) >= target:
            hi = mid
        else:
            lo = mid
    return float(math.exp(hi))


def systematic_counts(weights, n: int, u: float) -> np.ndarray:
    """Copy counts from systematic resampling with offset ``u`` in ``[0, 1)``."""
    w = np.asarray(weights, dtype=float)
    edges = np.cumsum(w) * n
    edges[-1] = n
    positions = u + np.arange(n)
    idx = np.searchsorted(edges, positions, side="right")
    return np.bincount(np.minimum(idx, len(w) - 1), minlength=len(w))


def systematic_resample(ens, weights, rng: np.random.Generator, return_index: bool = False):
    """Equally weighted ensemble by systematic resampling.

    One uniform offset stratifies all ``n_e`` draws, so member ``j`` is copied
    either ``floor(n_e w_j)`` or ``ceil(n_e w_j)`` times.
    """
    X = np.atleast_2d(np.asarray(ens, dtype=float))
    w = np.asarray(weights, dtype=float)
    if w.shape != (X.shape[1],):
        raise ValidationError("one weight per member is required")
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValidationError("weights must be normalized and nonnegative")
    counts = systematic_counts(w, X.shape[1], rng.random())
    idx = np.repeat(np.arange(X.shape[1]), counts)
    return (X[:, idx], idx) if return_index else X[:, idx]
