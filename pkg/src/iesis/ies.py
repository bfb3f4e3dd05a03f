"""Iterative ensemble smoother update and the implicit-sampling layer.

The smoother supplies a MAP estimate (mean of the intermediate ensemble) and
an inverse Hessian. Importance samples are drawn with the linear map
``theta = mu + L xi`` and weighted by ``exp((xi'xi/2 - W(theta)) / rho)``,
where ``W`` is the data-plus-prior misfit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .ensemble import mc_cov_theta, mc_cross_cov, mc_data_cov, normalize_weights, weighted_mc_covs
from .errors import DegenerateError, SolverError, ValidationError
from .gmm import GaussianMixture

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior ``N(theta_pr, c_theta)``."""

    theta_pr: np.ndarray
    c_theta: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.theta_pr, dtype=float))
        C = np.atleast_2d(np.asarray(self.c_theta, dtype=float))
        if C.shape != (len(mu), len(mu)):
            raise ValidationError("prior covariance does not match the prior mean")
        try:
            L = linalg.cholesky(C, lower=True)
        except linalg.LinAlgError as exc:
            raise ValidationError("prior covariance must be positive definite") from exc
        object.__setattr__(self, "theta_pr", mu)
        object.__setattr__(self, "c_theta", C)
        object.__setattr__(self, "_chol", L)

    @classmethod
    def standard(cls, n: int) -> "PriorSpec":
        return cls(np.zeros(n), np.eye(n))

    @property
    def dim(self) -> int:
        return len(self.theta_pr)

    def solve(self, D: np.ndarray) -> np.ndarray:
        """``C_theta^{-1} D`` by the Cholesky factor."""
        return linalg.cho_solve((self._chol, True), D)

    def misfit(self, X: np.ndarray) -> np.ndarray:
        """``0.5 (theta - theta_pr)' C_theta^{-1} (theta - theta_pr)`` per column."""
        D = np.atleast_2d(X) - self.theta_pr[:, None]
        z = linalg.solve_triangular(self._chol, D, lower=True)
        return 0.5 * np.sum(z * z, axis=0)

    def restrict(self, positions) -> "PriorSpec":
        pos = np.asarray(positions, dtype=int)
        return PriorSpec(self.theta_pr[pos], self.c_theta[np.ix_(pos, pos)])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.theta_pr[:, None] + self._chol @ rng.standard_normal((self.dim, n))


@dataclass(frozen=True)
class ObservationSetup:
    """Data ``d`` with independent noise of standard deviation ``sigma``."""

    d: np.ndarray
    sigma: float
    sensors: np.ndarray | None = None
    time: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "d", np.atleast_1d(np.asarray(self.d, dtype=float)))
        if not self.sigma >= 0:
            raise ValidationError("noise sigma must be nonnegative")

    @property
    def n_d(self) -> int:
        return len(self.d)

    @property
    def c_d(self) -> np.ndarray:
        return self.sigma**2 * np.eye(self.n_d)

    def misfit(self, predictions: np.ndarray) -> np.ndarray:
        """``0.5 |d - g|^2 / sigma^2`` per column."""
        R = np.atleast_2d(predictions) - self.d.reshape(-1, 1)
        return 0.5 * np.sum(R * R, axis=0) / self.sigma**2


def cost(theta, predictions, obs: ObservationSetup, prior: PriorSpec) -> np.ndarray:
    """Misfit ``W(theta)``; non-finite predictions give ``inf``."""
    W = obs.misfit(predictions) + prior.misfit(theta)
    return np.where(np.isfinite(W), W, np.inf)


def _spd_solve(M: np.ndarray, B: np.ndarray, what: str, retries: int = 4) -> np.ndarray:
    M = 0.5 * (M + M.T)
    scale = max(np.trace(M) / len(M), np.finfo(float).tiny)
    jitter = 0.0
    for attempt in range(retries + 1):
        try:
            return linalg.solve(M + jitter * np.eye(len(M)), B, assume_a="pos")
        except linalg.LinAlgError:
            jitter = scale * 10.0 ** (-12 + 2 * attempt)
            log.warning("%s not positive definite; retrying with jitter %.3g", what, jitter)
    raise SolverError(f"{what} could not be factorized")


def kalman_gain(c_theta_l, c_theta_d, c_dd, lam: float, c_d) -> np.ndarray:
    """``K = C_thetaD ((1 + lam) C_D + C_DD)^{-1}`` without forming the inverse."""
    c_theta_d = np.atleast_2d(c_theta_d)
    M = (1.0 + lam) * np.atleast_2d(c_d) + np.atleast_2d(c_dd)
    return _spd_solve(M, c_theta_d.T, "innovation covariance").T


def hessian_inverse(c_theta_l, K, c_theta_d, lam: float) -> np.ndarray:
    """``(C_theta_l - K C_thetaD') / (1 + lam)``, symmetrized."""
    H = (np.atleast_2d(c_theta_l) - np.atleast_2d(K) @ np.atleast_2d(c_theta_d).T) / (1.0 + lam)
    return 0.5 * (H + H.T)


@dataclass
class IesStep:
    """Outcome of one smoother update."""

    intermediate: np.ndarray
    K: np.ndarray
    h_inv: np.ndarray
    mu_tilde: np.ndarray


def _ies_update(X, Y, covs, prior: PriorSpec, lam: float, obs: ObservationSetup, weights=None) -> IesStep:
    c_tt, c_td, c_dd = covs
    K = kalman_gain(c_tt, c_td, c_dd, lam, obs.c_d)
    M = (c_tt - K @ c_td.T) / (1.0 + lam)
    H = 0.5 * (M + M.T)
    prior_term = M @ prior.solve(X - prior.theta_pr[:, None])
    innovation = K @ (Y - obs.d[:, None])
    Xt = X - prior_term - innovation
    return IesStep(Xt, K, H, map_point(Xt, weights))


def _check_inputs(ens, predictions, obs):
    X = np.atleast_2d(np.asarray(ens, dtype=float))
    Y = np.atleast_2d(np.asarray(predictions, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise ValidationError("ensemble and predictions disagree in member count")
    if Y.shape[0] != obs.n_d:
        raise ValidationError(f"predictions have {Y.shape[0]} rows, data has {obs.n_d}")
    if not np.all(np.isfinite(Y)):
        raise ValidationError("predictions contain non-finite values")
    return X, Y


def ies_update_gaussian(ens, predictions, prior: PriorSpec, lam: float, obs: ObservationSetup,
                        center=None) -> IesStep:
    """Single-Gaussian smoother update of every member.

    ``center`` is the reference for prediction deviations, typically the
    forward response at the ensemble mean; the prediction sample mean is
    used when it is omitted.
    """
    X, Y = _check_inputs(ens, predictions, obs)
    covs = (mc_cov_theta(X), mc_cross_cov(X, Y, center), mc_data_cov(Y, center))
    return _ies_update(X, Y, covs, prior, lam, obs)


def ies_update_component(ens, gamma_row, mu_f_i, predictions, g_mu_f_i, prior: PriorSpec,
                         lam: float, obs: ObservationSetup) -> IesStep:
    """Smoother update driven by the membership-weighted covariances of one
    mixture component. Every member is moved; the MAP estimate is the
    membership-weighted mean of the moved ensemble."""
    X, Y = _check_inputs(ens, predictions, obs)
    covs = weighted_mc_covs(X, gamma_row, mu_f_i, Y, g_mu_f_i)
    return _ies_update(X, Y, covs, prior, lam, obs, weights=gamma_row)


def map_point(intermediate, weights=None) -> np.ndarray:
    """Mean of the intermediate ensemble, optionally membership-weighted."""
    X = np.atleast_2d(np.asarray(intermediate, dtype=float))
    if X.shape[1] == 0:
        raise ValidationError("empty ensemble")
    if weights is None:
        return X.mean(axis=1)
    w = np.asarray(weights, dtype=float)
    return X @ w / w.sum()


def map_factor(h_inv) -> np.ndarray:
    """Factor ``L`` with ``L L' = h_inv``.

    Cholesky is used when it succeeds; otherwise eigenvalues below
    ``EIG_FLOOR`` are clipped first.
    """
    H = np.atleast_2d(np.asarray(h_inv, dtype=float))
    H = 0.5 * (H + H.T)
    try:
        return linalg.cholesky(H, lower=True)
    except linalg.LinAlgError:
        pass
    vals, vecs = linalg.eigh(H)
    if np.all(vals <= 0):
        raise DegenerateError("inverse Hessian has no positive eigenvalue")
    clipped = np.maximum(vals, EIG_FLOOR)
    log.info("repairing inverse Hessian: %d eigenvalues clipped", int(np.sum(vals < EIG_FLOOR)))
    try:
        return linalg.cholesky((vecs * clipped) @ vecs.T, lower=True)
    except linalg.LinAlgError:
        return vecs * np.sqrt(clipped)


def implicit_map(mu_tilde, h_inv, xi) -> np.ndarray:
    """Importance samples ``mu_tilde + L xi`` for each column of ``xi``."""
    L = map_factor(h_inv)
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    return np.asarray(mu_tilde, dtype=float).reshape(-1, 1) + L @ xi


def is_log_ratios(xi, W, phi_hat: float = 0.0) -> np.ndarray:
    """``phi_hat + xi'xi/2 - W``; members with non-finite ``W`` get ``-inf``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    W = np.asarray(W, dtype=float)
    delta = phi_hat + 0.5 * np.sum(xi * xi, axis=0) - W
    return np.where(np.isfinite(W), delta, -np.inf)


def is_weights(samples, xi, w_evaluator: Callable[[np.ndarray], np.ndarray], rho: float,
               phi_hat: float = 0.0) -> np.ndarray:
    """Normalized importance weights of the implicit-map samples."""
    W = np.asarray(w_evaluator(np.atleast_2d(samples)), dtype=float)
    return normalize_weights(is_log_ratios(xi, W, phi_hat), rho)


def combine_ensembles(per_model, gamma) -> np.ndarray:
    """``theta_j = sum_i gamma_ij theta_j^(i)``.

    ``per_model`` has shape ``(k, n_theta, n_e)``; ``gamma`` has ``(k, n_e)``.
    """
    E = np.asarray(per_model, dtype=float)
    G = np.atleast_2d(np.asarray(gamma, dtype=float))
    if E.ndim != 3 or G.shape != (E.shape[0], E.shape[2]):
        raise ValidationError("per-model ensembles and memberships disagree in shape")
    return np.einsum("ij,inj->nj", G, E)


def finite_difference_jacobian(forward, mu, step: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian; all ``2 n`` evaluations go in one batch."""
    mu = np.asarray(mu, dtype=float)
    n = len(mu)
    E = step * np.eye(n)
    P = np.concatenate([mu[:, None] + E, mu[:, None] - E], axis=1)
    Y = np.asarray(forward(P), dtype=float)
    return (Y[:, :n] - Y[:, n:]) / (2.0 * step)


def _gaussian_logpdf(r, S) -> float:
    S = 0.5 * (S + S.T)
    scale = np.trace(S) / len(S)
    for attempt in range(5):
        try:
            L = linalg.cholesky(S + (0.0 if attempt == 0 else scale * 10.0 ** (-12 + 2 * attempt)) * np.eye(len(S)),
                                lower=True)
            break
        except linalg.LinAlgError:
            log.warning("predictive covariance not positive definite; adding jitter")
    else:
        raise SolverError("predictive covariance could not be factorized")
    z = linalg.solve_triangular(L, r, lower=True)
    return float(-0.5 * z @ z - np.log(np.diag(L)).sum() - 0.5 * len(r) * np.log(2 * np.pi))


def mixture_moments(per_model, gamma, jitter: float = 1e-12):
    """Membership-weighted means and covariances of the per-model ensembles."""
    E = np.asarray(per_model, dtype=float)
    G = np.atleast_2d(np.asarray(gamma, dtype=float))
    k, n, _ = E.shape
    n_i = G.sum(axis=1)
    if np.any(n_i <= 0):
        raise DegenerateError("a mixture component has zero total membership")
    means = np.einsum("ij,inj->in", G, E) / n_i[:, None]
    covs = np.empty((k, n, n))
    for i in range(k):
        D = E[i] - means[i][:, None]
        C = (G[i] * D) @ D.T / n_i[i]
        covs[i] = 0.5 * (C + C.T) + jitter * max(np.trace(C) / n, 1.0) * np.eye(n)
    return means, covs, n_i


def gmm_analysis_update(per_model, gamma, forward, obs: ObservationSetup,
                        fd_step: float = 1e-4) -> GaussianMixture:
    """Posterior mixture from the per-model importance ensembles.

    Weights follow ``pi_i ∝ n_i N(d | g(mu_i), G_i Sigma_i G_i' + C_D)`` with
    ``G_i`` a finite-difference Jacobian at ``mu_i``.
    """
    means, covs, n_i = mixture_moments(per_model, gamma)
    k = len(n_i)
    logw = np.log(n_i)
    if k > 1:
        for i in range(k):
            J = finite_difference_jacobian(forward, means[i], fd_step)
            g_mu = np.asarray(forward(means[i][:, None]), dtype=float)[:, 0]
            logw[i] += _gaussian_logpdf(obs.d - g_mu, J @ covs[i] @ J.T + obs.c_d)
    w = np.maximum(np.exp(logw - logsumexp(logw)), 1e-300)
    return GaussianMixture(w / w.sum(), means, covs)


def point_estimate(mixture: GaussianMixture) -> np.ndarray:
    """``sum_i pi_i mu_i``."""
    return mixture.weights @ mixture.means
