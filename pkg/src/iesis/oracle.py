"""Closed-form posterior for a linear model with a Gaussian-mixture prior.

With ``d = G theta + e``, ``e ~ N(0, C_D)`` and prior ``sum_i pi_i N(mu_i, S_i)``
the posterior is again a mixture. Component ``i`` has covariance
``S_i^a = (G' C_D^-1 G + S_i^-1)^-1``, mean
``mu_i^a = S_i^a (G' C_D^-1 d + S_i^-1 mu_i)`` and weight proportional to
``pi_i N(d | G mu_i, G S_i G' + C_D)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from .errors import ValidationError
from .gmm import GaussianMixture, component_logpdf


@dataclass(frozen=True)
class LinearModel:
    G: np.ndarray
    c_d: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        C = np.atleast_2d(np.asarray(self.c_d, dtype=float))
        if C.shape != (G.shape[0], G.shape[0]):
            raise ValidationError("c_d must be square with one row per datum")
        try:
            linalg.cholesky(C, lower=True)
        except linalg.LinAlgError as exc:
            raise ValidationError("c_d must be positive definite") from exc
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "c_d", C)

    def __call__(self, theta):
        return self.G @ np.asarray(theta, dtype=float)


def _chol(S, what):
    try:
        return linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError as exc:
        raise ValidationError(f"{what} is not positive definite") from exc


def log_marginal_weights(model: LinearModel, d, prior: GaussianMixture) -> np.ndarray:
    """Unnormalized ``log pi_i + log N(d | G mu_i, G S_i G' + C_D)``.

    Equivalent to the determinant and exponent form
    ``pi_i |S_i^a|^(1/2) / (|S_i|^(1/2) |C_D|^(1/2)) exp(-q_i / 2)`` up to a
    constant shared by all components.
    """
    d = np.asarray(d, dtype=float)
    out = np.empty(prior.k)
    for i in range(prior.k):
        S = model.G @ prior.covs[i] @ model.G.T + model.c_d
        out[i] = np.log(prior.weights[i]) + component_logpdf(d, model.G @ prior.means[i], S)
    return out


def log_weights_determinant_form(model: LinearModel, d, prior: GaussianMixture) -> np.ndarray:
    """The same weights through the completed-square expression, in log space."""
    d = np.asarray(d, dtype=float)
    cd = _chol(model.c_d, "c_d")
    Gt_Cinv = linalg.cho_solve(cd, model.G).T
    B = Gt_Cinv @ model.G
    logdet_cd = 2.0 * np.log(np.diag(cd[0])).sum()
    dCd = float(d @ linalg.cho_solve(cd, d))
    out = np.empty(prior.k)
    for i in range(prior.k):
        Si = prior.covs[i]
        si = _chol(Si, "prior covariance")
        P = B + linalg.cho_solve(si, np.eye(len(Si)))
        pf = _chol(P, "posterior precision")
        rhs = Gt_Cinv @ d + linalg.cho_solve(si, prior.means[i])
        mu_a = linalg.cho_solve(pf, rhs)
        quad = dCd + prior.means[i] @ linalg.cho_solve(si, prior.means[i]) - mu_a @ P @ mu_a
        logdet_sa = -2.0 * np.log(np.diag(pf[0])).sum()
        logdet_s = 2.0 * np.log(np.diag(si[0])).sum()
        out[i] = (np.log(prior.weights[i]) + 0.5 * logdet_sa - 0.5 * logdet_s - 0.5 * logdet_cd
                  - 0.5 * quad)
    return out


def linear_gmm_posterior(model: LinearModel, d, prior: GaussianMixture) -> GaussianMixture:
    d = np.asarray(d, dtype=float)
    if d.shape != (model.G.shape[0],):
        raise ValidationError("data length does not match the forward matrix")
    cd = _chol(model.c_d, "c_d")
    Gt_Cinv = linalg.cho_solve(cd, model.G).T
    B = Gt_Cinv @ model.G
    n = model.G.shape[1]
    means = np.empty((prior.k, n))
    covs = np.empty((prior.k, n, n))
    for i in range(prior.k):
        si = _chol(prior.covs[i], "prior covariance")
        pf = _chol(B + linalg.cho_solve(si, np.eye(n)), "posterior precision")
        covs[i] = linalg.cho_solve(pf, np.eye(n))
        covs[i] = 0.5 * (covs[i] + covs[i].T)
        means[i] = linalg.cho_solve(pf, Gt_Cinv @ d + linalg.cho_solve(si, prior.means[i]))
    lw = log_weights_determinant_form(model, d, prior)
    w = np.maximum(np.exp(lw - logsumexp(lw)), 1e-300)
    return GaussianMixture(w / w.sum(), means, covs)


@dataclass
class GriddedDensity:
    axes: tuple
    density: np.ndarray

    def mass(self) -> float:
        return float(_integrate(self.density, self.axes))

    def mean(self) -> np.ndarray:
        if len(self.axes) == 1:
            x = self.axes[0]
            return np.array([trapezoid(x * self.density, x)])
        X, Y = np.meshgrid(*self.axes, indexing="ij")
        return np.array([_integrate(X * self.density, self.axes), _integrate(Y * self.density, self.axes)])


def _integrate(f, axes):
    for ax in reversed(axes):
        f = trapezoid(f, ax, axis=-1)
    return f


def quadrature_posterior(model: LinearModel, d, prior: GaussianMixture, bounds, n_points: int = 2001) -> GriddedDensity:
    """Prior times likelihood on a tensor grid, normalized by the trapezoid rule.

    ``bounds`` is a sequence of ``(lo, hi)`` pairs, one per parameter (at most two).
    """
    n = model.G.shape[1]
    if n > 2 or len(bounds) != n:
        raise ValidationError("quadrature is limited to one or two parameters")
    axes = tuple(np.linspace(lo, hi, n_points) for lo, hi in bounds)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh])
    R = np.asarray(d, dtype=float)[:, None] - model.G @ pts
    cd = _chol(model.c_d, "c_d")
    loglik = -0.5 * np.sum(R * linalg.cho_solve(cd, R), axis=0)
    logp = prior.logpdf(pts) + loglik
    dens = np.exp(logp - logp.max()).reshape(mesh[0].shape)
    dens /= _integrate(dens, axes)
    return GriddedDensity(axes, dens)
