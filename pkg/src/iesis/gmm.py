"""Gaussian mixtures and smoothed EM with harmony-criterion screening.

Samples are stored column-wise, ``X`` has shape ``(n_theta, n_e)``, to match
the ensemble convention used everywhere else in the package.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import DegenerateError, ValidationError

log = logging.getLogger(__name__)

H_FLOOR = 1e-8


def _cholesky(S: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(S, lower=True)
    except linalg.LinAlgError as exc:
        raise linalg.LinAlgError(f"covariance is not positive definite: {exc}") from exc


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture parameters ``q = {pi_i, mu_i, Sigma_i}``.

    Attributes
    ----------
    weights : ndarray, shape (k,)
    means : ndarray, shape (k, n)
    covs : ndarray, shape (k, n, n)
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        c = np.asarray(self.covs, dtype=float)
        if c.ndim == 2:
            c = c[None]
        if not (len(w) == m.shape[0] == c.shape[0]) or c.shape[1:] != (m.shape[1], m.shape[1]):
            raise ValidationError("mixture weights, means and covariances disagree in shape")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError("mixture weights must be positive and sum to one")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", c)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def logpdf(self, X) -> np.ndarray:
        """Log density at each column of ``X``."""
        return logsumexp(_log_joint(np.atleast_2d(X), self), axis=0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.k, size=n, p=self.weights)
        z = rng.standard_normal((self.dim, n))
        out = np.empty((self.dim, n))
        for i in range(self.k):
            sel = comp == i
            out[:, sel] = self.means[i][:, None] + _cholesky(self.covs[i]) @ z[:, sel]
        return out


def component_logpdf(X, mu, sigma) -> np.ndarray:
    """``log N(x | mu, sigma)`` for each column of ``X`` (or a single vector)."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = X.reshape(len(mu), -1)
    L = _cholesky(np.atleast_2d(sigma))
    z = linalg.solve_triangular(L, X - np.asarray(mu, dtype=float).reshape(-1, 1), lower=True)
    n = L.shape[0]
    out = -0.5 * np.sum(z * z, axis=0) - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi)
    return out[0] if single else out


def component_pdf(x, mu, sigma):
    """Multivariate normal density, evaluated in log space."""
    return np.exp(component_logpdf(x, mu, sigma))


def _log_joint(X, mixture: GaussianMixture) -> np.ndarray:
    return np.stack([np.log(mixture.weights[i]) + component_logpdf(X, mixture.means[i], mixture.covs[i])
                     for i in range(mixture.k)])


def byy_criterion(mixture: GaussianMixture, h: float) -> float:
    """``J = sum_i pi_i (0.5 log|Sigma_i| + 0.5 h^2 tr(Sigma_i^-1) - log pi_i)``."""
    J = 0.0
    n = mixture.dim
    for p, S in zip(mixture.weights, mixture.covs):
        L = _cholesky(S)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        Linv = linalg.solve_triangular(L, np.eye(n), lower=True)
        J += p * (0.5 * logdet + 0.5 * h**2 * np.sum(Linv * Linv) - np.log(p))
    return float(J)


def e_step(X, mixture: GaussianMixture) -> np.ndarray:
    """Membership matrix ``gamma`` of shape ``(k, n_e)``; columns sum to one."""
    lj = _log_joint(np.atleast_2d(X), mixture)
    norm = logsumexp(lj, axis=0)
    bad = ~np.isfinite(norm)
    gamma = np.exp(lj - np.where(bad, 0.0, norm))
    if np.any(bad):
        log.warning("all component densities underflow for %d samples; using uniform memberships",
                    int(bad.sum()))
        gamma[:, bad] = 1.0 / mixture.k
    return gamma


def m_step(X, gamma, h: float) -> GaussianMixture:
    """Smoothed M-step; covariances carry an ``h^2 I`` floor.

    Components whose total membership vanishes are dropped, which is the
    screening outcome they would receive anyway.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    n, n_e = X.shape
    nk = gamma.sum(axis=1)
    live = nk > 0
    if not np.any(live):
        raise DegenerateError("every mixture component has zero membership")
    if not np.all(live):
        log.info("dropping %d components with zero membership", int((~live).sum()))
    gamma, nk = gamma[live], nk[live]
    means = (gamma @ X.T) / nk[:, None]
    covs = np.empty((len(nk), n, n))
    for i in range(len(nk)):
        D = X - means[i][:, None]
        covs[i] = (gamma[i] * D) @ D.T / nk[i] + h**2 * np.eye(n)
        covs[i] = 0.5 * (covs[i] + covs[i].T)
    return GaussianMixture(nk / nk.sum(), means, covs)


def pairwise_sq_dists(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sq = np.sum(X * X, axis=0)
    D = sq[:, None] + sq[None, :] - 2.0 * X.T @ X
    return np.maximum(D, 0.0)


def initial_h(X) -> float:
    """``h0 = sqrt(sum_ij |x_i - x_j|^2 / (n_theta n_e^3))``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, n_e = X.shape
    # sum_ij |x_i - x_j|^2 = 2 n_e sum_j |x_j - xbar|^2
    D = X - X.mean(axis=1, keepdims=True)
    return float(np.sqrt(2.0 * n_e * np.sum(D * D) / (n * n_e**3)))


def smoothing_gradient(h: float, X, mixture: GaussianMixture, sq_dists=None) -> float:
    """``S(h) = n/h - h sum_i pi_i tr(Sigma_i^-1) - sum_ij beta_ij d_ij^2 / h^3``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    D2 = pairwise_sq_dists(X) if sq_dists is None else sq_dists
    logk = -0.5 * D2 / h**2
    if np.any(D2 > 0):
        # sum beta d^2 without forming beta: exp(lse(logk, b=d2) - lse(logk))
        pair = np.exp(logsumexp(logk, b=D2) - logsumexp(logk))
    else:
        pair = 0.0
    tr = sum(p * np.trace(np.linalg.inv(S)) for p, S in zip(mixture.weights, mixture.covs))
    return float(X.shape[0] / h - h * tr - pair / h**3)


def update_smoothing(h: float, X, mixture: GaussianMixture, eta: float, sq_dists=None) -> float:
    """One gradient step ``h + eta S(h)`` clamped above ``H_FLOOR``."""
    if not h > 0:
        raise ValidationError("smoothing parameter must be positive")
    return max(h + eta * smoothing_gradient(h, X, mixture, sq_dists), H_FLOOR)


def screen_components(mixture: GaussianMixture, eps_screen: float, k_min: int) -> GaussianMixture:
    """Drop components with ``pi_i < eps_screen`` while keeping at least ``k_min``.

    When the threshold would remove too many, the heaviest ``k_min``
    components survive.
    """
    w = mixture.weights
    keep = w >= eps_screen
    if keep.all() or mixture.k <= k_min:
        return mixture
    if keep.sum() < k_min:
        keep = np.zeros(mixture.k, dtype=bool)
        keep[np.argsort(-w, kind="stable")[:k_min]] = True
    return GaussianMixture(w[keep] / w[keep].sum(), mixture.means[keep], mixture.covs[keep])


@dataclass
class SmemConfig:
    """Settings for :func:`smem_fit`.

    ``prune`` enables harmony-guided pruning: once the smoothed EM passes
    stop, each component is tentatively removed, the remainder is refit at
    the current ``h``, and the removal with the lowest criterion is kept if
    it lowers ``J``. Weight screening alone rarely removes a component that
    still holds a share of the samples.
    """

    k_max: int = 5
    k_min: int = 2
    eps_screen: float = 0.05
    eta_scale: float = 0.01
    max_iter: int = 50
    prune: bool = True
    refit_iter: int = 30


@dataclass
class SmemResult:
    mixture: GaussianMixture
    gamma: np.ndarray
    h: float
    J_history: list
    k_history: list

    @property
    def k(self) -> int:
        return self.mixture.k


def _drop(mixture: GaussianMixture, i: int) -> GaussianMixture:
    keep = np.arange(mixture.k) != i
    w = mixture.weights[keep]
    return GaussianMixture(w / w.sum(), mixture.means[keep], mixture.covs[keep])


def _refit(X, mixture: GaussianMixture, h: float, n_iter: int) -> GaussianMixture:
    for _ in range(n_iter):
        mixture = m_step(X, e_step(X, mixture), h)
    return mixture


def smem_fit(X, init: GaussianMixture, config: SmemConfig | None = None,
             callback=None) -> SmemResult:
    """Fit a mixture to the columns of ``X`` by smoothed EM.

    Each pass screens light components, runs E- and M-steps with the current
    ``h``, then takes a gradient step on ``h``. A pass is accepted only when
    the harmony criterion decreases; otherwise the last accepted state is
    kept. The component count is frozen once it reaches ``k_min``. See
    :class:`SmemConfig` for the pruning stage. ``callback(mixture, h)`` is
    called with every accepted state.
    """
    cfg = config or SmemConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    h0 = initial_h(X)
    if h0 <= H_FLOOR:
        warnings.warn("degenerate ensemble: all samples coincide", RuntimeWarning, stacklevel=2)
        mix = GaussianMixture(np.ones(1), X[:, :1].T, (H_FLOOR**2 * np.eye(n))[None])
        return SmemResult(mix, np.ones((1, X.shape[1])), H_FLOOR, [byy_criterion(mix, H_FLOOR)], [1])
    eta = cfg.eta_scale * h0**2
    D2 = pairwise_sq_dists(X)

    h = h0
    mix = screen_components(init, cfg.eps_screen, cfg.k_min)
    J = byy_criterion(mix, h)
    J_hist, k_hist = [J], [mix.k]
    if callback:
        callback(mix, h)
    passes = 0
    while True:
        while passes < cfg.max_iter:
            passes += 1
            new = m_step(X, e_step(X, mix), h)
            h_new = update_smoothing(h, X, new, eta, D2)
            if not byy_criterion(new, h_new) < J:
                break
            mix, h = screen_components(new, cfg.eps_screen, cfg.k_min), h_new
            J = byy_criterion(mix, h)
            J_hist.append(J)
            k_hist.append(mix.k)
            if callback:
                callback(mix, h)
        if not cfg.prune or mix.k <= cfg.k_min:
            break
        trials = [_refit(X, _drop(mix, i), h, cfg.refit_iter) for i in range(mix.k)]
        scores = [byy_criterion(t, h) for t in trials]
        best = int(np.argmin(scores))
        if not scores[best] < J:
            break
        mix, J = trials[best], scores[best]
        J_hist.append(J)
        k_hist.append(mix.k)
        if callback:
            callback(mix, h)
    return SmemResult(mix, e_step(X, mix), h, J_hist, k_hist)


def initial_mixture(X, k: int, rng: np.random.Generator) -> GaussianMixture:
    """``k`` distinct random members as means, the sample covariance for every
    component, equal weights."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, n_e = X.shape
    k = min(k, n_e)
    idx = rng.choice(n_e, size=k, replace=False)
    D = X - X.mean(axis=1, keepdims=True)
    C = D @ D.T / n_e
    C = 0.5 * (C + C.T) + 1e-12 * max(np.trace(C) / n, 1.0) * np.eye(n)
    return GaussianMixture(np.full(k, 1.0 / k), X[:, idx].T, np.repeat(C[None], k, axis=0))
