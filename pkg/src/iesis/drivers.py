"""End-to-end inversion loops.

``run_gmm_ies_is`` fits a mixture to the current ensemble, updates each
component with the smoother, draws implicit-map importance samples per
component and recombines them with the memberships. ``run_dct_ies_is`` is the
single-Gaussian loop on truncated cosine coefficients, with dynamic dimension
reduction and optional post-processing of the synthesized fields.

Forward callables are batched: they map an ``(n, m)`` array of parameter (or
field) columns to an ``(n_d, m)`` array of predictions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dct import DctBasis, synthesize
from .dct import reduce_dimension as _reduce
from .ensemble import (RngStreams, mc_cov_theta, normalize_weights, scale_for_ess,
                       systematic_resample)
from .errors import SolverError, ValidationError
from .gmm import GaussianMixture, SmemConfig, initial_mixture, smem_fit
from .ies import (ObservationSetup, PriorSpec, combine_ensembles, cost, gmm_analysis_update,
                  ies_update_component, ies_update_gaussian, implicit_map, is_log_ratios,
                  point_estimate)

log = logging.getLogger(__name__)

Forward = Callable[[np.ndarray], np.ndarray]


@dataclass
class IterationRecord:
    """Snapshot after iteration ``l`` (``l = 0`` is the prior ensemble)."""

    l: int
    lam: float
    ensemble: np.ndarray
    predictions: np.ndarray
    weights: np.ndarray
    mean: np.ndarray
    estimate: np.ndarray
    ess: list
    k: int = 1
    rho: list = field(default_factory=list)
    mixture: Optional[GaussianMixture] = None
    retained: Optional[np.ndarray] = None
    field_mean: Optional[np.ndarray] = None
    field_estimate: Optional[np.ndarray] = None
    step_norm: float = float("nan")


@dataclass
class InversionResult:
    records: list = field(default_factory=list)
    converged: bool = False

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    @property
    def n_iter(self) -> int:
        return len(self.records) - 1


@dataclass
class IesSettings:
    n_e: int = 500
    rho: float = 1.0
    lambda0: float = 1.0
    nu: float = 2.0
    eps_stop: float = 1e-3
    max_iter: int = 20
    min_ess: float = 0.0

    def lam(self, l: int) -> float:
        return self.lambda0 / self.nu**l


@dataclass
class GmmSettings(IesSettings):
    smem: SmemConfig = field(default_factory=SmemConfig)
    fd_step: float = 1e-4


@dataclass
class DctSettings(IesSettings):
    alpha_reduce: float = 0.95
    postprocess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    postprocess_prior: bool = False


def _ess(w) -> float:
    return float(1.0 / np.sum(np.square(w)))


def evaluate_with_redraw(forward: Forward, X: np.ndarray, redraw: Callable[[int], np.ndarray],
                         max_tries: int = 5):
    """Predictions for ``X``; members with non-finite output are redrawn."""
    X = X.copy()
    Y = np.asarray(forward(X), dtype=float)
    for _ in range(max_tries):
        bad = ~np.all(np.isfinite(Y), axis=0)
        if not bad.any():
            return X, Y
        log.warning("redrawing %d members with non-finite predictions", int(bad.sum()))
        X[:, bad] = redraw(int(bad.sum()))
        Y[:, bad] = np.asarray(forward(X[:, bad]), dtype=float)
    raise SolverError("forward model keeps returning non-finite predictions")


def importance_step(step_mu, step_h, forward: Forward, obs: ObservationSetup, prior: PriorSpec,
                    rho: float, rng_xi, rng_resample, n_e: int, min_ess: float = 0.0):
    """Implicit-map samples, normalized weights and the resampled ensemble.

    With ``min_ess > 0`` the weight scale is raised above ``rho`` just enough
    for the effective sample size to reach ``min_ess * n_e``.

    Returns ``(samples, sample_predictions, weights, resampled, resampled_predictions, scale)``.
    """
    xi = rng_xi.standard_normal((len(step_mu), n_e))
    S = implicit_map(step_mu, step_h, xi)
    YS = np.asarray(forward(S), dtype=float)
    W = cost(S, YS, obs, prior)
    delta = is_log_ratios(xi, W)
    scale = scale_for_ess(delta, rho, min_ess * n_e) if min_ess > 0 else float(rho)
    w = normalize_weights(delta, scale)
    Sr, idx = systematic_resample(S, w, rng_resample, return_index=True)
    return S, YS, w, Sr, YS[:, idx], scale


def _moment_mixture(X) -> GaussianMixture:
    C = mc_cov_theta(X)
    n = len(C)
    C = C + 1e-12 * max(np.trace(C) / n, 1e-300) * np.eye(n)
    return GaussianMixture(np.ones(1), X.mean(axis=1)[None], C[None])


def _spd_mixture(mix: GaussianMixture) -> GaussianMixture:
    covs = mix.covs.copy()
    n = mix.dim
    for i in range(mix.k):
        jitter = 1e-12 * max(np.trace(covs[i]) / n, 1e-12)
        while True:
            try:
                np.linalg.cholesky(covs[i])
                break
            except np.linalg.LinAlgError:
                covs[i] = covs[i] + jitter * np.eye(n)
                jitter *= 100.0
    return GaussianMixture(mix.weights, mix.means, covs)


def run_gmm_ies_is(forward: Forward, prior: PriorSpec, obs: ObservationSetup,
                   settings: GmmSettings, streams: RngStreams, prior_ensemble=None,
                   callback: Optional[Callable[[IterationRecord], None]] = None) -> InversionResult:
    """Mixture-based inversion loop.

    With ``smem.k_max == 1`` the forecast is the single moment-matched
    Gaussian and every step reduces to the single-Gaussian update.
    """
    s = settings
    n = prior.dim
    if s.smem.k_min > s.smem.k_max:
        raise ValidationError("k_min exceeds k_max")
    X = prior.sample(s.n_e, streams.get("prior")) if prior_ensemble is None else np.array(prior_ensemble, dtype=float)
    if X.shape != (n, s.n_e):
        raise ValidationError(f"prior ensemble must have shape {(n, s.n_e)}")
    redraw_count = [0]

    def redraw(m):
        redraw_count[0] += 1
        return prior.sample(m, streams.get("redraw", redraw_count[0]))

    X, Y = evaluate_with_redraw(forward, X, redraw)
    result = InversionResult()
    mean = X.mean(axis=1)
    rec = IterationRecord(0, s.lambda0, X, Y, np.full((1, s.n_e), 1.0 / s.n_e), mean, mean,
                          [float(s.n_e)], k=1)
    result.records.append(rec)
    if callback:
        callback(rec)

    mix_a = None
    for l in range(s.max_iter):
        lam = s.lam(l)
        if s.smem.k_max == 1:
            mix_f = _moment_mixture(X)
            gamma = np.ones((1, s.n_e))
        else:
            init = (initial_mixture(X, s.smem.k_max, streams.get("smem init"))
                    if mix_a is None else _spd_mixture(mix_a))
            fit = smem_fit(X, init, s.smem)
            mix_f, gamma = fit.mixture, fit.gamma
        k = mix_f.k
        g_mu = np.asarray(forward(mix_f.means.T), dtype=float)
        per_model, per_preds, weights, ess, scales = [], [], [], [], []
        for i in range(k):
            step = ies_update_component(X, gamma[i], mix_f.means[i], Y, g_mu[:, i], prior, lam, obs)
            _, _, w, Sr, Yr, scale = importance_step(
                step.mu_tilde, step.h_inv, forward, obs, prior, s.rho, streams.get("xi", l, i),
                streams.get("resample", l, i), s.n_e, s.min_ess)
            scales.append(scale)
            per_model.append(Sr)
            per_preds.append(Yr)
            weights.append(w)
            ess.append(_ess(w))
        X_new = combine_ensembles(per_model, gamma)
        mix_a = gmm_analysis_update(per_model, gamma, forward, obs, s.fd_step)
        if k == 1:
            Y_new = per_preds[0]
        else:
            X_new, Y_new = evaluate_with_redraw(forward, X_new, redraw)
        new_mean = X_new.mean(axis=1)
        step_norm = float(np.linalg.norm(new_mean - X.mean(axis=1)))
        X, Y = X_new, Y_new
        rec = IterationRecord(l + 1, lam, X, Y, np.array(weights), new_mean, point_estimate(mix_a),
                              ess, k=k, rho=scales, mixture=mix_a, step_norm=step_norm)
        result.records.append(rec)
        if callback:
            callback(rec)
        log.info("iteration %d: k=%d lambda=%.4g step=%.3g", l + 1, k, lam, step_norm)
        if step_norm < s.eps_stop:
            result.converged = True
            break
    return result


def run_dct_ies_is(field_forward: Forward, basis: DctBasis, prior: PriorSpec, obs: ObservationSetup,
                   settings: DctSettings, streams: RngStreams, prior_ensemble=None,
                   callback: Optional[Callable[[IterationRecord], None]] = None) -> InversionResult:
    """Cosine-coefficient inversion loop with dynamic truncation.

    ``field_forward`` receives synthesized (and, when configured, projected)
    fields, one per column. Prior fields are projected only when
    ``settings.postprocess_prior`` is set.
    """
    s = settings
    if prior.dim != basis.n_c:
        raise ValidationError("prior dimension must equal the number of basis columns")
    n_full = basis.n_c
    positions = np.arange(n_full)
    post = s.postprocess or (lambda A: A)

    def fields(B, X, project=True):
        A = synthesize(X, B)
        return post(A) if project else A

    def forward_theta(B, X):
        return np.asarray(field_forward(fields(B, X)), dtype=float)

    def embed(v):
        out = np.zeros(n_full)
        out[positions] = v
        return out

    X = prior.sample(s.n_e, streams.get("prior")) if prior_ensemble is None else np.array(prior_ensemble, dtype=float)
    if X.shape != (n_full, s.n_e):
        raise ValidationError(f"prior ensemble must have shape {(n_full, s.n_e)}")
    A = fields(basis, X, project=s.postprocess_prior)
    Y = np.asarray(field_forward(A), dtype=float)
    if not np.all(np.isfinite(Y)):
        raise SolverError("forward model returned non-finite predictions for the prior ensemble")
    result = InversionResult()
    mean = X.mean(axis=1)
    raw_mean = synthesize(mean, basis)
    rec = IterationRecord(0, s.lambda0, X, Y, np.full((1, s.n_e), 1.0 / s.n_e), mean, mean,
                          [float(s.n_e)], retained=positions.copy(), field_mean=raw_mean,
                          field_estimate=post(raw_mean))
    result.records.append(rec)
    if callback:
        callback(rec)

    B, pr = basis, prior
    for l in range(s.max_iter):
        lam = s.lam(l)
        center = np.asarray(field_forward(A.mean(axis=1)[:, None]), dtype=float)[:, 0]
        step = ies_update_gaussian(X, Y, pr, lam, obs, center=center)
        S, YS, w, Xr, Yr, scale = importance_step(
            step.mu_tilde, step.h_inv, lambda Z: forward_theta(B, Z), obs, pr, s.rho,
            streams.get("xi", l, 0), streams.get("resample", l, 0), s.n_e, s.min_ess)
        old_mean = embed(X.mean(axis=1))
        keep = _reduce(Xr.mean(axis=1), s.alpha_reduce)
        B, pr = B.subset(keep), pr.restrict(keep)
        positions = positions[keep]
        X = Xr[keep]
        A = fields(B, X)
        if len(keep) == Xr.shape[0]:
            Y = Yr
        else:
            Y = np.asarray(field_forward(A), dtype=float)
        mean = X.mean(axis=1)
        step_norm = float(np.linalg.norm(embed(mean) - old_mean))
        raw_mean = synthesize(mean, B)
        rec = IterationRecord(l + 1, lam, X, Y, w[None], embed(mean), embed(mean), [_ess(w)],
                              rho=[scale], retained=positions.copy(), field_mean=raw_mean,
                              field_estimate=post(raw_mean), step_norm=step_norm)
        result.records.append(rec)
        if callback:
            callback(rec)
        log.info("iteration %d: dim=%d lambda=%.4g step=%.3g ess=%.1f", l + 1, len(positions), lam,
                 step_norm, _ess(w))
        if step_norm < s.eps_stop:
            result.converged = True
            break
    return result
