import math

import numpy as np
import pytest
from scipy import linalg

from iesis.drivers import GmmSettings, importance_step, run_gmm_ies_is
from iesis.ensemble import RngStreams
from iesis.errors import DegenerateError, ValidationError
from iesis.gmm import GaussianMixture, SmemConfig
from iesis.ies import (ObservationSetup, PriorSpec, combine_ensembles, cost,
                       finite_difference_jacobian, gmm_analysis_update, hessian_inverse,
                       ies_update_component, ies_update_gaussian, implicit_map, is_log_ratios,
                       is_weights, kalman_gain, map_factor, map_point, point_estimate)
from iesis.oracle import LinearModel, linear_gmm_posterior


def exact_ensemble(mean, cov, n_e, seed=0):
    """Ensemble whose 1/n_e sample mean and covariance equal ``mean`` and ``cov``."""
    n = len(mean)
    Z = np.random.default_rng(seed).standard_normal((n_e, n))
    Z -= Z.mean(axis=0)
    Q, _ = np.linalg.qr(Z)
    return mean[:, None] + math.sqrt(n_e) * linalg.cholesky(cov, lower=True) @ Q.T


class TestGain:
    def test_scalar(self):
        assert kalman_gain(1.0, 1.0, 1.0, 0.0, 1.0)[0, 0] == pytest.approx(0.5)

    def test_scalar_damped(self):
        assert kalman_gain(1.0, 1.0, 1.0, 1.0, 1.0)[0, 0] == pytest.approx(1 / 3)

    def test_zero_cross(self):
        assert np.all(kalman_gain(np.eye(2), np.zeros((2, 3)), np.eye(3), 0.0, np.eye(3)) == 0)

    def test_hessian_zero_cross(self):
        C = np.array([[2.0, 0.5], [0.5, 1.0]])
        K = np.zeros((2, 3))
        assert np.allclose(hessian_inverse(C, K, np.zeros((2, 3)), 0.0), C)

    def test_hessian_scalar(self):
        K = kalman_gain(1.0, 1.0, 1.0, 0.0, 1.0)
        assert hessian_inverse(1.0, K, 1.0, 0.0)[0, 0] == pytest.approx(0.5)

    def test_hessian_large_damping(self):
        K = kalman_gain(1.0, 1.0, 1.0, 1e12, 1.0)
        assert abs(hessian_inverse(1.0, K, 1.0, 1e12)[0, 0]) < 1e-11


class TestGaussianUpdate:
    def test_zero_innovation_identity(self):
        prior = PriorSpec.standard(3)
        X = np.zeros((3, 10))
        obs = ObservationSetup(np.zeros(2), 1.0)
        # theta = theta_pr and g = d for every member: no prior misfit, no innovation
        Y = np.zeros((2, 10))
        out = ies_update_gaussian(X, Y, prior, 0.0, obs)
        assert np.array_equal(out.intermediate, X)

    def test_large_damping_vanishes(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((2, 50))
        Y = rng.standard_normal((3, 50))
        obs = ObservationSetup(np.ones(3), 0.5)
        out = ies_update_gaussian(X, Y, PriorSpec.standard(2), 1e14, obs)
        assert np.max(np.abs(out.intermediate - X)) < 1e-10

    def test_exact_covariance_linear_oracle(self):
        G = np.array([[1.0, 2.0, 0.5], [-1.0, 0.3, 1.0]])
        c_theta = np.array([[1.0, 0.2, 0.0], [0.2, 2.0, 0.3], [0.0, 0.3, 0.5]])
        theta_pr = np.array([0.5, -1.0, 0.2])
        obs = ObservationSetup(np.array([0.7, -0.4]), 0.3)
        X = exact_ensemble(theta_pr, c_theta, 40)
        out = ies_update_gaussian(X, G @ X, PriorSpec(theta_pr, c_theta), 0.0, obs)
        post = linear_gmm_posterior(LinearModel(G, obs.c_d), obs.d,
                                    GaussianMixture(np.ones(1), theta_pr[None], c_theta[None]))
        assert np.max(np.abs(out.mu_tilde - post.means[0])) < 1e-12
        assert np.max(np.abs(out.h_inv - post.covs[0])) < 1e-12

    def test_prediction_count_checked(self):
        with pytest.raises(ValidationError):
            ies_update_gaussian(np.zeros((2, 5)), np.zeros((3, 5)), PriorSpec.standard(2), 0.0,
                                ObservationSetup(np.zeros(2), 1.0))

    def test_component_reduces_to_gaussian(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((3, 30))
        Y = rng.standard_normal((4, 30))
        obs = ObservationSetup(rng.standard_normal(4), 0.4)
        prior = PriorSpec.standard(3)
        a = ies_update_gaussian(X, Y, prior, 0.5, obs)
        b = ies_update_component(X, np.ones(30), X.mean(axis=1), Y, Y.mean(axis=1), prior, 0.5, obs)
        assert np.allclose(a.intermediate, b.intermediate, atol=1e-12)
        assert np.allclose(a.mu_tilde, b.mu_tilde, atol=1e-12)

    def test_component_tracks_oracle(self):
        G = np.array([[1.0]])
        obs = ObservationSetup(np.array([5.0]), 0.5)
        prior_mix = GaussianMixture(np.array([0.5, 0.5]), np.array([[2.0], [8.0]]),
                                    np.array([[[0.5]], [[0.5]]]))
        post = linear_gmm_posterior(LinearModel(G, obs.c_d), obs.d, prior_mix)
        X = prior_mix.sample(2000, np.random.default_rng(3))
        for i in range(2):
            gamma = ((X[0] > 5.0) == bool(i)).astype(float)
            prior_i = PriorSpec(prior_mix.means[i], prior_mix.covs[i])
            step = ies_update_component(X, gamma, prior_mix.means[i], G @ X,
                                        G @ prior_mix.means[i], prior_i, 0.0, obs)
            rel = abs(step.mu_tilde[0] - post.means[i, 0]) / abs(post.means[i, 0])
            assert rel < 0.1


class TestImplicitMap:
    def test_zero_xi(self):
        out = implicit_map(np.array([1.0, 2.0]), np.eye(2), np.zeros((2, 3)))
        assert np.all(out == np.array([[1.0], [2.0]]))

    def test_identity(self):
        xi = np.random.default_rng(0).standard_normal((3, 4))
        assert np.allclose(implicit_map(np.zeros(3), np.eye(3), xi), xi)

    def test_hand_example(self):
        out = implicit_map(np.array([1.0, 2.0]), np.diag([4.0, 1.0]), np.ones((2, 1)))
        assert np.allclose(out[:, 0], [3.0, 3.0])

    def test_indefinite_repaired(self):
        H = np.array([[1.0, 0.0], [0.0, -1e-9]])
        L = map_factor(H)
        assert np.all(np.isfinite(L))
        assert np.allclose(L @ L.T, np.diag([1.0, 1e-12]), atol=1e-12)

    def test_negative_definite(self):
        with pytest.raises(DegenerateError):
            map_factor(-np.eye(2))

    def test_map_point_weighted(self):
        X = np.array([[0.0, 2.0, 4.0]])
        assert map_point(X)[0] == 2.0
        assert map_point(X, [1.0, 0.0, 1.0])[0] == 2.0
        assert map_point(X, [0.0, 0.0, 3.0])[0] == 4.0


class TestWeights:
    def test_exact_gaussian_uniform(self):
        rng = np.random.default_rng(4)
        mu = np.array([0.3, -1.0, 2.0])
        A = rng.standard_normal((3, 3))
        H_inv = A @ A.T + 0.5 * np.eye(3)
        H = np.linalg.inv(H_inv)
        xi = rng.standard_normal((3, 200))
        S = implicit_map(mu, H_inv, xi)

        def W(T):
            D = T - mu[:, None]
            return 7.5 + 0.5 * np.sum(D * (H @ D), axis=0)

        w = is_weights(S, xi, W, rho=1.0)
        assert np.max(np.abs(w - 1 / 200)) < 1e-10

    @pytest.mark.parametrize("phi", [-1e3, 0.0, 12.5])
    def test_constant_cancels(self, phi):
        rng = np.random.default_rng(5)
        xi = rng.standard_normal((2, 50))
        W = lambda T: np.sum(T**4, axis=0)  # noqa: E731
        a = is_weights(xi, xi, W, 2.0, phi_hat=phi)
        b = is_weights(xi, xi, W, 2.0, phi_hat=0.0)
        assert np.max(np.abs(a - b)) < 1e-12

    def test_rho_keeps_ordering(self):
        rng = np.random.default_rng(6)
        xi = rng.standard_normal((2, 40))
        W = lambda T: np.sum(np.sin(3 * T) + T**2, axis=0)  # noqa: E731
        a = is_weights(xi, xi, W, 1.0)
        b = is_weights(xi, xi, W, 2.0)
        assert np.array_equal(np.argsort(a), np.argsort(b))

    @pytest.mark.parametrize("rho", [1.0, 3.0])
    def test_wrong_scale_hand(self, rho):
        xi = np.array([[-1.0, 0.0, 1.0]])
        S = implicit_map(np.zeros(1), np.array([[4.0]]), xi)
        w = is_weights(S, xi, lambda T: 0.5 * T[0] ** 2, rho)
        raw = np.exp((0.5 * xi[0] ** 2 - 0.5 * (2 * xi[0]) ** 2) / rho)
        assert np.allclose(w, raw / raw.sum())

    def test_nonfinite_cost_zero_weight(self):
        d = is_log_ratios(np.zeros((1, 3)), np.array([1.0, np.inf, np.nan]))
        assert d[1] == -np.inf and d[2] == -np.inf


class TestCombine:
    def test_single(self):
        E = np.random.default_rng(7).standard_normal((1, 2, 5))
        assert np.array_equal(combine_ensembles(E, np.ones((1, 5))), E[0])

    def test_select(self):
        E = np.random.default_rng(8).standard_normal((2, 2, 3))
        G = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        out = combine_ensembles(E, G)
        assert np.array_equal(out[:, 0], E[0][:, 0]) and np.array_equal(out[:, 1], E[1][:, 1])

    def test_convex(self):
        v = np.array([[1.0], [2.0]])
        E = np.stack([v, -v])
        assert np.all(combine_ensembles(E, np.full((2, 1), 0.5)) == 0)

    def test_shape_checked(self):
        with pytest.raises(ValidationError):
            combine_ensembles(np.zeros((2, 3, 4)), np.ones((2, 5)))


class TestAnalysis:
    def test_k1(self):
        E = np.random.default_rng(9).standard_normal((1, 2, 30))
        mix = gmm_analysis_update(E, np.ones((1, 30)), lambda T: 100 * T,
                                  ObservationSetup(np.array([50.0, -50.0]), 0.1))
        assert mix.weights[0] == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(10)
        base = rng.standard_normal((1, 400))
        E = np.stack([base - 2.0, -base + 2.0])
        mix = gmm_analysis_update(E, np.full((2, 400), 0.5), lambda T: 1.0 * T,
                                  ObservationSetup(np.zeros(1), 1.0))
        assert np.allclose(mix.weights, 0.5, atol=1e-12)

    def test_weight_ratio_matches_oracle(self):
        # prior-component ensembles give the marginal-likelihood weights of the closed form
        G = np.array([[2.0]])
        obs = ObservationSetup(np.array([1.5]), 0.6)
        prior = GaussianMixture(np.array([0.4, 0.6]), np.array([[-1.0], [1.5]]),
                                np.array([[[0.3]], [[0.8]]]))
        post = linear_gmm_posterior(LinearModel(G, obs.c_d), obs.d, prior)
        rng = np.random.default_rng(11)
        n_e = 4000
        E = np.stack([prior.means[i][:, None] + np.sqrt(prior.covs[i]) @ rng.standard_normal((1, n_e))
                      for i in range(2)])
        gamma = np.repeat(prior.weights[:, None], n_e, axis=1)
        mix = gmm_analysis_update(E, gamma, lambda T: G @ T, obs)
        ratio = mix.weights[1] / mix.weights[0]
        target = post.weights[1] / post.weights[0]
        assert abs(ratio / target - 1) < 0.1

    def test_point_estimate(self):
        one = GaussianMixture(np.ones(1), np.array([[1.0, 2.0]]), np.eye(2)[None])
        assert np.array_equal(point_estimate(one), [1.0, 2.0])
        sym = GaussianMixture(np.full(2, 0.5), np.array([[1.0], [-1.0]]), np.ones((2, 1, 1)))
        assert point_estimate(sym)[0] == 0.0
        mix = GaussianMixture(np.array([0.25, 0.75]), np.array([[0.0], [4.0]]), np.ones((2, 1, 1)))
        assert point_estimate(mix)[0] == pytest.approx(3.0)

    def test_jacobian_linear(self):
        M = np.random.default_rng(12).standard_normal((3, 4))
        J = finite_difference_jacobian(lambda T: M @ T, np.ones(4))
        assert np.allclose(J, M, atol=1e-9)


def test_cost_nonfinite():
    obs = ObservationSetup(np.zeros(1), 1.0)
    W = cost(np.zeros((1, 2)), np.array([[1.0, np.nan]]), obs, PriorSpec.standard(1))
    assert W[0] == 0.5 and W[1] == np.inf


def test_observation_sigma_validated():
    with pytest.raises(ValidationError):
        ObservationSetup(np.zeros(2), -1.0)


def test_reduction_consistency():
    """k = 1 mixture loop follows the single-Gaussian update on the same streams."""
    rng = np.random.default_rng(13)
    G = 0.5 * rng.standard_normal((3, 2))
    forward = lambda T: G @ T + 0.1 * T[:1] ** 2  # noqa: E731
    prior = PriorSpec.standard(2)
    obs = ObservationSetup(np.array([0.2, -0.1, 0.4]), 0.2)
    settings = GmmSettings(n_e=200, max_iter=3, eps_stop=0.0, smem=SmemConfig(k_min=1, k_max=1))
    res = run_gmm_ies_is(forward, prior, obs, settings, RngStreams(5))

    streams = RngStreams(5)
    X = prior.sample(200, streams.get("prior"))
    Y = forward(X)
    for l in range(3):
        center = forward(X.mean(axis=1)[:, None])[:, 0]
        step = ies_update_gaussian(X, Y, prior, settings.lam(l), obs, center=center)
        _, _, _, X, Y, _ = importance_step(step.mu_tilde, step.h_inv, forward, obs, prior, 1.0,
                                           streams.get("xi", l, 0), streams.get("resample", l, 0),
                                           200)
        assert np.allclose(res.records[l + 1].ensemble, X, rtol=0, atol=1e-10)


def test_lambda_schedule():
    s = GmmSettings(lambda0=1.0, nu=2.0)
    assert s.lam(3) == 1 / 8
    assert [s.lam(l) for l in range(5)] == [1.0 / 2**l for l in range(5)]
