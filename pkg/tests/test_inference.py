import numpy as np
import pytest
from scipy.stats import norm

from deepiv.core import ParameterSet, init_params
from deepiv.errors import ConditioningError, NumericError, ParameterError
from deepiv.inference import (
    SplitInferenceResult, _linear_ci, bernoulli_entropy, compute_eta_bar, contrast_ci, counterfactual_ci,
    dropout_posterior_predict, iv_moments, split_two_stage, total_layer_inputs, vb_objective_terms,
)
from deepiv.outcome import OutcomeModel, final_layer_features, predict_h
from deepiv.treatment import TreatmentModel
from helpers import linear_outcome, make_data, normal_treatment


def point_mass(p0, n_x=1):
    model = normal_treatment(p0, 1.0, n_x=n_x)
    model.network.biases[0][2] = -40.0  # scale collapses to the floor
    return model


def small_net(seed=0, hidden=(6, 5), n_x=1, activation="tanh", keep=1.0):
    widths = [1 + n_x, *hidden, 1]
    net = init_params(widths, np.random.default_rng(seed), activation)
    names = [f"x{i}" for i in range(n_x)]
    return OutcomeModel(net, names, np.zeros(n_x), np.ones(n_x), keep_probability=keep)


# -- expected features --------------------------------------------------------------

def test_eta_bar_point_mass_equals_features_at_that_treatment():
    omodel, tmodel = small_net(), point_mass(1.5)
    x = np.random.default_rng(1).normal(size=(6, 1))
    z = np.zeros((6, 1))
    eta_bar = compute_eta_bar(omodel, tmodel, x, z, 50, np.random.default_rng(0))
    np.testing.assert_allclose(eta_bar, final_layer_features(omodel, np.full(6, 1.5), x), atol=1e-4)  # scale floor of 1e-3


def test_eta_bar_of_linear_feature_is_feature_at_mean():
    omodel, tmodel = linear_outcome(), normal_treatment(2.0, 1.0)
    errors = []
    for n_draws in (100, 10_000):
        eta_bar = compute_eta_bar(omodel, tmodel, np.empty((20, 0)), np.zeros((20, 1)), n_draws,
                                  np.random.default_rng(n_draws))
        np.testing.assert_allclose(eta_bar[:, 0], 1.0, atol=1e-12)
        errors.append(np.sqrt(np.mean((eta_bar[:, 1] - 2.0) ** 2)))
    assert errors[0] < 4 / np.sqrt(100)
    assert errors[1] < 4 / np.sqrt(10_000)
    assert errors[1] < errors[0]


def test_eta_bar_constant_feature_is_exact():
    omodel = linear_outcome()
    omodel.network = ParameterSet([np.array([[0.0]]), np.array([[1.0]])], [np.array([5.0]), np.array([0.0])],
                                  ["identity", "identity"])
    eta_bar = compute_eta_bar(omodel, normal_treatment(0.0, 3.0), np.empty((4, 0)), np.zeros((4, 1)), 7,
                              np.random.default_rng(0))
    np.testing.assert_allclose(eta_bar[:, 1], 5.0, atol=1e-12)


def test_eta_bar_categorical_head_sums_exactly():
    w = np.zeros((2, 1))
    b = np.array([0.0, np.log(3.0)])  # probabilities 1/4, 3/4
    tmodel = TreatmentModel(ParameterSet([w], [b], ["identity"]), "categorical", 2, [], ["z0"],
                            np.zeros(1), np.ones(1), categories=np.array([0.0, 4.0]))
    eta_bar = compute_eta_bar(linear_outcome(), tmodel, np.empty((3, 0)), np.zeros((3, 1)), 1,
                              np.random.default_rng(0))
    np.testing.assert_allclose(eta_bar[:, 1], 3.0, atol=1e-12)


# -- moment estimator ---------------------------------------------------------------

def test_intercept_only_hand_example():
    H = np.ones((2, 1))
    res = iv_moments(H, H, np.array([1.0, -1.0]))
    assert res.beta_hat[0] == pytest.approx(0.0, abs=1e-15)
    assert res.V_beta[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert res.ridge == 0.0 and res.n_leftout == 2
    est, half = _linear_ci(res, np.ones((1, 1)), 0.95)
    assert est[0] == 0.0
    assert half[0] == pytest.approx(1.96 * np.sqrt(0.5), abs=1e-3)
    assert half[0] == pytest.approx(1.386, abs=1e-3)


def test_instruments_equal_to_regressors_reduce_to_ols():
    rng = np.random.default_rng(2)
    H = np.column_stack([np.ones(300), rng.normal(size=(300, 3))])
    Y = H @ [1.0, -2.0, 0.5, 3.0] + rng.normal(size=300)
    res = iv_moments(H, H, Y)
    np.testing.assert_allclose(res.beta_hat, np.linalg.lstsq(H, Y, rcond=None)[0], atol=1e-10)


def test_covariance_is_symmetric_psd_and_matches_sandwich():
    rng = np.random.default_rng(3)
    n = 400
    z = rng.normal(size=(n, 2))
    H_bar = np.column_stack([np.ones(n), z])
    H = H_bar + 0.5 * rng.normal(size=(n, 3)) * [0, 1, 1]
    Y = H @ [0.5, 1.0, -1.0] + rng.normal(size=n) * (1 + np.abs(z[:, 0]))
    res = iv_moments(H, H_bar, Y)
    V = res.V_beta
    assert np.max(np.abs(V - V.T)) < 1e-10
    assert np.linalg.eigvalsh(V).min() > -1e-10
    beta = np.linalg.solve(H_bar.T @ H, H_bar.T @ Y)
    bread = np.linalg.inv(H_bar.T @ H_bar)
    meat = H_bar.T @ np.diag((H @ beta - Y) ** 2) @ H_bar
    np.testing.assert_allclose(V, bread @ meat @ bread, rtol=1e-10)


def test_sandwich_with_constant_residuals():
    # duplicated rows with residuals +s and -s keep H'r = 0, so every squared residual is s^2
    rng = np.random.default_rng(4)
    half = np.column_stack([np.ones(25), rng.normal(size=(25, 2))])
    H = np.vstack([half, half])
    s = 0.7
    Y = H @ [1.0, 2.0, 3.0] + np.concatenate([np.full(25, s), np.full(25, -s)])
    res = iv_moments(H, H, Y)
    np.testing.assert_allclose(res.beta_hat, [1.0, 2.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(res.V_beta, s ** 2 * np.linalg.inv(H.T @ H), atol=1e-8)


def test_ill_conditioned_moments_raise_without_ridge():
    n = 100
    col = np.random.default_rng(5).normal(size=n)
    H = np.column_stack([np.ones(n), col, col])
    with pytest.raises(ConditioningError) as err:
        iv_moments(H, H, col, ridge=False)
    assert err.value.condition_number > 1e10
    res = iv_moments(H, H, col, ridge=True)
    assert res.ridge > 0 and np.all(np.isfinite(res.beta_hat))


def test_too_few_leftout_rows():
    H = np.ones((3, 3))
    with pytest.raises(ParameterError):
        iv_moments(H, H, np.zeros(3))


def test_zero_covariance_gives_zero_width_and_basis_picks_diagonal():
    omodel = small_net()
    k = omodel.n_features + 1
    zero = SplitInferenceResult(np.ones(k), np.zeros((k, k)), 100, 1.0)
    _, half = counterfactual_ci(zero, omodel, [0.3, 0.7], np.zeros((2, 1)))
    np.testing.assert_array_equal(half, 0.0)
    A = np.random.default_rng(6).normal(size=(k, k))
    res = SplitInferenceResult(np.ones(k), A @ A.T, 100, 1.0)
    for j in range(k):
        _, h = _linear_ci(res, np.eye(k)[j:j + 1], 0.95)
        assert h[0] == pytest.approx(norm.ppf(0.975) * np.sqrt(res.V_beta[j, j]), rel=1e-12)


def test_negative_variance_is_reported():
    omodel = linear_outcome()
    res = SplitInferenceResult(np.zeros(2), -np.eye(2), 10, 1.0)
    with pytest.raises(NumericError):
        counterfactual_ci(res, omodel, [1.0], np.empty((1, 0)))
    with pytest.raises(ParameterError):
        counterfactual_ci(res, omodel, [1.0], np.empty((1, 0)), level=1.0)


def test_split_estimate_recovers_linear_effect_with_point_mass_instruments():
    # first stage knows p exactly, so H_bar == H and the fit is OLS on (1, p)
    rng = np.random.default_rng(7)
    n = 500
    p = rng.normal(size=n)
    data = make_data(p, p[:, None], y=1.0 + 2.0 * p + 0.1 * rng.normal(size=n))
    tmodel = normal_treatment(0.0, 1.0)
    tmodel.network.weights[0][1, 0] = 1.0
    tmodel.network.biases[0][2] = -40.0
    res = split_two_stage(linear_outcome(), tmodel, data, 20, np.random.default_rng(0))
    np.testing.assert_allclose(res.beta_hat, [1.0, 2.0], atol=0.03)
    est, half = contrast_ci(res, linear_outcome(), [2.0], [0.0], np.empty((1, 0)))
    assert abs(est[0] - 4.0) < half[0] + 0.05


# -- dropout posterior --------------------------------------------------------------

def test_posterior_spread_shrinks_as_keep_probability_rises():
    omodel = small_net(seed=8, hidden=(30, 30), keep=0.9)
    p = np.linspace(-1, 1, 15)
    x = np.zeros((15, 1))
    stds = [dropout_posterior_predict(omodel, None, p, x, 400, np.random.default_rng(1), keep_probability=c).std.mean()
            for c in (0.90, 0.95, 0.99)]
    assert stds[0] > stds[1] > stds[2]


def test_posterior_band_vanishes_near_keep_one():
    omodel = small_net(seed=9, hidden=(30, 30), keep=0.999)
    p = np.linspace(-1, 1, 10)
    band = dropout_posterior_predict(omodel, None, p, np.zeros((10, 1)), 300, np.random.default_rng(2))
    scale = np.abs(predict_h(omodel, p, np.zeros((10, 1)))).mean()
    assert np.max(band.upper - band.lower) / 2 < 0.05 * scale


def test_posterior_band_is_ordered_and_deterministic():
    omodel = small_net(seed=10, keep=0.9)
    p = np.linspace(-1, 1, 8)
    a = dropout_posterior_predict(omodel, None, p, np.zeros((1, 1)), 100, np.random.default_rng(3))
    b = dropout_posterior_predict(omodel, None, p, np.zeros((1, 1)), 100, np.random.default_rng(3))
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.lower, b.lower)
    assert np.all(a.lower <= a.mean) and np.all(a.mean <= a.upper)
    assert a.n_draws == 100 and a.keep_probability == 0.9


def test_posterior_requires_dropout_and_matching_stages():
    with pytest.raises(ParameterError):
        dropout_posterior_predict(small_net(keep=1.0), None, [0.0], np.zeros((1, 1)), 5, np.random.default_rng(0))
    tmodel = normal_treatment(n_x=1)
    tmodel.keep_probability = 0.95
    with pytest.raises(ParameterError):
        dropout_posterior_predict(small_net(keep=0.9), tmodel, [0.0], np.zeros((1, 1)), 5, np.random.default_rng(0))


def test_entropy_closed_form():
    assert bernoulli_entropy(0.5) == pytest.approx(np.log(2.0), abs=1e-12)
    assert bernoulli_entropy(0.999) == pytest.approx(0.00791, abs=1e-5)
    assert bernoulli_entropy(1.0) == 0.0


def test_objective_terms():
    nll, pen, ent = vb_objective_terms(0.9, 4.0, 1.25, 10, 0.0)
    assert (nll, pen) == (1.25, 0.0)
    assert ent == pytest.approx(10 * bernoulli_entropy(0.9))
    _, pen, _ = vb_objective_terms(0.9, 4.0, 1.25, 10, 0.5)
    assert pen == pytest.approx(0.9 * 0.5 * 4.0)
    with pytest.raises(ParameterError):
        vb_objective_terms(1.0, 1.0, 1.0, 1, 0.0)
    with pytest.raises(ParameterError):
        vb_objective_terms(0.9, 1.0, 1.0, 1, -1.0)


def test_entropy_term_does_not_depend_on_weights():
    net = small_net(hidden=(7, 4)).network
    k_total = total_layer_inputs(net)
    assert k_total == 2 + 7 + 4
    rng = np.random.default_rng(11)
    terms = [vb_objective_terms(0.95, net.with_vector(net.ravel() + rng.normal(size=net.size)).squared_norm(),
                                1.0, k_total, 1e-3)[2] for _ in range(5)]
    assert len(set(terms)) == 1
