import numpy as np
import pytest
from scipy.stats import norm

from deepiv.core import ParameterSet, backward, init_params, mlp_forward
from deepiv.errors import DomainError, NumericError, ParameterError, StreamReuseError
from deepiv.outcome import (
    OutcomeModel,
    SecondStageConfig,
    check_independent_streams,
    draw_streams,
    exact_integral_loss,
    final_layer_features,
    mc_two_sample_gradient,
    oos_causal_loss,
    output_coefficients,
    predict_h,
    shared_draw_gradient,
    train_regression,
    train_second_stage,
)
from deepiv.treatment import FirstStageConfig, TreatmentModel, train_first_stage
from helpers import linear_outcome, make_data, normal_treatment


def random_outcome(seed, hidden=(4,), n_x=0, act="tanh"):
    rng = np.random.default_rng(seed)
    net = init_params([1 + n_x, *hidden, 1], rng, act)
    return OutcomeModel(net, [f"x{i}" for i in range(n_x)], np.zeros(n_x), np.ones(n_x),
                        p_mean=0.3, p_std=1.7, y_mean=0.5, y_std=2.0)


# -- prediction -----------------------------------------------------------------

def test_zero_weights_predict_output_bias():
    model = random_outcome(0, n_x=2)
    model.network = model.network.zeros_like()
    model.network.biases[-1][:] = 0.25
    x = np.random.default_rng(1).normal(size=(6, 2))
    np.testing.assert_allclose(predict_h(model, np.linspace(-3, 3, 6), x), 0.5 + 2.0 * 0.25)


def test_all_ones_masks_equal_no_masks():
    model = random_outcome(1, hidden=(5, 3), n_x=1)
    p, x = np.linspace(0, 1, 4), np.ones((4, 1))
    ones = [np.ones(5), np.ones(3)]
    np.testing.assert_array_equal(predict_h(model, p, x, ones), predict_h(model, p, x))


def test_point_estimate_network_scales_hidden_outputs_by_c():
    model = random_outcome(2, hidden=(5,))
    model.keep_probability = 0.9
    p = np.linspace(-1, 1, 3)
    np.testing.assert_allclose(predict_h(model, p, np.empty((3, 0))),
                               predict_h(model, p, np.empty((3, 0)), [0.9]), atol=0)


def test_single_covariate_row_broadcasts():
    model = random_outcome(3, n_x=2)
    x = np.array([0.1, -0.2])
    p = np.array([0.0, 1.0, 2.0])
    np.testing.assert_allclose(predict_h(model, p, x), predict_h(model, p, np.tile(x, (3, 1))))


def test_fits_noiseless_line():
    rng = np.random.default_rng(4)
    p = rng.uniform(-2, 2, 2000)
    data = make_data(p, np.zeros((2000, 1)), y=2.0 * p)
    model = train_regression(data, SecondStageConfig(hidden=(10,), epochs=200, validation_fraction=0.0, seed=1))
    probe = np.linspace(-1.8, 1.8, 25)
    np.testing.assert_allclose(predict_h(model, probe, np.empty((25, 0))), 2.0 * probe, atol=0.05)


# -- features -------------------------------------------------------------------

def test_prediction_identity_on_features():
    model = random_outcome(5, hidden=(6, 4), n_x=2)
    rng = np.random.default_rng(0)
    p, x = rng.normal(size=100), rng.normal(size=(100, 2))
    feats = final_layer_features(model, p, x)
    assert feats.shape == (100, 5) and np.all(feats[:, 0] == 1.0)
    assert np.max(np.abs(feats @ output_coefficients(model) - predict_h(model, p, x))) < 1e-10


def test_prediction_identity_with_keep_probability():
    model = random_outcome(6, hidden=(6,), n_x=1)
    model.keep_probability = 0.95
    p, x = np.linspace(-1, 1, 7), np.zeros((7, 1))
    assert np.max(np.abs(final_layer_features(model, p, x) @ output_coefficients(model)
                         - predict_h(model, p, x))) < 1e-10


def test_zero_relu_network_features():
    net = init_params([2, 3, 1], np.random.default_rng(0), "relu")
    net = net.zeros_like()
    model = OutcomeModel(net, ["x0"], np.zeros(1), np.ones(1))
    np.testing.assert_array_equal(final_layer_features(model, [0.0], [[0.0]]), [[1, 0, 0, 0]])


def test_duplicate_inputs_give_identical_features():
    model = random_outcome(7, n_x=1)
    feats = final_layer_features(model, [0.4, 0.4], [[1.0], [1.0]])
    assert np.array_equal(feats[0], feats[1])


# -- exact integral loss --------------------------------------------------------

def test_exact_loss_balanced_residual():
    model = linear_outcome(2.0, -1.0)  # h(1) = 1, h(2) = 3
    rep = exact_integral_loss(model, [[0.5, 0.5]], [1.0, 2.0], np.empty((1, 0)), [2.0])
    assert rep.residuals[0] == 0.0 and rep.loss == 0.0


def test_exact_loss_point_mass_is_squared_error():
    model = random_outcome(8)
    y = np.array([1.3])
    rep = exact_integral_loss(model, [[1.0, 0.0]], [0.7, 5.0], np.empty((1, 0)), y)
    h = predict_h(model, [0.7], np.empty((1, 0)))
    assert rep.loss == pytest.approx(float((y - h)[0] ** 2), rel=1e-14)


def test_exact_loss_hand_gradient():
    model = linear_outcome(2.0)
    rep = exact_integral_loss(model, [[0.5, 0.5]], [1.0, 2.0], np.empty((1, 0)), [3.0])
    assert rep.residuals[0] == 0.0
    assert rep.gradient.weights[0][0, 0] == 0.0
    rep = exact_integral_loss(model, [[0.5, 0.5]], [1.0, 2.0], np.empty((1, 0)), [4.0])
    # residual 1, mean treatment 1.5
    assert rep.gradient.weights[0][0, 0] == pytest.approx(-2.0 * 1.0 * 1.5)


def test_exact_loss_category_mismatch():
    with pytest.raises(DomainError):
        exact_integral_loss(linear_outcome(), [[0.5, 0.5]], [1.0, 2.0, 3.0], np.empty((1, 0)), [0.0])


def test_exact_gradient_matches_weighted_sum_of_backward_passes():
    rng = np.random.default_rng(9)
    model = random_outcome(9, hidden=(5, 3), n_x=1)
    n, cats = 6, np.array([-1.0, 0.5, 2.0])
    probs = rng.dirichlet(np.ones(3), size=n)
    x, y = rng.normal(size=(n, 1)), rng.normal(size=n)
    rep = exact_integral_loss(model, probs, cats, x, y)
    h = np.column_stack([predict_h(model, np.full(n, c), x) for c in cats])
    resid = y - np.sum(probs * h, axis=1)
    total = model.network.zeros_like()
    for k, c in enumerate(cats):
        _, tape = mlp_forward(model.network, model.inputs(np.full(n, c), x))
        g = backward(tape, ((-2.0 / n) * resid * probs[:, k] * model.y_std)[:, None])
        for a, b in zip(total.arrays(), g.arrays()):
            a += b
    np.testing.assert_allclose(rep.gradient.ravel(), total.ravel(), rtol=0, atol=1e-10)


# -- Monte-Carlo gradients ------------------------------------------------------

def replicated(n):
    return np.empty((n, 0)), np.zeros((n, 1)), np.zeros(n)


def test_two_draw_gradient_is_unbiased_on_linear_example():
    n = 100_000
    x, z, y = replicated(n)
    rep = mc_two_sample_gradient(linear_outcome(1.0), normal_treatment(1.0, 1.0), x, z, y, 1,
                                 draw_streams(0, 0, 0), per_observation=True)
    g = rep.gradient.weights[0][:, 0, 0]
    se = g.std(ddof=1) / np.sqrt(n)
    assert abs(g.mean() - 2.0) < 3 * se


def test_shared_draw_gradient_is_biased_towards_four():
    n = 100_000
    x, z, y = replicated(n)
    rep = shared_draw_gradient(linear_outcome(1.0), normal_treatment(1.0, 1.0), x, z, y,
                               np.random.default_rng(1), per_observation=True)
    g = rep.gradient.weights[0][:, 0, 0]
    se = g.std(ddof=1) / np.sqrt(n)
    assert abs(g.mean() - 2.0) > 5 * se
    assert abs(g.mean() - 4.0) < 4 * se


def test_point_mass_two_draw_matches_squared_error_gradient():
    model = random_outcome(10, n_x=1)
    tmodel = normal_treatment(1.5, 1.0, n_x=1)
    tmodel.sigma_floor = 1e-9
    tmodel.network.biases[0][2] = -40.0  # scale -> floor
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(5, 1)), rng.normal(size=5)
    z = np.zeros((5, 1))
    mc = mc_two_sample_gradient(model, tmodel, x, z, y, 1, draw_streams(3, 0, 0))
    exact = exact_integral_loss(model, np.ones((5, 1)), [1.5], x, y)
    np.testing.assert_allclose(mc.gradient.ravel(), exact.gradient.ravel(), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_two_draw_mean_matches_discretised_exact_gradient(seed):
    model = random_outcome(100 + seed, hidden=(3,))
    mu, sigma, y0 = 0.5, 0.8, 1.0
    tmodel = normal_treatment(mu, sigma)
    grid = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 10_000)
    w = norm.pdf(grid, mu, sigma)
    w /= w.sum()
    exact = exact_integral_loss(model, w[None, :], grid, np.empty((1, 0)), [y0]).gradient.ravel()
    n = 100_000
    x, z, _ = replicated(n)
    rep = mc_two_sample_gradient(model, tmodel, x, z, np.full(n, y0), 1, draw_streams(seed, 0, 0),
                                 per_observation=True)
    g = np.column_stack([a.reshape(n, -1) for a in rep.gradient.arrays()])
    se = g.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(g.mean(axis=0) - exact) < 3 * se + 1e-12)


@pytest.mark.parametrize("m", [4, 16])
def test_spreading_draws_over_observations_lowers_variance(m):
    """M observations with one two-draw gradient each versus M draws on one observation."""
    reps = 20_000
    rng = np.random.default_rng(m)
    model, tmodel = linear_outcome(1.0), normal_treatment(1.0, 1.0)
    y_pool = rng.normal(size=(reps, m))
    # budget 2M network passes each
    spread = mc_two_sample_gradient(model, tmodel, np.empty((reps * m, 0)), np.zeros((reps * m, 1)),
                                    y_pool.ravel(), 1, draw_streams(1, m, 0), per_observation=True)
    spread = spread.gradient.weights[0][:, 0, 0].reshape(reps, m).mean(axis=1)
    pick = y_pool[:, 0]
    deep = mc_two_sample_gradient(model, tmodel, np.empty((reps, 0)), np.zeros((reps, 1)), pick, m,
                                  draw_streams(2, m, 0), per_observation=True)
    deep = deep.gradient.weights[0][:, 0, 0]
    assert spread.var() <= deep.var()


def test_shared_stream_is_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(StreamReuseError):
        mc_two_sample_gradient(linear_outcome(), normal_treatment(), *replicated(3), 1, (rng, rng))


def test_identically_seeded_streams_are_rejected():
    with pytest.raises(StreamReuseError):
        check_independent_streams(np.random.default_rng(5), np.random.default_rng(5))
    a, b = draw_streams(1, 2, 3)
    check_independent_streams(a, b)


def test_gradient_is_reproducible():
    model, tmodel = random_outcome(11), normal_treatment(0.0, 1.0)
    args = (model, tmodel, *replicated(10), 2)
    a = mc_two_sample_gradient(*args, draw_streams(4, 1, 2)).gradient.ravel()
    b = mc_two_sample_gradient(*args, draw_streams(4, 1, 2)).gradient.ravel()
    assert np.array_equal(a, b)


def test_zero_draws_rejected():
    with pytest.raises(ParameterError):
        mc_two_sample_gradient(linear_outcome(), normal_treatment(), *replicated(3), 0, draw_streams(0, 0, 0))


# -- causal validation ----------------------------------------------------------

def test_oracle_causal_loss_is_conditional_variance():
    """With h(p) = p and p ~ N(1, 1) given z, E[y | z] = 1 + 0 and residual variance is 1."""
    rng = np.random.default_rng(12)
    n = 5000
    y = 1.0 + rng.normal(size=n)
    holdout = make_data(np.zeros(n), np.zeros((n, 1)), y=y)
    loss = oos_causal_loss(linear_outcome(1.0), normal_treatment(1.0, 1.0), holdout, 500, rng)
    assert loss == pytest.approx(1.0, abs=0.05)


def test_duplicated_holdout_gives_identical_loss():
    rng = np.random.default_rng(13)
    tmodel = TreatmentModel(ParameterSet([rng.normal(size=(2, 1))], [np.zeros(2)], ["identity"]),
                            "categorical", 2, [], ["z0"], np.zeros(1), np.ones(1), categories=np.array([0.0, 1.0]))
    holdout = make_data(np.zeros(50), rng.normal(size=(50, 1)), y=rng.normal(size=50))
    doubled = holdout.subset(np.tile(np.arange(50), 2))
    model = random_outcome(13)
    assert oos_causal_loss(model, tmodel, doubled) == pytest.approx(oos_causal_loss(model, tmodel, holdout),
                                                                    rel=1e-14)


def test_causal_loss_needs_enough_draws():
    holdout = make_data(np.zeros(5), np.zeros((5, 1)))
    with pytest.raises(ParameterError):
        oos_causal_loss(linear_outcome(), normal_treatment(), holdout, 50)


# -- training -------------------------------------------------------------------

@pytest.fixture(scope="module")
def exogenous_fit():
    rng = np.random.default_rng(14)
    n = 5000
    z = rng.normal(size=n)
    p = z + 0.5 * rng.normal(size=n)
    y = 2.0 * p + 0.5 * rng.normal(size=n)
    data = make_data(p, z[:, None], y=y)
    tmodel = train_first_stage(data, FirstStageConfig(n_components=3, hidden=(16,), epochs=40, seed=0))
    omodel = train_second_stage(data, tmodel, SecondStageConfig(hidden=(16,), epochs=60, seed=0))
    return data, tmodel, omodel


def test_recovers_slope_on_exogenous_line(exogenous_fit):
    _, _, omodel = exogenous_fit
    probe = np.linspace(-1.0, 1.0, 21)
    h = predict_h(omodel, probe, np.empty((21, 0)))
    slope = np.gradient(h, probe)
    assert np.all(np.abs(slope - 2.0) < 0.2)
    assert omodel.metadata["epochs_run"] == len(omodel.metadata["train_loss"])


def test_trained_optimum_is_local_minimum_of_causal_loss(exogenous_fit):
    data, tmodel, omodel = exogenous_fit
    holdout = data.subset(np.arange(1000))

    def loss(model):
        return oos_causal_loss(model, tmodel, holdout, 100, np.random.default_rng(0))

    base = loss(omodel)
    rng = np.random.default_rng(1)
    vec = omodel.network.ravel()
    worse = 0
    for _ in range(100):
        d = rng.normal(size=vec.size)
        d *= 0.5 / np.linalg.norm(d)
        probe = OutcomeModel(**{**omodel.__dict__, "network": omodel.network.with_vector(vec + d)})
        worse += loss(probe) > base
    assert worse >= 95


def test_constant_outcome_is_fitted_flat():
    rng = np.random.default_rng(15)
    n = 2000
    z = rng.normal(size=n)
    data = make_data(z + rng.normal(size=n), z[:, None], y=np.full(n, 7.0))
    tmodel = train_first_stage(data, FirstStageConfig(n_components=2, hidden=(8,), epochs=5, seed=0))
    omodel = train_second_stage(data, tmodel, SecondStageConfig(hidden=(8,), epochs=40, seed=0))
    probe = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(predict_h(omodel, probe, np.empty((13, 0))), 7.0, atol=0.05)


def test_irrelevant_instrument_shrinks_policy_effect():
    rng = np.random.default_rng(16)
    n = 4000
    e = rng.normal(size=n)
    p = e + 0.5 * rng.normal(size=n)  # confounded, z carries nothing
    y = 2.0 * p + 3.0 * e
    data = make_data(p, rng.normal(size=(n, 1)), y=y)
    tmodel = train_first_stage(data, FirstStageConfig(n_components=2, hidden=(8,), epochs=20, seed=0))
    omodel = train_second_stage(data, tmodel, SecondStageConfig(hidden=(8,), epochs=20, seed=0))
    ffnet = train_regression(data, SecondStageConfig(hidden=(8,), epochs=20, seed=0))
    probe = np.linspace(-1.5, 1.5, 13)
    none = np.empty((13, 0))
    assert np.ptp(predict_h(omodel, probe, none)) < np.ptp(predict_h(ffnet, probe, none))


def test_training_is_reproducible():
    rng = np.random.default_rng(17)
    n = 300
    z = rng.normal(size=n)
    data = make_data(z + rng.normal(size=n), z[:, None], y=rng.normal(size=n))
    tmodel = train_first_stage(data, FirstStageConfig(n_components=2, hidden=(4,), epochs=2, seed=0))
    cfg = SecondStageConfig(hidden=(4,), epochs=2, keep_probability=0.9, seed=3)
    a = train_second_stage(data, tmodel, cfg).network.ravel()
    b = train_second_stage(data, tmodel, cfg).network.ravel()
    assert np.array_equal(a, b)


def test_categorical_treatment_uses_exact_gradient():
    rng = np.random.default_rng(18)
    n = 5000
    z = rng.normal(size=n)
    p = (z + 0.5 * rng.normal(size=n) > 0).astype(float)
    y = 3.0 * p + rng.normal(size=n)
    data = make_data(p, z[:, None], y=y)
    tmodel = train_first_stage(data, FirstStageConfig(head="categorical", hidden=(8,), epochs=20, seed=0))
    omodel = train_second_stage(data, tmodel, SecondStageConfig(hidden=(8,), epochs=60, seed=0))
    effect = np.diff(predict_h(omodel, [0.0, 1.0], np.empty((2, 0))))[0]
    assert effect == pytest.approx(3.0, abs=0.3)
    with pytest.raises(ParameterError):
        train_second_stage(data, normal_treatment(), SecondStageConfig(mode="exact", epochs=1))


def test_vb_mode_needs_matching_keep_probability():
    data = make_data(np.zeros(30), np.zeros((30, 1)))
    with pytest.raises(ParameterError):
        train_second_stage(data, normal_treatment(), SecondStageConfig(vb=True, keep_probability=0.9, epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_reports_epoch_and_batch():
    n = 100
    data = make_data(np.zeros(n), np.zeros((n, 1)), y=np.where(np.arange(n) == 3, np.inf, 0.0))
    with pytest.raises(NumericError, match=r"epoch \d+, batch \d+"):
        train_second_stage(data, normal_treatment(), SecondStageConfig(epochs=1, validation_fraction=0.0))
