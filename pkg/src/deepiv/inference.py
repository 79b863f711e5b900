"""Uncertainty for the fitted counterfactual function.

Two routes are offered. Split-sample inference freezes both networks, treats
the outcome network's final hidden layer as a basis, and runs a linear IV
regression on left-out rows with the basis at observed treatments as the
endogenous regressors and its conditional expectation under the fitted
treatment distribution as instruments. Dropout inference samples network
realisations from the Bernoulli-masked variational distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .errors import ConditioningError, NumericError, ParameterError
from .outcome import OutcomeModel, SecondStageConfig, final_layer_features, oos_causal_loss, predict_h, train_second_stage
from .treatment import CategoricalParams, FirstStageConfig, TreatmentModel, as_rows, sample_from, train_first_stage

CONDITION_LIMIT = 1e10
RIDGE_SCALE = 1e-8
KEEP_GRID = (0.90, 0.95, 0.99)


@dataclass
class SplitInferenceResult:
    beta_hat: np.ndarray
    V_beta: np.ndarray
    n_leftout: int
    condition_number: float
    ridge: float = 0.0  # diagonal loading applied, 0 when none was needed


@dataclass
class PosteriorBand:
    p: np.ndarray
    x: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    std: np.ndarray
    n_draws: int
    keep_probability: float
    quantiles: tuple[float, float] = (0.025, 0.975)


def compute_eta_bar(omodel: OutcomeModel, tmodel: TreatmentModel, x, z, n_draws: int,
                    rng: np.random.Generator, chunk: int = 1000) -> np.ndarray:
    """Expected final-layer features ``E_F[eta(x, p)]`` per row, leading entry 1."""
    x = as_rows(x, len(omodel.x_names))
    z = as_rows(z, len(tmodel.z_names))
    out = np.empty((len(z), omodel.n_features + 1))
    for start in range(0, len(z), chunk):
        sl = slice(start, start + chunk)
        dist = tmodel.distribution(x[sl], z[sl])
        if isinstance(dist, CategoricalParams):
            draws = np.broadcast_to(dist.categories, dist.probs.shape)
            weights = dist.probs
        else:
            draws = sample_from(dist, n_draws, rng)
            weights = np.full(draws.shape, 1.0 / n_draws)
        k = draws.shape[1]
        feats = final_layer_features(omodel, draws.reshape(-1), np.repeat(x[sl], k, axis=0))
        out[sl] = np.einsum("nk,nkf->nf", weights, feats.reshape(len(draws), k, -1))
    return out


def _regularise(a: np.ndarray, ridge: bool):
    cond = np.linalg.cond(a)
    if np.isfinite(cond) and cond < CONDITION_LIMIT:
        return a, cond, 0.0
    if not ridge:
        raise ConditioningError("moment matrix is ill-conditioned", cond)
    load = RIDGE_SCALE * np.trace(np.abs(a)) / a.shape[0]
    if not load > 0:
        raise ConditioningError("moment matrix is zero", cond)
    return a + load * np.eye(a.shape[0]), cond, load


def iv_moments(H: np.ndarray, H_bar: np.ndarray, Y: np.ndarray, ridge: bool = True) -> SplitInferenceResult:
    """Just-identified IV fit ``(H_bar'H)^-1 H_bar'Y`` with a sandwich covariance.

    The sandwich uses squared residuals ``(H beta - Y)**2`` formed with the
    observed-treatment features ``H`` and instruments ``H_bar`` elsewhere.
    """
    H, H_bar, Y = (np.asarray(a, dtype=np.float64) for a in (H, H_bar, Y))
    if H.shape != H_bar.shape or len(Y) != len(H):
        raise ParameterError("H, H_bar and Y do not line up")
    if len(Y) <= H.shape[1] and H.shape[1] > 1:
        raise ParameterError(f"need more than {H.shape[1]} left-out rows, got {len(Y)}")
    cross, cond, load = _regularise(H_bar.T @ H, ridge)
    beta = np.linalg.solve(cross, H_bar.T @ Y)
    gram, _, load_gram = _regularise(H_bar.T @ H_bar, ridge)
    bread = np.linalg.inv(gram)
    resid = H @ beta - Y
    meat = (H_bar * (resid ** 2)[:, None]).T @ H_bar
    V = bread @ meat @ bread
    V = 0.5 * (V + V.T)
    return SplitInferenceResult(beta, V, len(Y), float(cond), max(load, load_gram))


def split_two_stage(omodel: OutcomeModel, tmodel: TreatmentModel, leftout: Dataset, n_draws: int,
                    rng: np.random.Generator, ridge: bool = True) -> SplitInferenceResult:
    """Left-out IV regression of ``y`` on the outcome network's final-layer basis."""
    H = final_layer_features(omodel, leftout.p, leftout.x)
    H_bar = compute_eta_bar(omodel, tmodel, leftout.x, leftout.z, n_draws, rng)
    return iv_moments(H, H_bar, leftout.y, ridge)


def counterfactual_ci(result: SplitInferenceResult, omodel: OutcomeModel, p, x, level: float = 0.95):
    """Split-sample estimate ``beta' eta(x, p)`` and its Gaussian half-width."""
    if not 0.0 < level < 1.0:
        raise ParameterError(f"level must lie in (0, 1), got {level}")
    eta = final_layer_features(omodel, p, x)
    return _linear_ci(result, eta, level)


def contrast_ci(result: SplitInferenceResult, omodel: OutcomeModel, p1, p0, x, level: float = 0.95):
    """Interval for ``h(p1, x) - h(p0, x)``."""
    if not 0.0 < level < 1.0:
        raise ParameterError(f"level must lie in (0, 1), got {level}")
    d = final_layer_features(omodel, p1, x) - final_layer_features(omodel, p0, x)
    return _linear_ci(result, d, level)


def _linear_ci(result: SplitInferenceResult, rows: np.ndarray, level: float):
    est = rows @ result.beta_hat
    var = np.einsum("ni,ij,nj->n", rows, result.V_beta, rows)
    if np.any(var < -1e-10):
        raise NumericError(f"negative variance {var.min():.3g}")
    half = norm.ppf(0.5 + level / 2.0) * np.sqrt(np.maximum(var, 0.0))
    return est, half


def dropout_posterior_predict(omodel: OutcomeModel, tmodel: TreatmentModel | None, p, x, n_draws: int,
                              rng: np.random.Generator, keep_probability: float | None = None,
                              quantiles: tuple[float, float] = (0.025, 0.975)) -> PosteriorBand:
    """Posterior-predictive band for ``h(p, x)`` from independent dropout realisations.

    ``keep_probability`` overrides the trained value, which lets the same
    weights be examined under different amounts of mask noise. The treatment
    model only enters through the same-keep-probability check: ``h`` at a
    given ``(p, x)`` does not depend on the first-stage weights.
    """
    c = omodel.keep_probability if keep_probability is None else keep_probability
    if not 0.5 <= c < 1.0:
        raise ParameterError(f"dropout inference needs keep probability in [0.5, 1), got {c}")
    if tmodel is not None and keep_probability is None and tmodel.keep_probability != omodel.keep_probability:
        raise ParameterError("treatment and outcome networks were trained with different keep probabilities")
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    x = as_rows(x, len(omodel.x_names))
    if len(x) == 1 and len(p) > 1:
        x = np.repeat(x, len(p), axis=0)
    draws = np.empty((n_draws, len(p)))
    for d in range(n_draws):
        masks = omodel.sample_masks(None, rng, c)
        draws[d] = predict_h(omodel, p, x, masks)
    lo, hi = np.quantile(draws, quantiles, axis=0)
    return PosteriorBand(p, x, draws.mean(axis=0), np.minimum(lo, draws.mean(axis=0)),
                         np.maximum(hi, draws.mean(axis=0)), draws.std(axis=0), n_draws, c, tuple(quantiles))


def bernoulli_entropy(c: float) -> float:
    """``-(c log c + (1 - c) log(1 - c))``."""
    if c <= 0.0 or c >= 1.0:
        return 0.0
    return float(-(c * np.log(c) + (1.0 - c) * np.log1p(-c)))


def total_layer_inputs(params) -> int:
    """Sum of input widths over all layers, the count multiplying the entropy term."""
    return int(sum(w.shape[1] for w in params.weights))


def vb_objective_terms(c: float, omega_sq_norm: float, mean_nll: float, k_total: int, lam: float):
    """``(nll, c * lam * ||Omega||^2, K * ent(c))``; the KL objective is ``nll + penalty - entropy``."""
    if not 0.5 <= c < 1.0:
        raise ParameterError(f"keep probability must lie in [0.5, 1), got {c}")
    if lam < 0:
        raise ParameterError("lambda must be >= 0")
    return float(mean_nll), float(c * lam * omega_sq_norm), float(k_total * bernoulli_entropy(c))


def tune_keep_probability(train: Dataset, holdout: Dataset, first: FirstStageConfig, second: SecondStageConfig,
                          grid=KEEP_GRID, eval_draws: int = 500, seed: int = 0):
    """Train both stages at each keep probability and score the held-out causal loss.

    Returns ``(best_c, {c: loss}, {c: (tmodel, omodel)})``.
    """
    losses, models = {}, {}
    for c in grid:
        tmodel = train_first_stage(train, replace(first, keep_probability=c))
        omodel = train_second_stage(train, tmodel, replace(second, keep_probability=c))
        losses[c] = oos_causal_loss(omodel, tmodel, holdout, eval_draws, np.random.default_rng(seed))
        models[c] = (tmodel, omodel)
    best = min(losses, key=losses.get)
    return best, losses, models
