"""Second stage: the outcome network ``h(p, x)`` trained against the integral loss.

The loss for one observation is ``(y - E_F[h(p, x)])**2`` with ``F`` the fitted
treatment distribution. For categorical treatments the expectation is an exact
weighted sum; otherwise each gradient uses two independent sets of treatment
draws, one per expectation, which keeps the stochastic gradient unbiased.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AdamState,
    ParameterSet,
    adam_step,
    add_weight_decay,
    backward,
    child_rng,
    expected_masks,
    init_params,
    minibatches,
    mlp_forward,
    sample_dropout_masks,
)
from .data import Dataset
from .errors import ConfigError, DomainError, NumericError, ParameterError, StreamReuseError
from .treatment import (
    CategoricalParams,
    TreatmentModel,
    _check_common,
    as_rows,
    category_index,
    sample_from,
)

log = logging.getLogger(__name__)


@dataclass
class OutcomeModel:
    network: ParameterSet
    x_names: list[str]
    x_mean: np.ndarray
    x_std: np.ndarray
    p_mean: float = 0.0
    p_std: float = 1.0
    y_mean: float = 0.0
    y_std: float = 1.0
    keep_probability: float = 1.0
    metadata: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        """Width of the final hidden layer, K_L."""
        return self.network.weights[-1].shape[1]

    def inputs(self, p, x) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        x = as_rows(x, len(self.x_names))
        if len(x) == 1 and len(p) > 1:
            x = np.repeat(x, len(p), axis=0)
        if len(x) != len(p):
            raise ParameterError(f"{len(p)} treatment values for {len(x)} covariate rows")
        p_std = (p - self.p_mean) / self.p_std
        return np.hstack([p_std[:, None], (x - self.x_mean) / self.x_std])

    def point_masks(self):
        return expected_masks(self.network, self.keep_probability)

    def sample_masks(self, n_rows: int | None, rng: np.random.Generator, keep_probability: float | None = None):
        c = self.keep_probability if keep_probability is None else keep_probability
        return sample_dropout_masks(self.network.hidden_widths, c, rng, n_rows)


@dataclass
class IntegralLossReport:
    residuals: np.ndarray  # y_t minus the integral estimate
    loss: float  # mean squared residual
    n_draws: int
    gradient: ParameterSet | None = None


def _net(model: OutcomeModel, params: ParameterSet, inputs: np.ndarray, masks):
    if masks is None:
        masks = expected_masks(params, model.keep_probability)
    return mlp_forward(params, inputs, masks)


def predict_h(model: OutcomeModel, p, x, masks=None) -> np.ndarray:
    """Counterfactual prediction ``h(p, x)`` in outcome units."""
    out, _ = _net(model, model.network, model.inputs(p, x), masks)
    return model.y_mean + model.y_std * out[:, 0]


def final_layer_features(model: OutcomeModel, p, x) -> np.ndarray:
    """Rows ``[1, eta_1, ..., eta_KL]`` of final-hidden-layer activations (point-estimate network)."""
    inputs = model.inputs(p, x)
    params = model.network
    if params.n_layers == 1:
        eta = inputs
    else:
        _, tape = _net(model, params, inputs, None)
        eta = tape.inputs[-1]
    return np.hstack([np.ones((len(eta), 1)), eta])


def output_coefficients(model: OutcomeModel) -> np.ndarray:
    """Output layer in outcome units, so ``predict_h == features @ coefficients``."""
    w, b = model.network.weights[-1], model.network.biases[-1]
    return np.concatenate([[model.y_mean + model.y_std * b[0]], model.y_std * w[0]])


def _expand_masks(masks, repeat: int):
    """Repeat per-observation masks for each of ``repeat`` draws."""
    if masks is None:
        return None
    items = masks.masks if hasattr(masks, "masks") else masks
    return [m if m is None or np.ndim(m) < 2 else np.repeat(m, repeat, axis=0) for m in items]


def _draw_inputs(model: OutcomeModel, draws: np.ndarray, x: np.ndarray) -> np.ndarray:
    n, b = draws.shape
    return model.inputs(draws.reshape(-1), np.repeat(as_rows(x, len(model.x_names)), b, axis=0))


def exact_integral_loss(model: OutcomeModel, probs, categories, x, y, masks=None,
                        params: ParameterSet | None = None) -> IntegralLossReport:
    """Exact integral loss and gradient for a discrete treatment distribution.

    ``probs`` is (n, K) over ``categories``; the gradient is
    ``-2/n sum_t r_t sum_k pi_tk dh(p^k, x_t)/dtheta``.
    """
    params = model.network if params is None else params
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    categories = np.asarray(categories, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, k = probs.shape
    if k != len(categories):
        raise DomainError(f"{k} probabilities for {len(categories)} categories")
    draws = np.broadcast_to(categories, (n, k))
    out, tape = _net(model, params, _draw_inputs(model, draws, x), _expand_masks(masks, k))
    h = model.y_mean + model.y_std * out[:, 0].reshape(n, k)
    resid = y - np.sum(probs * h, axis=1)
    g_out = (-2.0 / n) * resid[:, None] * probs * model.y_std
    grad = backward(tape, g_out.reshape(-1, 1))
    return IntegralLossReport(resid, float(np.mean(resid ** 2)), k, grad)


def draw_streams(seed: int, epoch: int, batch: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Two independent generators for the two integrals of one gradient."""
    return child_rng(seed, 2, epoch, batch, 0), child_rng(seed, 2, epoch, batch, 1)


def _stream_key(rng: np.random.Generator):
    seq = getattr(rng.bit_generator, "seed_seq", None)
    if seq is None or not hasattr(seq, "entropy"):
        return None
    return (repr(seq.entropy), tuple(seq.spawn_key))


def check_independent_streams(rng_a: np.random.Generator, rng_b: np.random.Generator) -> None:
    if rng_a is rng_b or rng_a.bit_generator is rng_b.bit_generator:
        raise StreamReuseError("both integrals would consume the same random stream")
    key_a, key_b = _stream_key(rng_a), _stream_key(rng_b)
    if key_a is not None and key_a == key_b:
        raise StreamReuseError("both integrals were seeded identically")


def mc_two_sample_gradient(
    model: OutcomeModel,
    tmodel: TreatmentModel,
    x, z, y,
    n_draws: int,
    streams: tuple[np.random.Generator, np.random.Generator],
    theta_masks=None,
    phi_masks=None,
    per_observation: bool = False,
    params: ParameterSet | None = None,
) -> IntegralLossReport:
    """Unbiased Monte-Carlo gradient of the integral loss.

    ``streams[0]`` feeds the draws inside the residual, ``streams[1]`` the draws
    inside the derivative; they must be distinct generators. Per-observation
    dropout masks (``theta_masks``, ``phi_masks``) are shared by both draw sets
    so one network realisation is used per gradient.
    """
    if n_draws < 1:
        raise ParameterError("n_draws must be >= 1")
    rng_dot, rng_ddot = streams
    check_independent_streams(rng_dot, rng_ddot)
    params = model.network if params is None else params
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = len(y)
    dist = tmodel.distribution(x, z, phi_masks)
    dot = sample_from(dist, n_draws, rng_dot)
    ddot = sample_from(dist, n_draws, rng_ddot)
    masks = _expand_masks(theta_masks, n_draws)
    out_dot, _ = _net(model, params, _draw_inputs(model, dot, x), masks)
    h_dot = model.y_mean + model.y_std * out_dot[:, 0].reshape(n, n_draws)
    resid = y - h_dot.mean(axis=1)
    _, tape = _net(model, params, _draw_inputs(model, ddot, x), masks)
    scale = 1.0 if per_observation else 1.0 / n
    g_out = np.repeat(-2.0 * scale * resid * model.y_std / n_draws, n_draws)
    grad = backward(tape, g_out[:, None], per_example=per_observation)
    if per_observation and n_draws > 1:
        grad.weights = [g.reshape(n, n_draws, *g.shape[1:]).sum(axis=1) for g in grad.weights]
        grad.biases = [g.reshape(n, n_draws, *g.shape[1:]).sum(axis=1) for g in grad.biases]
    return IntegralLossReport(resid, float(np.mean(resid ** 2)), n_draws, grad)


def shared_draw_gradient(model: OutcomeModel, tmodel: TreatmentModel, x, z, y,
                         rng: np.random.Generator, per_observation: bool = False) -> IntegralLossReport:
    """Single-draw gradient reusing the same draw in both factors.

    Biased whenever the residual and the derivative co-vary under ``F``; kept
    only to demonstrate why :func:`mc_two_sample_gradient` needs two streams.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = len(y)
    draws = sample_from(tmodel.distribution(x, z), 1, rng)
    out, tape = _net(model, model.network, _draw_inputs(model, draws, x), None)
    resid = y - (model.y_mean + model.y_std * out[:, 0])
    scale = 1.0 if per_observation else 1.0 / n
    grad = backward(tape, (-2.0 * scale * resid * model.y_std)[:, None], per_example=per_observation)
    return IntegralLossReport(resid, float(np.mean(resid ** 2)), 1, grad)


def integral_estimate(model: OutcomeModel, tmodel: TreatmentModel, x, z, n_draws: int,
                      rng: np.random.Generator, chunk: int = 2000) -> np.ndarray:
    """``E_F[h(p, x)]`` per row: exact for categorical heads, else an ``n_draws`` MC mean."""
    x = as_rows(x, len(model.x_names))
    z = as_rows(z, len(tmodel.z_names))
    out = np.empty(len(z))
    for start in range(0, len(z), chunk):
        sl = slice(start, start + chunk)
        dist = tmodel.distribution(x[sl], z[sl])
        if isinstance(dist, CategoricalParams):
            draws = np.broadcast_to(dist.categories, dist.probs.shape)
            h = predict_h(model, draws.reshape(-1), np.repeat(x[sl], draws.shape[1], axis=0))
            out[sl] = np.sum(dist.probs * h.reshape(draws.shape), axis=1)
        else:
            draws = sample_from(dist, n_draws, rng)
            h = predict_h(model, draws.reshape(-1), np.repeat(x[sl], n_draws, axis=0))
            out[sl] = h.reshape(draws.shape).mean(axis=1)
    return out


def oos_causal_loss(model: OutcomeModel, tmodel: TreatmentModel, holdout: Dataset,
                    n_draws: int = 500, rng: np.random.Generator | None = None) -> float:
    """Mean held-out ``(y - E_F[h(p, x)])**2``."""
    if tmodel.head == "mixture" and n_draws < 100:
        raise ParameterError("Monte-Carlo evaluation needs at least 100 draws")
    rng = np.random.default_rng(0) if rng is None else rng
    fitted = integral_estimate(model, tmodel, holdout.x, holdout.z, n_draws, rng)
    return float(np.mean((holdout.y - fitted) ** 2))


@dataclass
class SecondStageConfig:
    hidden: tuple[int, ...] = (50,)
    activation: str = "tanh"
    epochs: int = 50
    batch_size: int = 100
    learning_rate: float = 3e-3
    n_draws: int = 1  # B, draws per integral in each gradient
    eval_draws: int = 500
    validation_draws: int = 100
    keep_probability: float = 1.0
    weight_decay: float = 0.0
    validation_fraction: float = 0.1
    patience: int = 30
    lr_decay: float = 1.0  # multiplier applied after decay_patience stale epochs
    decay_patience: int = 5
    mode: str = "auto"  # auto | exact | mc
    vb: bool = False
    seed: int = 0

    def validate(self, prefix: str = "second_stage") -> "SecondStageConfig":
        _check_common(self, prefix)
        if self.n_draws < 1:
            raise ConfigError(f"{prefix}.n_draws", "must be >= 1")
        if self.eval_draws < 100:
            raise ConfigError(f"{prefix}.eval_draws", "must be >= 100")
        if self.validation_draws < 1:
            raise ConfigError(f"{prefix}.validation_draws", "must be >= 1")
        if self.mode not in ("auto", "exact", "mc"):
            raise ConfigError(f"{prefix}.mode", f"must be auto, exact or mc, got {self.mode!r}")
        return self


def _new_model(data: Dataset, hidden, activation, keep, seed, p_mean, p_std) -> OutcomeModel:
    x_mean = data.x.mean(axis=0)
    x_std = data.x.std(axis=0)
    x_std = np.where(x_std > 0, x_std, 1.0)
    y_std = float(data.y.std())
    widths = [1 + data.x.shape[1], *hidden, 1]
    return OutcomeModel(
        network=init_params(widths, child_rng(seed, 0), activation),
        x_names=list(data.x_names), x_mean=x_mean, x_std=x_std,
        p_mean=p_mean, p_std=p_std, y_mean=float(data.y.mean()),
        y_std=y_std if y_std > 0 else 1.0, keep_probability=keep,
    )


def _fit(model: OutcomeModel, train: Dataset, valid: Dataset | None, config, gradient_fn, valid_fn, label: str):
    """Shared Adam loop with early stopping on ``valid_fn``."""
    params = model.network
    state = AdamState.for_params(params, lr=config.learning_rate)
    rng = child_rng(config.seed, 1)
    decay = config.keep_probability * config.weight_decay
    trace, val_trace = [], []
    best, best_val, stale = params.copy(), np.inf, 0
    for epoch in range(config.epochs):
        losses = []
        for b, idx in enumerate(minibatches(len(train), config.batch_size, rng)):
            report = gradient_fn(params, idx, epoch, b)
            if not np.isfinite(report.loss):
                raise NumericError(f"non-finite {label} loss at epoch {epoch}, batch {b}")
            adam_step(state, params, add_weight_decay(report.gradient, params, decay))
            losses.append(report.loss)
        trace.append(float(np.mean(losses)))
        if valid is None:
            best = params.copy()
            continue
        val = valid_fn()
        val_trace.append(val)
        if val < best_val:
            best_val, best, stale = val, params.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
            if config.lr_decay < 1.0 and stale % config.decay_patience == 0:
                state.lr *= config.lr_decay
    model.network = best
    model.metadata = {"seed": config.seed, "epochs_run": len(trace), "train_loss": trace,
                      "validation_loss": val_trace, "n_train": len(train)}
    log.debug("%s stopped after %d epochs", label, len(trace))
    return model


def _split(data: Dataset, config):
    if config.validation_fraction > 0 and len(data) >= 20:
        return data.split(config.validation_fraction, child_rng(config.seed, 5))
    return data, None


def train_second_stage(data: Dataset, tmodel: TreatmentModel,
                       config: SecondStageConfig | None = None) -> OutcomeModel:
    """Fit ``h`` by minimising the integral loss under the fitted treatment distribution."""
    config = (config or SecondStageConfig()).validate()
    if config.vb and abs(config.keep_probability - tmodel.keep_probability) > 1e-12:
        raise ParameterError(
            f"VB mode needs one keep probability for both stages "
            f"({tmodel.keep_probability} vs {config.keep_probability})"
        )
    if config.vb and config.keep_probability >= 1.0:
        raise ParameterError("VB mode needs dropout (keep probability < 1)")
    mode = config.mode
    if mode == "auto":
        mode = "exact" if tmodel.head == "categorical" else "mc"
    if mode == "exact" and tmodel.head != "categorical":
        raise ParameterError("exact integration needs a categorical treatment head")
    train, valid = _split(data, config)
    model = _new_model(train, config.hidden, config.activation, config.keep_probability,
                       config.seed, tmodel.p_mean, tmodel.p_std)
    dropout = config.keep_probability < 1.0

    def gradient_fn(params, idx, epoch, b):
        x, z, y = train.x[idx], train.z[idx], train.y[idx]
        mask_rng = child_rng(config.seed, 3, epoch, b)
        theta_masks = model.sample_masks(len(idx), mask_rng) if dropout else None
        phi_masks = tmodel.sample_masks(len(idx), mask_rng) if config.vb else None
        if mode == "exact":
            dist = tmodel.distribution(x, z, phi_masks)
            return exact_integral_loss(model, dist.probs, dist.categories, x, y, theta_masks, params)
        return mc_two_sample_gradient(model, tmodel, x, z, y, config.n_draws,
                                      draw_streams(config.seed, epoch, b),
                                      theta_masks, phi_masks, params=params)

    def valid_fn():
        draws = max(config.validation_draws, 100)
        return oos_causal_loss(model, tmodel, valid, draws, child_rng(config.seed, 4))

    return _fit(model, train, valid, config, gradient_fn, valid_fn, "second-stage")


def train_regression(data: Dataset, config: SecondStageConfig | None = None) -> OutcomeModel:
    """Plain l2 regression of ``y`` on ``(p, x)`` with the outcome-network architecture."""
    config = (config or SecondStageConfig()).validate()
    train, valid = _split(data, config)
    p_std = float(train.p.std())
    model = _new_model(train, config.hidden, config.activation, config.keep_probability,
                       config.seed, float(train.p.mean()), p_std if p_std > 0 else 1.0)
    dropout = config.keep_probability < 1.0

    def gradient_fn(params, idx, epoch, b):
        masks = model.sample_masks(len(idx), child_rng(config.seed, 3, epoch, b)) if dropout else None
        return _observed_loss(model, params, train.p[idx], train.x[idx], train.y[idx], masks)

    def valid_fn():
        return float(np.mean((valid.y - predict_h(model, valid.p, valid.x)) ** 2))

    return _fit(model, train, valid, config, gradient_fn, valid_fn, "regression")


def _observed_loss(model: OutcomeModel, params: ParameterSet, p, x, y, masks) -> IntegralLossReport:
    out, tape = _net(model, params, model.inputs(p, x), masks)
    resid = y - (model.y_mean + model.y_std * out[:, 0])
    grad = backward(tape, (-2.0 / len(y)) * resid[:, None] * model.y_std)
    return IntegralLossReport(resid, float(np.mean(resid ** 2)), 1, grad)
