"""First stage: conditional treatment distribution ``F(p | x, z)``.

Continuous treatments get a Gaussian mixture density network, discrete ones a
softmax network over the observed treatment levels. The network sees
standardised ``[x, z]``; mixture parameters live in standardised treatment
units internally and are mapped back to treatment units by
:meth:`TreatmentModel.distribution`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ACTIVATIONS,
    AdamState,
    ParameterSet,
    adam_step,
    add_weight_decay,
    backward,
    child_rng,
    expected_masks,
    init_params,
    log_softmax,
    minibatches,
    mlp_forward,
    sample_dropout_masks,
    sigmoid,
    softplus,
)
from .data import Dataset
from .errors import ConfigError, DomainError, NumericError, ParameterError

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MixtureParams:
    """Mixture weights, means and scales; leading axes index observations."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray


@dataclass
class CategoricalParams:
    probs: np.ndarray
    categories: np.ndarray


def as_rows(a, width: int) -> np.ndarray:
    """Coerce to a (rows, width) float array; 1-D input is reshaped row-major."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a
    if width == 0:
        return np.empty((1, 0))
    return a.reshape(-1, width)


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def mixture_head(raw: np.ndarray, sigma_floor: float = SIGMA_FLOOR) -> MixtureParams:
    """Split raw outputs ``[logits | means | scale logits]`` into mixture parameters."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] % 3:
        raise ParameterError(f"mixture head needs 3K outputs, got {raw.shape[-1]}")
    k = raw.shape[-1] // 3
    return MixtureParams(
        weights=_stable_softmax(raw[..., :k]),
        means=raw[..., k:2 * k].copy(),
        stds=softplus(raw[..., 2 * k:]) + sigma_floor,
    )


def categorical_head(raw: np.ndarray, categories) -> CategoricalParams:
    return CategoricalParams(_stable_softmax(np.asarray(raw, dtype=np.float64)),
                             np.asarray(categories, dtype=np.float64))


def _mixture_log_terms(params: MixtureParams, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)[..., None]
    zscore = (p - params.means) / params.stds
    return (np.log(params.weights) - 0.5 * LOG_2PI - np.log(params.stds)
            - 0.5 * zscore * zscore)


def category_index(categories: np.ndarray, p) -> np.ndarray:
    """Positions of treatment values within ``categories``; DomainError if absent."""
    p = np.asarray(p, dtype=np.float64)
    idx = np.searchsorted(categories, p)
    idx_c = np.clip(idx, 0, len(categories) - 1)
    bad = categories[idx_c] != p
    if np.any(bad):
        raise DomainError(f"treatment value {np.atleast_1d(p)[np.atleast_1d(bad)][0]!r} is not a known category")
    return idx_c


def log_density(params: MixtureParams | CategoricalParams, p) -> np.ndarray | float:
    """Log density (mixture) or log mass (categorical) of ``p``."""
    if isinstance(params, CategoricalParams):
        idx = category_index(params.categories, p)
        probs = np.asarray(params.probs)
        if probs.ndim == 1:
            out = np.log(probs[idx])
        else:
            out = np.log(np.take_along_axis(probs, np.asarray(idx).reshape(-1, 1), axis=-1)[..., 0])
        return float(out) if np.ndim(out) == 0 else out
    terms = _mixture_log_terms(params, p)
    top = np.max(terms, axis=-1, keepdims=True)
    out = (top + np.log(np.sum(np.exp(terms - top), axis=-1, keepdims=True)))[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def mixture_nll_grad(raw: np.ndarray, p_std: np.ndarray, sigma_floor: float = SIGMA_FLOOR):
    """Per-row negative log density and its gradient with respect to the raw head outputs."""
    k = raw.shape[-1] // 3
    params = mixture_head(raw, sigma_floor)
    terms = _mixture_log_terms(params, p_std)
    top = np.max(terms, axis=-1, keepdims=True)
    lse = top + np.log(np.sum(np.exp(terms - top), axis=-1, keepdims=True))
    resp = np.exp(terms - lse)
    diff = p_std[:, None] - params.means
    var = params.stds ** 2
    grad = np.empty_like(raw)
    grad[:, :k] = params.weights - resp
    grad[:, k:2 * k] = -resp * diff / var
    dsigma = resp * (1.0 / params.stds - diff * diff / (var * params.stds))
    grad[:, 2 * k:] = dsigma * sigmoid(raw[:, 2 * k:])
    return -lse[:, 0], grad


def categorical_nll_grad(raw: np.ndarray, idx: np.ndarray):
    logp = log_softmax(raw)
    rows = np.arange(len(idx))
    grad = np.exp(logp)
    grad[rows, idx] -= 1.0
    return -logp[rows, idx], grad


@dataclass
class FirstStageConfig:
    head: str = "mixture"
    n_components: int = 10
    hidden: tuple[int, ...] = (50,)
    activation: str = "relu"
    epochs: int = 50
    batch_size: int = 100
    learning_rate: float = 1e-3
    keep_probability: float = 1.0
    weight_decay: float = 0.0
    validation_fraction: float = 0.1
    patience: int = 10
    sigma_floor: float = SIGMA_FLOOR
    seed: int = 0

    def validate(self, prefix: str = "first_stage") -> "FirstStageConfig":
        if self.head not in ("mixture", "categorical"):
            raise ConfigError(f"{prefix}.head", f"must be 'mixture' or 'categorical', got {self.head!r}")
        _check_common(self, prefix)
        if self.n_components < 1:
            raise ConfigError(f"{prefix}.n_components", "must be >= 1")
        if not self.sigma_floor > 0:
            raise ConfigError(f"{prefix}.sigma_floor", "must be > 0")
        return self


def _check_common(cfg, prefix: str) -> None:
    """Range checks shared by both stage configs."""
    if cfg.activation not in ACTIVATIONS:
        raise ConfigError(f"{prefix}.activation", f"must be one of {', '.join(ACTIVATIONS)}, got {cfg.activation!r}")
    if any(int(w) < 1 for w in cfg.hidden):
        raise ConfigError(f"{prefix}.hidden", "widths must be >= 1")
    if cfg.epochs < 1:
        raise ConfigError(f"{prefix}.epochs", "must be >= 1")
    if cfg.batch_size < 1:
        raise ConfigError(f"{prefix}.batch_size", "must be >= 1")
    if not cfg.learning_rate > 0:
        raise ConfigError(f"{prefix}.learning_rate", "must be > 0")
    if not (0.5 <= cfg.keep_probability <= 1.0):
        raise ConfigError(f"{prefix}.keep_probability",
                          f"must lie in [0.5, 1] (1 disables dropout), got {cfg.keep_probability}")
    if cfg.weight_decay < 0:
        raise ConfigError(f"{prefix}.weight_decay", "must be >= 0")
    if not (0.0 <= cfg.validation_fraction < 1.0):
        raise ConfigError(f"{prefix}.validation_fraction", "must lie in [0, 1)")
    if cfg.patience < 1:
        raise ConfigError(f"{prefix}.patience", "must be >= 1")
    if cfg.seed < 0:
        raise ConfigError(f"{prefix}.seed", "must be >= 0")


@dataclass
class TreatmentModel:
    network: ParameterSet
    head: str  # "mixture" | "categorical"
    n_components: int
    x_names: list[str]
    z_names: list[str]
    input_mean: np.ndarray
    input_std: np.ndarray
    p_mean: float = 0.0
    p_std: float = 1.0
    categories: np.ndarray | None = None
    keep_probability: float = 1.0
    sigma_floor: float = SIGMA_FLOOR
    metadata: dict = field(default_factory=dict)

    def inputs(self, x, z) -> np.ndarray:
        """Standardised network input; 2-D ``x``/``z`` are batches, 1-D a single row."""
        x, z = as_rows(x, len(self.x_names)), as_rows(z, len(self.z_names))
        return (np.hstack([x, z]) - self.input_mean) / self.input_std

    def raw_output(self, x, z, masks=None) -> np.ndarray:
        if masks is None:
            masks = expected_masks(self.network, self.keep_probability)
        out, _ = mlp_forward(self.network, self.inputs(x, z), masks)
        return out

    def distribution(self, x, z, masks=None) -> MixtureParams | CategoricalParams:
        """Conditional treatment distribution, in treatment units, per row of (x, z)."""
        raw = self.raw_output(x, z, masks)
        if self.head == "categorical":
            return categorical_head(raw, self.categories)
        std = mixture_head(raw, self.sigma_floor)
        return MixtureParams(std.weights, std.means * self.p_std + self.p_mean, std.stds * self.p_std)

    def sample_masks(self, n_rows: int, rng: np.random.Generator):
        """Per-row dropout realisations of the treatment network (VB draws of phi)."""
        return sample_dropout_masks(self.network.hidden_widths, self.keep_probability, rng, n_rows)


def sample_from(params: MixtureParams | CategoricalParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling: ``n`` draws per row of ``params``; result shape (rows, n)."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    probs = params.probs if isinstance(params, CategoricalParams) else params.weights
    probs = np.atleast_2d(probs)
    rows, k = probs.shape
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0 + 1e-9
    offset = np.arange(rows, dtype=np.float64)[:, None]
    u = rng.random((rows, n))
    flat = np.searchsorted((cum + 2.0 * offset).ravel(), (u + 2.0 * offset).ravel(), side="right")
    comp = np.minimum(flat.reshape(rows, n) - k * np.arange(rows)[:, None], k - 1)
    if isinstance(params, CategoricalParams):
        return np.asarray(params.categories)[comp]
    means = np.take_along_axis(np.atleast_2d(params.means), comp, axis=1)
    stds = np.take_along_axis(np.atleast_2d(params.stds), comp, axis=1)
    return means + stds * rng.standard_normal((rows, n))


def sample_treatment(model: TreatmentModel, x, z, n: int, rng: np.random.Generator, masks=None) -> np.ndarray:
    """``n`` draws from ``F(p | x, z)`` for each row; shape (rows, n)."""
    return sample_from(model.distribution(x, z, masks), n, rng)


def _standardisation(a: np.ndarray):
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def _nll_and_grad(model: TreatmentModel, raw: np.ndarray, p: np.ndarray):
    if model.head == "categorical":
        return categorical_nll_grad(raw, category_index(model.categories, p))
    return mixture_nll_grad(raw, (p - model.p_mean) / model.p_std, model.sigma_floor)


def first_stage_loss(model: TreatmentModel, params: ParameterSet, x, z, p, masks=None):
    """Mean training NLL (standardised units) and its parameter gradient."""
    out, tape = mlp_forward(params, model.inputs(x, z), masks)
    nll, g_raw = _nll_and_grad(model, out, np.asarray(p, dtype=np.float64))
    n = len(nll)
    return float(nll.mean()), backward(tape, g_raw / n)


def train_first_stage(data: Dataset, config: FirstStageConfig | None = None) -> TreatmentModel:
    """Fit the treatment network by minibatch maximum likelihood with early stopping."""
    config = (config or FirstStageConfig()).validate()
    if len(data) < 2:
        raise ParameterError("first stage needs at least two rows")
    rng = child_rng(config.seed, 1)
    if config.validation_fraction > 0 and len(data) >= 20:
        train, valid = data.split(config.validation_fraction, rng)
    else:
        train, valid = data, None

    inputs = np.hstack([train.x, train.z])
    in_mean, in_std = _standardisation(inputs)
    if config.head == "categorical":
        categories = np.unique(data.p)
        out_width = len(categories)
        p_mean, p_std = 0.0, 1.0
    else:
        categories = None
        out_width = 3 * config.n_components
        p_mean, p_std = float(train.p.mean()), float(train.p.std() or 1.0)
    widths = [inputs.shape[1], *config.hidden, out_width]
    params = init_params(widths, child_rng(config.seed, 0), config.activation)
    model = TreatmentModel(
        network=params, head=config.head,
        n_components=config.n_components if config.head == "mixture" else out_width,
        x_names=list(data.x_names), z_names=list(data.z_names),
        input_mean=in_mean, input_std=in_std, p_mean=p_mean, p_std=p_std,
        categories=categories, keep_probability=config.keep_probability,
        sigma_floor=config.sigma_floor,
    )
    state = AdamState.for_params(params, lr=config.learning_rate)
    use_dropout = config.keep_probability < 1.0
    decay = config.keep_probability * config.weight_decay
    trace, val_trace = [], []
    best, best_val, stale = params.copy(), np.inf, 0
    for epoch in range(config.epochs):
        batch_losses = []
        for b, idx in enumerate(minibatches(len(train), config.batch_size, rng)):
            masks = model.sample_masks(len(idx), rng) if use_dropout else None
            loss, grads = first_stage_loss(model, params, train.x[idx], train.z[idx], train.p[idx], masks)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite first-stage loss at epoch {epoch}, batch {b}")
            adam_step(state, params, add_weight_decay(grads, params, decay))
            batch_losses.append(loss)
        trace.append(float(np.mean(batch_losses)))
        if valid is None:
            best = params.copy()
            continue
        val = oos_deviance(model, valid)
        val_trace.append(val)
        if val < best_val:
            best_val, best, stale = val, params.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    log.debug("first stage stopped after %d epochs, best validation deviance %.4f", len(trace), best_val)
    model.network = best
    model.metadata = {
        "seed": config.seed, "epochs_run": len(trace), "train_loss": trace,
        "validation_deviance": val_trace, "n_train": len(train),
    }
    return model


def oos_deviance(model: TreatmentModel, holdout: Dataset, masks=None) -> float:
    """Mean ``-log f(p | x, z)`` over held-out rows, in treatment units."""
    if len(holdout) == 0:
        raise ParameterError("empty holdout")
    dist = model.distribution(holdout.x, holdout.z, masks)
    return float(-np.mean(log_density(dist, holdout.p)))


def relevance_diagnostic(model: TreatmentModel, data: Dataset, n_perm: int,
                         rng: np.random.Generator) -> float:
    """Permutation p-value for instrument relevance.

    Compares the model's deviance on ``data`` with its deviance after the
    instrument columns are jointly permuted across rows. Small values mean the
    fitted distribution genuinely uses the instruments.
    """
    if n_perm < 20:
        raise ParameterError("n_perm must be >= 20")
    if np.all(data.z == data.z[0]):
        return 1.0
    observed = oos_deviance(model, data)
    hits = 0
    for _ in range(n_perm):
        permuted = data.with_z(data.z[rng.permutation(len(data))])
        if oos_deviance(model, permuted) <= observed:
            hits += 1
    return (1 + hits) / (1 + n_perm)


def conditional_mean(model: TreatmentModel, x, z) -> np.ndarray:
    dist = model.distribution(x, z)
    if isinstance(dist, CategoricalParams):
        return dist.probs @ dist.categories
    return np.sum(dist.weights * dist.means, axis=-1)


def conditional_std(model: TreatmentModel, x, z) -> np.ndarray:
    dist = model.distribution(x, z)
    if isinstance(dist, CategoricalParams):
        mean = dist.probs @ dist.categories
        second = dist.probs @ dist.categories ** 2
    else:
        mean = np.sum(dist.weights * dist.means, axis=-1)
        second = np.sum(dist.weights * (dist.means ** 2 + dist.stds ** 2), axis=-1)
    return np.sqrt(np.maximum(second - mean ** 2, 0.0))
