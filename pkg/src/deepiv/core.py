"""Dense feed-forward networks with reverse-mode gradients, Adam, and dropout masks.

Tensors are plain float64 numpy arrays. A network is a stack of affine layers
``a_l = h_{l-1} @ W_l.T + b_l`` followed by a per-layer activation; hidden
outputs may be multiplied elementwise by a dropout mask (or by the keep
probability itself, which gives the point-estimate network).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

ACTIVATIONS = ("relu", "tanh", "identity")


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    return a


def _activate_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - h * h
    return np.ones_like(a)


@dataclass
class ParameterSet:
    """Weights ``W_l`` of shape (K_l, K_{l-1}), biases ``b_l`` of shape (K_l,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("weights, biases and activations differ in length")
        for l, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ParameterError(f"layer {l}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {l}: weight {w.shape} / bias {b.shape}")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise DimensionError(
                    f"layer {l} expects width {w.shape[1]}, "
                    f"previous layer gives {self.weights[l - 1].shape[0]}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> list[int]:
        """Input width followed by every layer's output width."""
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            list(self.activations),
        )

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vec: np.ndarray) -> "ParameterSet":
        """New ParameterSet of the same shape filled from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise DimensionError(f"vector of length {vec.size}, need {self.size}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return ParameterSet(weights, biases, list(self.activations))

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def squared_norm(self, include_biases: bool = False) -> float:
        total = sum(float(np.sum(w * w)) for w in self.weights)
        if include_biases:
            total += sum(float(np.sum(b * b)) for b in self.biases)
        return total


def init_params(
    widths: Sequence[int],
    rng: np.random.Generator,
    activation: str = "relu",
    output_activation: str = "identity",
) -> ParameterSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases."""
    if len(widths) < 2 or any(int(k) < 1 for k in widths):
        raise ParameterError(f"invalid layer widths {list(widths)}")
    if activation not in ACTIVATIONS or output_activation not in ACTIVATIONS:
        raise ParameterError(f"unknown activation {activation!r}/{output_activation!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    acts = [activation] * (len(widths) - 2) + [output_activation]
    return ParameterSet(weights, biases, acts)


@dataclass
class DropoutMaskSet:
    """One {0,1} multiplier array per hidden layer.

    Each array has shape (width,) for a mask shared by every row, or
    (n_rows, width) for one realisation per row.
    """

    masks: list[np.ndarray]
    keep_probability: float


def sample_dropout_masks(
    layer_widths: Sequence[int],
    keep_probability: float,
    rng: np.random.Generator,
    n_rows: int | None = None,
) -> DropoutMaskSet:
    """Independent Bernoulli(c) multipliers for each hidden unit."""
    c = float(keep_probability)
    if not 0.5 <= c < 1.0:
        raise ParameterError(f"keep probability must lie in [0.5, 1), got {c}")
    masks = []
    for width in layer_widths:
        size = (width,) if n_rows is None else (n_rows, width)
        masks.append((rng.random(size) < c).astype(np.float64))
    return DropoutMaskSet(masks, c)


def expected_masks(params: ParameterSet, keep_probability: float) -> list[float] | None:
    """Scalar masks equal to c: the point-estimate (mask-averaged) network."""
    if keep_probability >= 1.0:
        return None
    return [float(keep_probability)] * (params.n_layers - 1)


@dataclass
class ComputationTape:
    """Cached forward values needed by :func:`backward`."""

    params: ParameterSet
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    preacts: list[np.ndarray] = field(default_factory=list)
    acts: list[np.ndarray] = field(default_factory=list)  # activation before masking
    masks: list[np.ndarray | float | None] = field(default_factory=list)
    output: np.ndarray | None = None
    squeeze: bool = False


def _mask_list(params: ParameterSet, masks) -> list:
    n_hidden = params.n_layers - 1
    if masks is None:
        return [None] * n_hidden
    if isinstance(masks, DropoutMaskSet):
        masks = masks.masks
    masks = list(masks)
    if len(masks) != n_hidden:
        raise DimensionError(f"{len(masks)} masks for {n_hidden} hidden layers")
    for l, m in enumerate(masks):
        if m is None or np.isscalar(m):
            continue
        m = np.asarray(m)
        if m.shape[-1] != params.weights[l].shape[0]:
            raise DimensionError(
                f"mask {l} has width {m.shape[-1]}, layer has {params.weights[l].shape[0]}"
            )
    return masks


def mlp_forward(params: ParameterSet, x: np.ndarray, masks=None):
    """Forward pass; returns ``(output, tape)``.

    ``x`` is (n, K_0) or a single row (K_0,). ``masks`` is a DropoutMaskSet, a
    list with one entry per hidden layer (array, scalar or None), or None.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.weights[0].shape[1]:
        raise DimensionError(
            f"input of shape {x.shape} does not match input width {params.weights[0].shape[1]}"
        )
    mask_list = _mask_list(params, masks)
    tape = ComputationTape(params=params, squeeze=squeeze)
    last = params.n_layers - 1
    for l, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        tape.inputs.append(h)
        a = h @ w.T + b
        out = _activate(act, a)
        tape.preacts.append(a)
        tape.acts.append(out)
        if l < last:
            m = mask_list[l]
            tape.masks.append(m)
            if m is not None:
                if not np.isscalar(m) and np.ndim(m) == 2 and np.shape(m)[0] != h.shape[0]:
                    raise DimensionError(f"mask {l} has {np.shape(m)[0]} rows, input has {h.shape[0]}")
                out = out * m
        h = out
    tape.output = h
    return (h[0] if squeeze else h), tape


def backward(tape: ComputationTape, output_grad: np.ndarray, per_example: bool = False) -> ParameterSet:
    """Gradient of ``sum(output_grad * output)`` with respect to every parameter.

    With ``per_example=True`` each returned array carries a leading row axis
    holding the contribution of that input row alone.
    """
    params = tape.params
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        g = g[None, ...] if g.ndim == 1 else g.reshape(1, -1)
    if g.shape != tape.output.shape:
        raise DimensionError(f"output_grad shape {np.shape(output_grad)} vs output {tape.output.shape}")
    n_layers = params.n_layers
    dweights: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    dbiases: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for l in range(n_layers - 1, -1, -1):
        if l < n_layers - 1:
            m = tape.masks[l]
            if m is not None:
                g = g * m
        g = g * _activate_grad(params.activations[l], tape.preacts[l], tape.acts[l])
        inp = tape.inputs[l]
        if per_example:
            dweights[l] = g[:, :, None] * inp[:, None, :]
            dbiases[l] = g.copy()
        else:
            dweights[l] = g.T @ inp
            dbiases[l] = g.sum(axis=0)
        if l > 0:
            g = g @ params.weights[l]
    grads = ParameterSet.__new__(ParameterSet)
    grads.weights, grads.biases, grads.activations = dweights, dbiases, list(params.activations)
    return grads


def finite_difference_gradient(
    loss_fn: Callable[[ParameterSet], float], params: ParameterSet, step: float = 1e-5
) -> ParameterSet:
    """Central differences ``(f(p+h) - f(p-h)) / 2h`` for every coordinate."""
    if not step > 0:
        raise ParameterError(f"step must be positive, got {step}")
    base = params.ravel()
    grad = np.empty_like(base)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + step
        f_plus = float(loss_fn(params.with_vector(base)))
        base[i] = orig - step
        f_minus = float(loss_fn(params.with_vector(base)))
        base[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite loss while perturbing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return params.with_vector(grad)


@dataclass
class AdamState:
    """First/second moment accumulators mirroring a ParameterSet."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterSet, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                   0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: ParameterSet, grads: ParameterSet):
    """Bias-corrected adaptive-moment update, applied in place; returns (state, params)."""
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(state.m) or len(p_arrays) != len(g_arrays):
        raise DimensionError("optimizer state does not match parameters")
    for i, g in enumerate(g_arrays):
        if g.shape != p_arrays[i].shape:
            raise DimensionError(f"gradient {i} has shape {g.shape}, parameter {p_arrays[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {i // 2}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(p_arrays, g_arrays)):
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state, params


def add_weight_decay(grads: ParameterSet, params: ParameterSet, coef: float) -> ParameterSet:
    """Add the gradient of ``coef * sum ||W_l||^2`` (weights only) to ``grads``."""
    if coef > 0:
        for g, w in zip(grads.weights, params.weights):
            g += 2.0 * coef * w
    return grads


def softplus(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


def sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a, dtype=np.float64)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def log_softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = a - np.max(a, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches covering ``range(n)`` once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def child_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; distinct keys give distinct streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))
