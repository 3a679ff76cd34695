"""Minimal feed-forward network engine: relu hidden stack, sigmoid heads,
inverted dropout, analytic gradients, SGD and RMSProp updates.

Parameters are plain value data (numpy arrays in a dataclass); every
operation is functional and returns fresh params, so snapshots are safe to
share across threads while a single writer trains.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    InputError,
    NumericError,
    ShapeError,
    UsageError,
)
from .seeding import derive_rng

DROPOUT_PLACEMENTS = ("none", "all_hidden", "second_to_last")
OPTIMIZER_KINDS = ("rmsprop", "sgd")

# floor for log() inside the loss and for public probability outputs
LOSS_CLIP = 1e-15
PROB_CLIP = 1e-12


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture of one CTR network.

    layer_sizes are hidden widths only; the output layer always has one
    sigmoid unit per head.
    """

    input_dim: int
    layer_sizes: tuple[int, ...] = (100, 50)
    head_count: int = 1
    dropout_rate: float = 0.0
    dropout_placement: str = "none"
    activation: str = "relu"
    output: str = "sigmoid"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.input_dim < 1:
            problems.append(f"input_dim must be >= 1, got {self.input_dim}")
        if self.head_count < 1:
            problems.append(f"head_count must be >= 1, got {self.head_count}")
        if any(s < 1 for s in self.layer_sizes):
            problems.append(f"every hidden layer size must be >= 1, got {self.layer_sizes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.dropout_placement not in DROPOUT_PLACEMENTS:
            problems.append(f"dropout_placement must be one of {DROPOUT_PLACEMENTS}")
        if self.dropout_placement == "second_to_last" and not self.layer_sizes:
            problems.append("second_to_last dropout requires at least one hidden layer")
        if self.activation != "relu":
            problems.append(f"unsupported activation {self.activation!r}")
        if self.output != "sigmoid":
            problems.append(f"unsupported output {self.output!r}")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def last_hidden_width(self) -> int:
        return self.layer_sizes[-1] if self.layer_sizes else self.input_dim

    def dropout_layers(self) -> frozenset[int]:
        """Indices of hidden layers whose activations get dropout masks."""
        if self.dropout_rate <= 0.0 or self.dropout_placement == "none" or not self.layer_sizes:
            return frozenset()
        if self.dropout_placement == "all_hidden":
            return frozenset(range(len(self.layer_sizes)))
        return frozenset({len(self.layer_sizes) - 1})

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layer_sizes": list(self.layer_sizes),
            "head_count": self.head_count,
            "dropout_rate": self.dropout_rate,
            "dropout_placement": self.dropout_placement,
            "activation": self.activation,
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        return cls(
            input_dim=int(data["input_dim"]),
            layer_sizes=tuple(data["layer_sizes"]),
            head_count=int(data["head_count"]),
            dropout_rate=float(data["dropout_rate"]),
            dropout_placement=str(data["dropout_placement"]),
            activation=str(data["activation"]),
            output=str(data["output"]),
        )


@dataclass
class NetworkParams:
    """All weights of one network. weights[k] has shape (layer_sizes[k], prev)."""

    config: NetworkConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head_weights: np.ndarray  # (head_count, last_hidden_width)
    head_bias: np.ndarray  # (head_count,)
    step_count: int = 0

    def param_arrays(self) -> list[np.ndarray]:
        """Flat parameter list in canonical order: (W_k, b_k)... then head W, b."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        out.append(self.head_weights)
        out.append(self.head_bias)
        return out

    def replace_arrays(self, arrays: Sequence[np.ndarray], step_count: int | None = None) -> "NetworkParams":
        n_hidden = len(self.weights)
        weights = [arrays[2 * k] for k in range(n_hidden)]
        biases = [arrays[2 * k + 1] for k in range(n_hidden)]
        return NetworkParams(
            config=self.config,
            weights=weights,
            biases=biases,
            head_weights=arrays[2 * n_hidden],
            head_bias=arrays[2 * n_hidden + 1],
            step_count=self.step_count if step_count is None else step_count,
        )

    def copy(self) -> "NetworkParams":
        return self.replace_arrays([a.copy() for a in self.param_arrays()])

    def validate_shapes(self) -> None:
        prev = self.config.input_dim
        for k, size in enumerate(self.config.layer_sizes):
            if self.weights[k].shape != (size, prev):
                raise ShapeError(f"weight {k} has shape {self.weights[k].shape}, expected {(size, prev)}")
            if self.biases[k].shape != (size,):
                raise ShapeError(f"bias {k} has shape {self.biases[k].shape}, expected {(size,)}")
            prev = size
        if self.head_weights.shape != (self.config.head_count, prev):
            raise ShapeError(
                f"head weights have shape {self.head_weights.shape}, "
                f"expected {(self.config.head_count, prev)}"
            )
        if self.head_bias.shape != (self.config.head_count,):
            raise ShapeError(f"head bias has shape {self.head_bias.shape}")
        if not all(np.isfinite(a).all() for a in self.param_arrays()):
            raise NumericError("network parameters contain non-finite entries")


@dataclass
class OptimizerState:
    """Update rule plus its per-parameter accumulators (RMSProp only).

    decay is the per-step learning-rate schedule lr_t = lr0 / (1 + decay * t);
    rho is RMSProp's squared-gradient moving-average coefficient. Both
    readings of a config's "decay rate" are therefore available.
    """

    kind: str
    learning_rate: float
    decay: float = 0.0
    rho: float = 0.9
    epsilon_stability: float = 1e-8
    rmsprop_avg: list[np.ndarray] | None = field(default=None, repr=False)

    def copy(self) -> "OptimizerState":
        avg = None if self.rmsprop_avg is None else [a.copy() for a in self.rmsprop_avg]
        return dataclasses.replace(self, rmsprop_avg=avg)


def make_optimizer(kind: str, learning_rate: float, decay: float = 0.0, rho: float = 0.9,
                   epsilon_stability: float = 1e-8) -> OptimizerState:
    if kind not in OPTIMIZER_KINDS:
        raise ConfigurationError(f"optimizer kind must be one of {OPTIMIZER_KINDS}, got {kind!r}")
    if learning_rate <= 0:
        raise ConfigurationError(f"learning_rate must be > 0, got {learning_rate}")
    if decay < 0:
        raise ConfigurationError(f"decay must be >= 0, got {decay}")
    if not 0.0 <= rho <= 1.0:
        raise ConfigurationError(f"rho is a moving-average coefficient in [0, 1], got {rho}")
    if epsilon_stability <= 0:
        raise ConfigurationError("epsilon_stability must be > 0")
    return OptimizerState(kind=kind, learning_rate=learning_rate, decay=decay, rho=rho,
                          epsilon_stability=epsilon_stability)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_network(config: NetworkConfig, seed: int) -> NetworkParams:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    config.validate()
    rng = derive_rng(int(seed), "glorot-init")
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    prev = config.input_dim
    for size in config.layer_sizes:
        bound = np.sqrt(6.0 / (prev + size))
        weights.append(rng.uniform(-bound, bound, size=(size, prev)))
        biases.append(np.zeros(size))
        prev = size
    bound = np.sqrt(6.0 / (prev + config.head_count))
    head_weights = rng.uniform(-bound, bound, size=(config.head_count, prev))
    head_bias = np.zeros(config.head_count)
    return NetworkParams(config=config, weights=weights, biases=biases,
                         head_weights=head_weights, head_bias=head_bias)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def sample_keep_masks(config: NetworkConfig, rng: np.random.Generator, n: int,
                      shared_rows: bool = False) -> list[np.ndarray | None] | None:
    """Bernoulli keep masks for each hidden layer, or None when dropout is off.

    shared_rows draws one mask row broadcast over all n inputs (the
    alternative reading of a posterior draw); default is an independent mask
    per input row.
    """
    drop = config.dropout_layers()
    if not drop:
        return None
    keep = 1.0 - config.dropout_rate
    masks: list[np.ndarray | None] = []
    for k, width in enumerate(config.layer_sizes):
        if k in drop:
            shape = (1, width) if shared_rows else (n, width)
            masks.append((rng.random(shape) < keep).astype(np.float64))
        else:
            masks.append(None)
    return masks


def hidden_stack(params: NetworkParams, X: np.ndarray,
                 keep_masks: list[np.ndarray | None] | None = None) -> np.ndarray:
    """Activations of the last hidden layer for a batch.

    With keep_masks=None this is the deterministic pass (raw activations,
    no rescale: inverted dropout makes it the expectation of masked passes).
    """
    A = np.asarray(X, dtype=np.float64)
    inv_keep = 1.0 / (1.0 - params.config.dropout_rate) if params.config.dropout_rate > 0 else 1.0
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        A = np.maximum(A @ w.T + b, 0.0)
        if keep_masks is not None and keep_masks[k] is not None:
            A = A * keep_masks[k] * inv_keep
    return A


def head_logits(params: NetworkParams, hidden: np.ndarray) -> np.ndarray:
    """Per-head pre-sigmoid outputs, shape (n, head_count)."""
    return hidden @ params.head_weights.T + params.head_bias


def forward_logits_batch(params: NetworkParams, X: np.ndarray,
                         keep_masks: list[np.ndarray | None] | None = None) -> np.ndarray:
    return head_logits(params, hidden_stack(params, X, keep_masks))


def predict_proba_batch(params: NetworkParams, X: np.ndarray) -> np.ndarray:
    """Deterministic (dropout-off) per-head probabilities, shape (n, head_count)."""
    p = sigmoid(forward_logits_batch(params, X))
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


def _check_input(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.config.input_dim:
        raise ShapeError(f"input has shape {x.shape}, expected ({params.config.input_dim},)")
    if not np.isfinite(x).all():
        raise InputError("input vector contains non-finite entries")
    return x


def forward_logits(params: NetworkParams, x: np.ndarray, mode: str = "deterministic",
                   mask_seed: int | None = None) -> np.ndarray:
    """Pre-sigmoid outputs of all heads for one input vector.

    mode "mc" samples one Bernoulli keep mask per dropout unit from
    mask_seed; "deterministic" disables dropout.
    """
    x = _check_input(params, x)
    if mode == "deterministic":
        masks = None
    elif mode == "mc":
        if params.config.dropout_layers():
            if mask_seed is None:
                raise UsageError("mc mode requires mask_seed when dropout is configured")
            rng = derive_rng(int(mask_seed), "mc-mask")
            masks = sample_keep_masks(params.config, rng, 1)
        else:
            masks = None
    else:
        raise UsageError(f"mode must be 'deterministic' or 'mc', got {mode!r}")
    return forward_logits_batch(params, x[None, :], masks)[0]


def forward(params: NetworkParams, x: np.ndarray, mode: str = "deterministic",
            mask_seed: int | None = None, head: int | None = None) -> float:
    """Sigmoid CTR prediction in (0, 1); head omitted averages over heads."""
    logits = forward_logits(params, x, mode=mode, mask_seed=mask_seed)
    if head is not None:
        if not 0 <= head < params.config.head_count:
            raise UsageError(f"head {head} out of range for head_count {params.config.head_count}")
        p = sigmoid(logits[head])
    else:
        p = sigmoid(logits).mean()
    return float(np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP))


def _coerce_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2:
        X = np.asarray(batch[0], dtype=np.float64)
        y = np.asarray(batch[1], dtype=np.float64)
    else:
        pairs = list(batch)
        if not pairs:
            raise UsageError("training batch is empty")
        X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs])
        y = np.asarray([label for _, label in pairs], dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"batch shapes {X.shape} / {y.shape} are inconsistent")
    if X.shape[0] == 0:
        raise UsageError("training batch is empty")
    if not np.isin(y, (0.0, 1.0)).all():
        raise UsageError("labels must be binary 0/1")
    return X, y


def _loss_and_grads(params: NetworkParams, X: np.ndarray, y: np.ndarray,
                    head_mask: np.ndarray,
                    keep_masks: list[np.ndarray | None] | None) -> tuple[float, list[np.ndarray]]:
    """Mean BCE over (example, assigned-head) pairs and its analytic gradient.

    head_mask is (n, head_count) with 1 where the example trains that head.
    Gradient order matches NetworkParams.param_arrays().
    """
    cfg = params.config
    inv_keep = 1.0 / (1.0 - cfg.dropout_rate) if cfg.dropout_rate > 0 else 1.0
    A: list[np.ndarray] = [X]
    Z: list[np.ndarray] = []
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = A[-1] @ w.T + b
        a = np.maximum(z, 0.0)
        if keep_masks is not None and keep_masks[k] is not None:
            a = a * keep_masks[k] * inv_keep
        Z.append(z)
        A.append(a)
    logits = head_logits(params, A[-1])
    p = sigmoid(logits)

    total = head_mask.sum()
    if total <= 0:
        raise UsageError("head_mask assigns no (example, head) pairs")
    p_safe = np.clip(p, LOSS_CLIP, 1.0 - LOSS_CLIP)
    y_col = y[:, None]
    bce = -(y_col * np.log(p_safe) + (1.0 - y_col) * np.log1p(-p_safe))
    loss = float((bce * head_mask).sum() / total)

    d_logit = (p - y_col) * head_mask / total
    g_head_w = d_logit.T @ A[-1]
    g_head_b = d_logit.sum(axis=0)
    G = d_logit @ params.head_weights
    grads_rev: list[np.ndarray] = []
    for k in range(len(params.weights) - 1, -1, -1):
        if keep_masks is not None and keep_masks[k] is not None:
            G = G * keep_masks[k] * inv_keep
        G = G * (Z[k] > 0)
        grads_rev.append(G.sum(axis=0))  # bias k
        grads_rev.append(G.T @ A[k])  # weight k
        G = G @ params.weights[k]
    grads = list(reversed(grads_rev))
    grads.append(g_head_w)
    grads.append(g_head_b)
    return loss, grads


def _coerce_head_mask(params: NetworkParams, head_masks, n: int) -> np.ndarray:
    h = params.config.head_count
    if head_masks is None:
        return np.ones((n, h))
    m = np.asarray(head_masks, dtype=np.float64)
    if m.shape != (n, h):
        raise ShapeError(f"head_masks has shape {m.shape}, expected {(n, h)}")
    return m


def _apply_update(params: NetworkParams, opt: OptimizerState,
                  grads: list[np.ndarray]) -> tuple[NetworkParams, OptimizerState]:
    arrays = params.param_arrays()
    lr = opt.learning_rate / (1.0 + opt.decay * params.step_count)
    if opt.kind == "sgd":
        new_arrays = [a - lr * g for a, g in zip(arrays, grads)]
        new_opt = opt.copy()
    else:  # rmsprop
        avg = opt.rmsprop_avg
        if avg is None:
            avg = [np.zeros_like(a) for a in arrays]
        new_avg = [opt.rho * v + (1.0 - opt.rho) * g * g for v, g in zip(avg, grads)]
        new_arrays = [
            a - lr * g / (np.sqrt(v) + opt.epsilon_stability)
            for a, g, v in zip(arrays, grads, new_avg)
        ]
        new_opt = dataclasses.replace(opt, rmsprop_avg=new_avg)
    return params.replace_arrays(new_arrays, step_count=params.step_count + 1), new_opt


def train_step(params: NetworkParams, optimizer_state: OptimizerState, batch,
               head_masks=None,
               rng: np.random.Generator | None = None) -> tuple[NetworkParams, OptimizerState, float]:
    """One gradient step on a batch of (feature vector, binary label) pairs.

    Dropout is active when the config places it; rng supplies the training
    masks. Returns (new params, new optimizer state, mean BCE loss).
    """
    X, y = _coerce_batch(batch)
    if X.shape[1] != params.config.input_dim:
        raise ShapeError(f"batch features have dim {X.shape[1]}, expected {params.config.input_dim}")
    head_mask = _coerce_head_mask(params, head_masks, X.shape[0])
    keep_masks = None
    if params.config.dropout_layers():
        if rng is None:
            raise UsageError("train_step needs an rng when dropout is configured")
        keep_masks = sample_keep_masks(params.config, rng, X.shape[0])
    loss, grads = _loss_and_grads(params, X, y, head_mask, keep_masks)
    if not np.isfinite(loss):
        raise NumericError(
            f"non-finite training loss at step {params.step_count}: loss={loss}, "
            f"max |param|={max(float(np.abs(a).max()) for a in params.param_arrays()):.3e}"
        )
    new_params, new_opt = _apply_update(params, optimizer_state, grads)
    return new_params, new_opt, loss
