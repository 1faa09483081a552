"""Dense classifier with flat float64 parameters, analytic gradients, and the
two client-side optimizers (SGD, Adam).

The whole model lives in a single 1-D float64 vector so that clients and the
server exchange one array. Layout: for each layer, the weight matrix
(row-major, shape in x out) followed by the bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

Array = np.ndarray


@dataclass
class ModelSpec:
    """Architecture of the dense classifier.

    input_dim / output_classes of 0 mean "fill in from the dataset at run
    time"; they must be concrete before any parameter operation.
    """

    input_dim: int
    hidden_dims: list[int] = field(default_factory=list)
    output_classes: int = 10
    activation: str = "relu"
    init_seed: int | None = None

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ConfigError(f"model.input_dim must be >= 1, got {self.input_dim}")
        if self.output_classes < 2:
            raise ConfigError(
                f"model.output_classes must be >= 2, got {self.output_classes}"
            )
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"model.hidden_dims must all be >= 1, got {self.hidden_dims}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, input to output."""
        dims = [self.input_dim, *self.hidden_dims, self.output_classes]
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes())


@dataclass
class LocalOptimizerConfig:
    """Client-side optimizer settings; defaults follow the stock SGD/Adam values."""

    kind: str = "adam"
    learning_rate: float | None = None  # None: 0.001 for adam, 0.01 for sgd
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 32
    local_epochs: int = 1

    def validate(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"local.optimizer must be sgd or adam, got {self.kind!r}")
        # 0 is allowed: it makes local training a no-op, which the round
        # loop's do-nothing sanity checks rely on.
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ConfigError(
                f"local.learning_rate must be >= 0, got {self.learning_rate}"
            )
        for name in ("adam_beta1", "adam_beta2"):
            beta = getattr(self, name)
            if not 0.0 <= beta < 1.0:
                raise ConfigError(f"local.{name} must be in [0, 1), got {beta}")
        if self.adam_epsilon <= 0:
            raise ConfigError(f"local.adam_epsilon must be > 0, got {self.adam_epsilon}")
        if self.batch_size < 1:
            raise ConfigError(f"local.batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 1:
            raise ConfigError(f"local.local_epochs must be >= 1, got {self.local_epochs}")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 0.001 if self.kind == "adam" else 0.01


@dataclass
class AdamState:
    """First/second moment accumulators for one local training call."""

    m: Array
    v: Array
    step: int = 0


def init_model(spec: ModelSpec) -> Array:
    """He-uniform weights (seeded), zero biases, flattened into one vector."""
    spec.validate()
    seed = 0 if spec.init_seed is None else spec.init_seed
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in spec.layer_shapes():
        limit = np.sqrt(6.0 / fan_in)
        parts.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def unpack_params(params: Array, spec: ModelSpec) -> list[tuple[Array, Array]]:
    """Views of (W, b) per layer; no copies."""
    if params.shape != (spec.param_count(),):
        raise ShapeError(
            f"parameter vector has length {params.shape}, "
            f"model needs {spec.param_count()}"
        )
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def forward_logits(params: Array, spec: ModelSpec, features: Array) -> Array:
    """Forward pass only, returns (batch, classes) logits."""
    _check_batch(spec, features)
    a = features
    layers = unpack_params(params, spec)
    for w, b in layers[:-1]:
        a = np.maximum(a @ w + b, 0.0)
    w, b = layers[-1]
    return a @ w + b


def _log_softmax(logits: Array) -> Array:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_loss_grad(
    params: Array, spec: ModelSpec, features: Array, labels: Array
) -> tuple[float, Array]:
    """Mean softmax cross-entropy over the batch and its exact gradient.

    Returns:
        (loss, grad) with grad flattened in the same layout as params.
    """
    _check_batch(spec, features)
    labels = np.asarray(labels)
    if labels.shape != (features.shape[0],):
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch of {features.shape[0]}"
        )
    if labels.min() < 0 or labels.max() >= spec.output_classes:
        raise ShapeError(
            f"labels must lie in [0, {spec.output_classes}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )

    layers = unpack_params(params, spec)
    n = features.shape[0]

    # Forward, keeping activations for the backward pass.
    activations = [features]
    a = features
    for w, b in layers[:-1]:
        a = np.maximum(a @ w + b, 0.0)
        activations.append(a)
    w_out, b_out = layers[-1]
    logits = a @ w_out + b_out

    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(n), labels].mean())

    # Backward. dz for the softmax/CE head, then chain through the ReLUs.
    probs = np.exp(log_probs)
    dz = probs
    dz[np.arange(n), labels] -= 1.0
    dz /= n

    grad = np.empty_like(params)
    grad_layers = unpack_params(grad, spec)
    for idx in range(len(layers) - 1, -1, -1):
        a_prev = activations[idx]
        gw, gb = grad_layers[idx]
        np.matmul(a_prev.T, dz, out=gw)
        gb[:] = dz.sum(axis=0)
        if idx > 0:
            da = dz @ layers[idx][0].T
            dz = da * (activations[idx] > 0.0)
    return loss, grad


def _check_batch(spec: ModelSpec, features: Array) -> None:
    if features.ndim != 2 or features.shape[0] == 0:
        raise ShapeError(f"batch must be a nonempty 2-D array, got shape {features.shape}")
    if features.shape[1] != spec.input_dim:
        raise ShapeError(
            f"batch has {features.shape[1]} features, model expects {spec.input_dim}"
        )


def init_opt_state(cfg: LocalOptimizerConfig, dim: int) -> AdamState | None:
    if cfg.kind == "adam":
        return AdamState(m=np.zeros(dim), v=np.zeros(dim))
    return None


def local_sgd_step(
    params: Array, grad: Array, state: None, cfg: LocalOptimizerConfig
) -> tuple[Array, None]:
    _check_grad(grad)
    return params - cfg.lr * grad, state


def local_adam_step(
    params: Array, grad: Array, state: AdamState, cfg: LocalOptimizerConfig
) -> tuple[Array, AdamState]:
    """Standard Adam with bias correction; state persists within one local call."""
    _check_grad(grad)
    t = state.step + 1
    m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grad
    v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grad * grad
    m_hat = m / (1.0 - cfg.adam_beta1**t)
    v_hat = v / (1.0 - cfg.adam_beta2**t)
    new_params = params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
    return new_params, AdamState(m=m, v=v, step=t)


def local_step(
    params: Array,
    grad: Array,
    state: AdamState | None,
    cfg: LocalOptimizerConfig,
) -> tuple[Array, AdamState | None]:
    if cfg.kind == "adam":
        return local_adam_step(params, grad, state, cfg)
    return local_sgd_step(params, grad, state, cfg)


def _check_grad(grad: Array) -> None:
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
