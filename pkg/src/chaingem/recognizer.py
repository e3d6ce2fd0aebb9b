"""Frame-level sequence recognizer with closed-form gradients.

The model is a single hidden layer with tanh, applied independently to
each feature frame, followed by a softmax over the symbol alphabet.
Parameters live in one flat float64 vector so that gradient surgery
(projection, penalty terms) is plain vector arithmetic.

Layout of ``theta`` for shape (d, h, V):
``[W1 (d*h), b1 (h), W2 (h*V), b2 (V)]``, row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import metrics as _metrics


class TrainingDivergenceError(RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class LayerShape:
    input_dim: int
    hidden_dim: int
    output_dim: int

    def __post_init__(self) -> None:
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError(f"all dimensions must be positive, got {self}")

    @property
    def param_count(self) -> int:
        d, h, v = self.input_dim, self.hidden_dim, self.output_dim
        return d * h + h + h * v + v


@dataclass(frozen=True)
class RecognizerModel:
    theta: np.ndarray
    shape: LayerShape

    def __post_init__(self) -> None:
        theta = np.asarray(self.theta, dtype=np.float64)
        object.__setattr__(self, "theta", theta)
        if theta.ndim != 1 or theta.size != self.shape.param_count:
            raise ValueError(
                f"theta has {theta.size} entries, shape {self.shape} needs "
                f"{self.shape.param_count}"
            )


@dataclass(frozen=True)
class LossReport:
    loss: float
    frame_accuracy: float


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    batch_size: int = 16

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass(frozen=True)
class OptimizerState:
    """Adam accumulator; immutable, every step returns a fresh state."""

    learning_rate: float
    beta1: float
    beta2: float
    epsilon: float
    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray


def init_optimizer(config: OptimizerConfig, param_count: int) -> OptimizerState:
    return OptimizerState(
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.epsilon,
        step_count=0,
        first_moment=np.zeros(param_count),
        second_moment=np.zeros(param_count),
    )


def _unpack(model: RecognizerModel):
    d, h, v = model.shape.input_dim, model.shape.hidden_dim, model.shape.output_dim
    theta = model.theta
    w1 = theta[: d * h].reshape(d, h)
    b1 = theta[d * h : d * h + h]
    w2 = theta[d * h + h : d * h + h + h * v].reshape(h, v)
    b2 = theta[d * h + h + h * v :]
    return w1, b1, w2, b2


def init_model(shape: LayerShape, seed: int) -> RecognizerModel:
    """Uniform init in +-sqrt(6/(fan_in+fan_out)) per layer, zero biases."""

    d, h, v = shape.input_dim, shape.hidden_dim, shape.output_dim
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (d + h))
    lim2 = np.sqrt(6.0 / (h + v))
    theta = np.concatenate(
        [
            rng.uniform(-lim1, lim1, size=d * h),
            np.zeros(h),
            rng.uniform(-lim2, lim2, size=h * v),
            np.zeros(v),
        ]
    )
    return RecognizerModel(theta=theta, shape=shape)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(model: RecognizerModel, x: np.ndarray) -> np.ndarray:
    """Per-frame symbol probabilities, rows summing to one."""

    x = np.asarray(x, dtype=np.float64)
    w1, b1, w2, b2 = _unpack(model)
    hidden = np.tanh(x @ w1 + b1)
    return np.exp(_log_softmax(hidden @ w2 + b2))


def frame_targets(y: np.ndarray, n_frames: int) -> np.ndarray:
    """Expand a label sequence to one target id per frame."""

    y = np.asarray(y, dtype=np.int64)
    if y.size == 0 or n_frames % y.size != 0:
        raise ValueError(f"{n_frames} frames do not align with {y.size} labels")
    return np.repeat(y, n_frames // y.size)


def _smoothed_targets(y_frames: np.ndarray, n_classes: int, smoothing: float) -> np.ndarray:
    if not (0.0 <= smoothing < 1.0):
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    q = np.full((y_frames.size, n_classes), smoothing / (n_classes - 1))
    q[np.arange(y_frames.size), y_frames] = 1.0 - smoothing
    return q


def loss(model: RecognizerModel, x: np.ndarray, y: np.ndarray, smoothing: float = 0.1) -> LossReport:
    """Mean per-frame cross-entropy against smoothed targets.

    The true symbol carries weight 1-smoothing; the remaining mass is
    spread uniformly over the other V-1 symbols.
    """

    x = np.asarray(x, dtype=np.float64)
    y_frames = frame_targets(y, x.shape[0])
    v = model.shape.output_dim
    w1, b1, w2, b2 = _unpack(model)
    hidden = np.tanh(x @ w1 + b1)
    log_p = _log_softmax(hidden @ w2 + b2)
    q = _smoothed_targets(y_frames, v, smoothing)
    value = float(-(q * log_p).sum() / x.shape[0])
    accuracy = float(np.mean(log_p.argmax(axis=1) == y_frames))
    return LossReport(loss=value, frame_accuracy=accuracy)


def _loss_grad_single(model: RecognizerModel, x, y, smoothing: float):
    """Loss and exact gradient of the mean per-frame cross-entropy."""

    x = np.asarray(x, dtype=np.float64)
    y_frames = frame_targets(y, x.shape[0])
    v = model.shape.output_dim
    w1, b1, w2, b2 = _unpack(model)
    pre = x @ w1 + b1
    hidden = np.tanh(pre)
    log_p = _log_softmax(hidden @ w2 + b2)
    p = np.exp(log_p)
    q = _smoothed_targets(y_frames, v, smoothing)
    value = float(-(q * log_p).sum() / x.shape[0])

    d_logits = (p - q) / x.shape[0]
    g_w2 = hidden.T @ d_logits
    g_b2 = d_logits.sum(axis=0)
    d_hidden = d_logits @ w2.T
    d_pre = d_hidden * (1.0 - hidden * hidden)
    g_w1 = x.T @ d_pre
    g_b1 = d_pre.sum(axis=0)
    grad = np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])
    return value, grad


def batch_loss_gradient(model: RecognizerModel, batch, smoothing: float = 0.1):
    """Mean over utterances of per-utterance loss, with its exact gradient."""

    if len(batch) == 0:
        raise ValueError("batch must not be empty")
    total = 0.0
    grad = np.zeros_like(model.theta)
    for utt in batch:
        value, g = _loss_grad_single(model, utt.features, utt.labels, smoothing)
        total += value
        grad += g
    return total / len(batch), grad / len(batch)


def gradient(model: RecognizerModel, batch, smoothing: float = 0.1) -> np.ndarray:
    """Exact analytic gradient of the mean batch loss w.r.t. theta."""

    return batch_loss_gradient(model, batch, smoothing)[1]


def adam_step(
    state: OptimizerState, model: RecognizerModel, grad: np.ndarray
) -> tuple[OptimizerState, RecognizerModel]:
    """One bias-corrected Adam update; returns fresh state and model."""

    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    theta = model.theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    next_state = replace(state, step_count=t, first_moment=m, second_moment=v)
    return next_state, RecognizerModel(theta=theta, shape=model.shape)


def sgd_step(model: RecognizerModel, grad: np.ndarray, delta: float) -> RecognizerModel:
    grad = np.asarray(grad, dtype=np.float64)
    if not (np.isfinite(delta) and np.all(np.isfinite(grad))):
        raise ValueError("non-finite inputs passed to sgd_step")
    return RecognizerModel(theta=model.theta - delta * grad, shape=model.shape)


def decode(model: RecognizerModel, x: np.ndarray) -> np.ndarray:
    """Per-frame argmax, then collapse runs of repeated symbols."""

    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    frames = forward(model, x).argmax(axis=1).astype(np.int64)
    keep = np.ones(frames.size, dtype=bool)
    keep[1:] = frames[1:] != frames[:-1]
    return frames[keep]


def run_training_loop(
    model: RecognizerModel,
    data,
    epochs: int,
    config: OptimizerConfig,
    seed: int,
    *,
    smoothing: float = 0.1,
    penalty_grad=None,
    on_epoch=None,
) -> RecognizerModel:
    """Seeded mini-batch Adam over ``data``; shared by every trainer.

    ``penalty_grad``, when given, maps theta to an additive gradient
    term (regularizers hook in here). ``on_epoch`` is called after each
    epoch with (epoch, total_steps, model, mean_train_loss).
    """

    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    state = init_optimizer(config, model.shape.param_count)
    rng = np.random.default_rng(seed)
    steps = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), config.batch_size):
            batch = [data[int(i)] for i in order[start : start + config.batch_size]]
            value, grad = batch_loss_gradient(model, batch, smoothing)
            if penalty_grad is not None:
                grad = grad + penalty_grad(model.theta)
            if not (np.isfinite(value) and np.all(np.isfinite(grad))):
                raise TrainingDivergenceError(
                    f"non-finite loss or gradient at epoch {epoch}, step {steps + 1}"
                )
            state, model = adam_step(state, model, grad)
            steps += 1
            losses.append(value)
        if on_epoch is not None:
            on_epoch(epoch, steps, model, float(np.mean(losses)))
    return model


def train_supervised(
    model: RecognizerModel,
    train,
    epochs: int,
    config: OptimizerConfig,
    seed: int,
    *,
    dev=None,
    smoothing: float = 0.1,
):
    """Train on labeled utterances; returns (model, per-epoch curve).

    Curve rows carry train loss plus dev loss/CER when a dev set is
    supplied.
    """

    if len(train) == 0:
        raise ValueError("train set must not be empty")
    curve: list[dict] = []

    def record(epoch: int, steps: int, current: RecognizerModel, train_loss: float) -> None:
        row = {"epoch": epoch, "step": steps, "train_loss": train_loss}
        if dev:
            dev_losses = [loss(current, u.features, u.labels, smoothing).loss for u in dev]
            row["dev_loss"] = float(np.mean(dev_losses))
            row["dev_cer"] = _metrics.corpus_cer(current, dev)
        curve.append(row)

    model = run_training_loop(
        model, train, epochs, config, seed, smoothing=smoothing, on_epoch=record
    )
    return model, curve
