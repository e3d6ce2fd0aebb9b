"""Continual-learning baselines sharing one training loop.

All three baselines ride :func:`chaingem.recognizer.run_training_loop`
so that, seed for seed, EWC with a zero penalty weight is bit-identical
to plain fine-tuning and a single-task multitask run is bit-identical
to supervised training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import corpus_cer
from .recognizer import (
    LayerShape,
    OptimizerConfig,
    gradient,
    init_model,
    loss as frame_loss,
    run_training_loop,
)


@dataclass(frozen=True)
class EwcState:
    """Anchor parameters with a diagonal importance estimate."""

    anchor_theta: np.ndarray
    fisher_diag: np.ndarray
    lam: float

    def __post_init__(self) -> None:
        anchor = np.asarray(self.anchor_theta, dtype=np.float64)
        fisher = np.asarray(self.fisher_diag, dtype=np.float64)
        object.__setattr__(self, "anchor_theta", anchor)
        object.__setattr__(self, "fisher_diag", fisher)
        if anchor.shape != fisher.shape or anchor.ndim != 1:
            raise ValueError("anchor and fisher must be matching flat vectors")
        if np.any(fisher < 0):
            raise ValueError("fisher entries must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def _eval_rows(model, eval_tasks, step: int, smoothing: float) -> list[dict]:
    rows = []
    for task in eval_tasks:
        dev_losses = [frame_loss(model, u.features, u.labels, smoothing).loss for u in task.dev]
        rows.append(
            {
                "step": step,
                "task_id": task.spec.task_id,
                "split": "dev",
                "cer": corpus_cer(model, task.dev),
                "loss": float(np.mean(dev_losses)),
            }
        )
    return rows


def fine_tune(
    model,
    new_task,
    epochs: int,
    optimizer: OptimizerConfig,
    seed: int,
    *,
    eval_tasks=(),
    smoothing: float = 0.1,
):
    """Plain supervised training on the new task only."""

    curve: list[dict] = []

    def record(_epoch, steps, current, _train_loss):
        curve.extend(_eval_rows(current, eval_tasks, steps, smoothing))

    model = run_training_loop(
        model,
        new_task.train,
        epochs,
        optimizer,
        seed,
        smoothing=smoothing,
        on_epoch=record if eval_tasks else None,
    )
    return model, curve


def multitask_train(
    shape: LayerShape,
    tasks,
    epochs: int,
    optimizer: OptimizerConfig,
    seed: int,
    *,
    eval_tasks=(),
    smoothing: float = 0.1,
):
    """Fresh model on the concatenated, shuffled union of all train sets."""

    tasks = list(tasks)
    if not tasks:
        raise ValueError("multitask training needs at least one task")
    union = [utt for task in tasks for utt in task.train]
    model = init_model(shape, seed)
    curve: list[dict] = []

    def record(_epoch, steps, current, _train_loss):
        curve.extend(_eval_rows(current, eval_tasks, steps, smoothing))

    model = run_training_loop(
        model,
        union,
        epochs,
        optimizer,
        seed,
        smoothing=smoothing,
        on_epoch=record if eval_tasks else None,
    )
    return model, curve


def ewc_prepare(model, base_task_data, smoothing: float = 0.1, lam: float = 100.0) -> EwcState:
    """Anchor the current parameters and estimate diagonal importance.

    The importance of each parameter is the mean over base samples of
    its squared per-sample gradient (an empirical Fisher diagonal).
    """

    base_task_data = list(base_task_data)
    if not base_task_data:
        raise ValueError("need base samples to estimate importance")
    fisher = np.zeros_like(model.theta)
    for utt in base_task_data:
        g = gradient(model, [utt], smoothing)
        fisher += g * g
    fisher /= len(base_task_data)
    return EwcState(anchor_theta=model.theta.copy(), fisher_diag=fisher, lam=lam)


def ewc_penalty(state: EwcState, theta: np.ndarray) -> float:
    """Quadratic anchor penalty (lam/2) * sum_i F_i (theta_i - anchor_i)^2."""

    drift = np.asarray(theta, dtype=np.float64) - state.anchor_theta
    return float(0.5 * state.lam * np.sum(state.fisher_diag * drift * drift))


def ewc_penalty_gradient(state: EwcState, theta: np.ndarray) -> np.ndarray:
    return state.lam * state.fisher_diag * (np.asarray(theta, dtype=np.float64) - state.anchor_theta)


def ewc_train(
    model,
    state: EwcState,
    new_task,
    epochs: int,
    optimizer: OptimizerConfig,
    seed: int,
    *,
    eval_tasks=(),
    smoothing: float = 0.1,
):
    """Fine-tune on the new task under the quadratic anchor penalty."""

    curve: list[dict] = []

    def record(_epoch, steps, current, _train_loss):
        curve.extend(_eval_rows(current, eval_tasks, steps, smoothing))

    model = run_training_loop(
        model,
        new_task.train,
        epochs,
        optimizer,
        seed,
        smoothing=smoothing,
        penalty_grad=lambda theta: ewc_penalty_gradient(state, theta),
        on_epoch=record if eval_tasks else None,
    )
    return model, curve
