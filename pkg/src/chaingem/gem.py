"""Gradient episodic memory: replay buffers and gradient projection.

The projection takes the new-task gradient g and the per-memory
reference gradients g_k and returns the closest vector (in Euclidean
norm) whose inner product with every g_k is non-negative. Following
the dual formulation, with G stacking the reference gradients row-wise
the projected gradient is g + G^T v where v >= 0 minimizes

    0.5 * v^T (G G^T) v + (G g)^T v.

The dual is solved by projected gradient descent with step size
1/lambda_max(G G^T), the spectral bound estimated by power iteration.
When g already satisfies every constraint it is returned bitwise
unchanged. Nearly antiparallel references leave the dual optimum
unattained and stall the iteration, so stalls fall back to an exact
primal solve over candidate active faces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .recognizer import gradient, sgd_step
from .synthesizer import synthesize

# Iterations between convergence-progress checks; a halving of the dual
# residual over this window counts as healthy progress.
_STALL_WINDOW = 5000


class QpConvergenceError(RuntimeError):
    """Raised when the dual solve exhausts its iteration budget."""


@dataclass(frozen=True)
class MemorySample:
    features: np.ndarray
    labels: np.ndarray
    synthetic: bool


@dataclass(frozen=True)
class EpisodicMemory:
    """FIFO replay buffer for one task."""

    task_id: int
    capacity: int
    samples: tuple[MemorySample, ...] = ()

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("memory capacity must be at least 1")
        if len(self.samples) > self.capacity:
            raise ValueError("memory holds more samples than its capacity")


def memory_insert(memory: EpisodicMemory, sample: MemorySample) -> EpisodicMemory:
    """Append a sample, evicting the oldest when at capacity."""

    samples = memory.samples + (sample,)
    if len(samples) > memory.capacity:
        samples = samples[len(samples) - memory.capacity :]
    return replace(memory, samples=samples)


def memory_capacity(memory_fraction: float, train_size: int) -> int:
    """Buffer size used per task: at least one sample."""

    if memory_fraction <= 0:
        raise ValueError("memory_fraction must be positive")
    return max(1, int(round(memory_fraction * train_size)))


@dataclass(frozen=True)
class GemConfig:
    delta: float = 1e-2
    memory_fraction: float = 0.01
    qp_tolerance: float = 1e-9
    qp_max_iterations: int = 100_000

    def __post_init__(self) -> None:
        if self.delta <= 0 or self.memory_fraction <= 0:
            raise ValueError("delta and memory_fraction must be positive")
        if self.qp_tolerance <= 0 or self.qp_max_iterations < 1:
            raise ValueError("qp_tolerance must be positive, qp_max_iterations >= 1")


@dataclass(frozen=True)
class ProjectionResult:
    projected: np.ndarray
    duals: np.ndarray
    violated_before: np.ndarray
    iterations: int


def reference_gradients(model, memories, smoothing: float = 0.1) -> list[np.ndarray]:
    """Mean-loss gradient over each memory's full contents."""

    grads = []
    for memory in memories:
        if not memory.samples:
            raise ValueError(f"memory for task {memory.task_id} is empty")
        grads.append(gradient(model, memory.samples, smoothing))
    return grads


def _spectral_bound(mat: np.ndarray) -> float:
    """Largest eigenvalue of a small symmetric PSD matrix, by power iteration."""

    m = mat.shape[0]
    if m == 1:
        return float(mat[0, 0])
    vec = mat @ np.ones(m) + np.linspace(0.0, 1e-3, m)
    norm = np.linalg.norm(vec)
    vec = np.ones(m) / np.sqrt(m) if norm == 0.0 else vec / norm
    value = float(mat.diagonal().max())
    for _ in range(200):
        nxt = mat @ vec
        norm = float(np.linalg.norm(nxt))
        if norm == 0.0:
            break
        vec = nxt / norm
        value = norm
    return max(value, float(mat.diagonal().max()))


def _project_degenerate(g: np.ndarray, ref_matrix: np.ndarray, feas_tol: float):
    """Face-enumeration rescue for (near-)degenerate constraint sets.

    When two references are almost antiparallel the dual optimum is
    unattained and projected gradient descent crawls. The projection
    itself still exists, so this solves each candidate active face
    primally through an SVD (stable under rank deficiency) and keeps
    the best feasible candidate with non-negative multipliers. Returns
    (projected, duals) or None when no face qualifies.
    """

    n_refs = ref_matrix.shape[0]
    best = None
    for mask in range(2**n_refs):
        active = [i for i in range(n_refs) if mask >> i & 1]
        duals = np.zeros(n_refs)
        if active:
            rows = ref_matrix[active]
            u, sv, vt = np.linalg.svd(rows, full_matrices=False)
            basis = vt[sv > sv[0] * 1e-12] if sv.size and sv[0] > 0.0 else vt[:0]
            candidate = g - basis.T @ (basis @ g)
            solution, *_ = np.linalg.lstsq(rows.T, candidate - g, rcond=None)
            duals[active] = solution
        else:
            candidate = g
        dual_scale = max(1.0, float(np.abs(duals).max()))
        if np.any(duals < -1e-9 * dual_scale):
            continue
        if np.any(ref_matrix @ candidate < -feas_tol):
            continue
        objective = float(np.sum((candidate - g) ** 2))
        if best is None or objective < best[0]:
            best = (objective, candidate, np.maximum(duals, 0.0))
    if best is None:
        return None
    return best[1], best[2]


def project(g: np.ndarray, refs, config: GemConfig | None = None) -> ProjectionResult:
    """Project g onto the cone of gradients aligned with every reference.

    Feasible inputs (all inner products already non-negative) are
    returned as-is, bit for bit. Otherwise the dual is iterated until
    the projected-gradient residual falls below a tolerance relative to
    the constraint scale, which keeps the solve equivariant under
    positive rescaling of g.
    """

    config = config or GemConfig()
    g = np.asarray(g, dtype=np.float64)
    refs = [np.asarray(r, dtype=np.float64) for r in refs]
    if not refs:
        return ProjectionResult(
            projected=g,
            duals=np.zeros(0),
            violated_before=np.zeros(0, dtype=bool),
            iterations=0,
        )

    ref_matrix = np.stack(refs)
    margins = ref_matrix @ g
    violated = margins < 0.0
    if not violated.any():
        return ProjectionResult(
            projected=g,
            duals=np.zeros(len(refs)),
            violated_before=violated,
            iterations=0,
        )

    gram = ref_matrix @ ref_matrix.T
    step = 1.0 / _spectral_bound(gram)
    scale = float(np.abs(margins).max())
    tolerance = config.qp_tolerance * scale * 1e-2

    duals = np.zeros(len(refs))
    iterations = 0
    checkpoint = math.inf
    projected = None
    while True:
        slope = gram @ duals + margins
        residual = float(np.abs(duals - np.maximum(0.0, duals - slope)).max())
        if residual <= tolerance:
            break
        if iterations >= config.qp_max_iterations:
            raise QpConvergenceError(
                f"dual solve stalled after {iterations} iterations "
                f"(residual {residual:.3e}, tolerance {tolerance:.3e})"
            )
        if iterations and iterations % _STALL_WINDOW == 0:
            if residual > 0.5 * checkpoint:
                rescue = _project_degenerate(g, ref_matrix, tolerance)
                if rescue is not None:
                    projected, duals = rescue
                    break
            checkpoint = residual
        duals = np.maximum(0.0, duals - step * slope)
        iterations += 1

    if projected is None:
        projected = g + ref_matrix.T @ duals
    return ProjectionResult(
        projected=projected,
        duals=duals,
        violated_before=violated,
        iterations=iterations,
    )


def gem_step(model, new_batch, memories, config: GemConfig, smoothing: float = 0.1):
    """One projected update: gradient, projection, then theta -= delta * g.

    With no memories this degenerates to a plain SGD step on the batch
    gradient.
    """

    g = gradient(model, new_batch, smoothing)
    refs = reference_gradients(model, memories, smoothing)
    result = project(g, refs, config)
    return sgd_step(model, result.projected, config.delta), result


def continual_learn(
    asr,
    synth,
    new_task,
    base_memory_capacity: int,
    config: GemConfig,
    *,
    epochs: int = 1,
    seed: int = 0,
    memories: dict[int, EpisodicMemory] | None = None,
    eval_tasks=(),
    eval_every: int = 25,
    smoothing: float = 0.1,
    batch_size: int = 16,
    replay_source: str = "synthesizer",
    trace: list | None = None,
):
    """Learn one new task under projection constraints from old memories.

    Per incoming labeled utterance, while the base memory is below
    capacity and ``replay_source`` is "synthesizer", the synthesizer
    generates a clean-condition stand-in of the utterance's labels and
    stores it in the base memory; the utterance itself always lands in
    the new task's own memory. Each batch then takes one projected step
    constrained by the memories of every earlier task.

    Returns (model, memories, log rows). Log rows record dev CER and
    loss on every eval task each ``eval_every`` steps plus a final
    evaluation.
    """

    if replay_source not in ("synthesizer", "real"):
        raise ValueError(f"unknown replay_source {replay_source!r}")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    task_id = new_task.spec.task_id
    memories = dict(memories) if memories else {}
    if any(k >= task_id for k in memories if k != task_id):
        raise ValueError("memories must belong to earlier tasks")
    if replay_source == "synthesizer" and 0 not in memories:
        memories[0] = EpisodicMemory(task_id=0, capacity=base_memory_capacity)
    own_capacity = memory_capacity(config.memory_fraction, len(new_task.train))
    if task_id not in memories:
        memories[task_id] = EpisodicMemory(task_id=task_id, capacity=own_capacity)

    root = np.random.SeedSequence(seed).spawn(2)
    order_rng = np.random.default_rng(root[0])
    synth_seed_rng = np.random.default_rng(root[1])

    train = new_task.train
    logs: list[dict] = []
    steps = 0

    def evaluate() -> None:
        from .metrics import corpus_cer
        from .recognizer import loss as frame_loss

        for task in eval_tasks:
            dev_losses = [frame_loss(asr, u.features, u.labels, smoothing).loss for u in task.dev]
            logs.append(
                {
                    "step": steps,
                    "task_id": task.spec.task_id,
                    "split": "dev",
                    "cer": corpus_cer(asr, task.dev),
                    "loss": float(np.mean(dev_losses)),
                }
            )

    for _ in range(epochs):
        order = order_rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            batch = [train[int(i)] for i in order[start : start + batch_size]]
            for utt in batch:
                base = memories.get(0)
                if (
                    replay_source == "synthesizer"
                    and base is not None
                    and len(base.samples) < base.capacity
                ):
                    # The synthesizer renders its one canonical emission per
                    # text, so pseudo-samples carry none of the natural frame
                    # variability that real stored utterances would.
                    generated = synthesize(
                        synth,
                        utt.labels,
                        seed=int(synth_seed_rng.integers(2**63)),
                        with_noise=False,
                    )
                    memories[0] = memory_insert(
                        base,
                        MemorySample(features=generated, labels=utt.labels, synthetic=True),
                    )
                memories[task_id] = memory_insert(
                    memories[task_id],
                    MemorySample(features=utt.features, labels=utt.labels, synthetic=False),
                )
            constraints = [memories[k] for k in sorted(memories) if k < task_id]
            asr, result = gem_step(asr, batch, constraints, config, smoothing)
            steps += 1
            if trace is not None:
                trace.append(
                    {
                        "step": steps,
                        "task_id": task_id,
                        "n_constraints": len(constraints),
                        "n_violated": int(result.violated_before.sum()),
                        "iterations": result.iterations,
                        "max_dual": float(result.duals.max()) if result.duals.size else 0.0,
                    }
                )
            if eval_tasks and steps % eval_every == 0:
                evaluate()
    if eval_tasks and (steps == 0 or steps % eval_every != 0):
        evaluate()
    return asr, memories, logs
