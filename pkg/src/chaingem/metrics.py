"""Character error rate and continual-learning summary metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def levenshtein(ref, hyp) -> int:
    """Unit-cost edit distance via the standard two-row DP."""

    ref = list(ref)
    hyp = list(hyp)
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        current = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            current[j] = min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (r != h),
            )
        previous = current
    return int(previous[len(hyp)])


def cer(ref, hyp) -> float:
    """Edit distance divided by reference length.

    May exceed 1 when the hypothesis carries many insertions; an empty
    hypothesis scores exactly 1.
    """

    ref = list(ref)
    if len(ref) == 0:
        raise ValueError("reference must not be empty")
    return levenshtein(ref, hyp) / len(ref)


def corpus_cer(model, utterances) -> float:
    """Length-weighted CER of a model's decodes over a set of utterances."""

    from .recognizer import decode

    utterances = list(utterances)
    if not utterances:
        raise ValueError("utterance set must not be empty")
    distance = 0
    length = 0
    for utt in utterances:
        distance += levenshtein(utt.labels, decode(model, utt.features))
        length += int(utt.labels.size)
    return distance / length


@dataclass(frozen=True)
class ErrorMatrix:
    """CER of each phase snapshot on each task's test set.

    Row i holds the model after learning task i (row 0 is the model
    entering continual learning, i.e. after base training); column j is
    task j's test set.
    """

    entries: np.ndarray
    phase_labels: tuple[str, ...]
    task_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.float64)
        object.__setattr__(self, "entries", entries)
        if entries.ndim != 2:
            raise ValueError("error matrix must be 2-D")
        if entries.shape != (len(self.phase_labels), len(self.task_ids)):
            raise ValueError("labels do not match matrix dimensions")
        if np.any(entries < 0):
            raise ValueError("CER entries must be non-negative")


@dataclass(frozen=True)
class CLMetrics:
    avg: float
    bwt: float
    fwt: float


def build_error_matrix(snapshots, tasks) -> ErrorMatrix:
    """Evaluate every phase snapshot on every task's test set."""

    snapshots = list(snapshots)
    tasks = list(tasks)
    if not snapshots or not tasks:
        raise ValueError("need at least one snapshot and one task")
    entries = np.empty((len(snapshots), len(tasks)))
    for i, model in enumerate(snapshots):
        for j, task in enumerate(tasks):
            entries[i, j] = corpus_cer(model, task.test)
    return ErrorMatrix(
        entries=entries,
        phase_labels=tuple(f"after_task_{i}" for i in range(len(snapshots))),
        task_ids=tuple(task.spec.task_id for task in tasks),
    )


def compute_metrics(matrix: ErrorMatrix, finetune_reference=None) -> CLMetrics:
    """Average CER, backward transfer, and forward transfer.

    With final-phase row F and diagonal entries R[j][j]:
    AVG is the mean of the final row, BWT the mean of F[j] - R[j][j]
    over tasks learned before the last phase (positive means
    forgetting), FWT the mean of R[j][j] - reference[j] over tasks
    j >= 1, where the reference is a plain fine-tuning run under the
    same seeds.
    """

    entries = matrix.entries
    n_phases, n_tasks = entries.shape
    if n_phases != n_tasks:
        raise ValueError(
            f"need one phase per task to compute metrics, got {n_phases}x{n_tasks}"
        )
    last = n_phases - 1
    avg = float(entries[last].mean())
    if last == 0:
        bwt = 0.0
    else:
        bwt = float(np.mean([entries[last, j] - entries[j, j] for j in range(last)]))
    if last == 0 or finetune_reference is None:
        fwt = 0.0
    else:
        missing = [
            matrix.task_ids[j] for j in range(1, last + 1)
            if matrix.task_ids[j] not in finetune_reference
        ]
        if missing:
            raise ValueError(f"fine-tune reference misses tasks {missing}")
        fwt = float(
            np.mean(
                [
                    entries[j, j] - finetune_reference[matrix.task_ids[j]]
                    for j in range(1, last + 1)
                ]
            )
        )
    return CLMetrics(avg=avg, bwt=bwt, fwt=fwt)
