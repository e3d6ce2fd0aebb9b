"""Synthetic symbol-sequence tasks with controlled noise conditions.

A task is a collection of utterances. Each utterance pairs a label
sequence drawn over a small alphabet with a frame matrix produced by a
prototype generator (see :mod:`chaingem.synthesizer`), optionally
corrupted by white noise calibrated to a target signal-to-noise ratio.

Determinism contract: regenerating a task from the same ``TaskSpec``
is bit-identical, and two specs differing only in ``snr_db`` share
labels and pre-noise features. The injected noise is therefore
recoverable as the difference between the noisy and clean variants,
which the tests use to audit SNR calibration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FRAMES_PER_SYMBOL = 3


@dataclass(frozen=True)
class SymbolAlphabet:
    """Closed symbol inventory; labels are ids in [0, size)."""

    size: int

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ValueError(f"alphabet needs at least 2 symbols, got {self.size}")


@dataclass(frozen=True)
class Utterance:
    """A label sequence with its frame matrix.

    ``features`` has exactly ``FRAMES_PER_SYMBOL`` rows per label, in
    label order. Consecutive labels never repeat, so argmax-and-collapse
    decoding is unambiguous on clean data.
    """

    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64)
        features = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", features)
        if labels.ndim != 1 or labels.size == 0:
            raise ValueError("labels must be a non-empty 1-D sequence")
        if features.ndim != 2:
            raise ValueError("features must be a 2-D frame matrix")
        if features.shape[0] != FRAMES_PER_SYMBOL * labels.size:
            raise ValueError(
                f"expected {FRAMES_PER_SYMBOL} frames per label: "
                f"{labels.size} labels vs {features.shape[0]} frames"
            )
        if labels.size > 1 and np.any(labels[1:] == labels[:-1]):
            raise ValueError("consecutive labels must differ")


@dataclass(frozen=True)
class TaskSpec:
    """Recipe for one task; ``snr_db=None`` means the clean condition."""

    task_id: int
    snr_db: float | None
    n_utterances: int
    length_range: tuple[int, int]
    seed: int

    def __post_init__(self) -> None:
        lo, hi = self.length_range
        if not (1 <= lo <= hi):
            raise ValueError(f"bad length range {self.length_range}")
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be positive")


@dataclass(frozen=True)
class TaskDataset:
    spec: TaskSpec
    train: list[Utterance] = field(default_factory=list)
    dev: list[Utterance] = field(default_factory=list)
    test: list[Utterance] = field(default_factory=list)


def add_noise(x: np.ndarray, snr_db: float, seed: int) -> np.ndarray:
    """Add zero-mean white Gaussian noise at a target SNR in dB.

    The noise variance is chosen from the empirical signal power
    ``mean(x**2)`` so that ``10*log10(P_signal / P_noise) == snr_db``
    in expectation, element-wise i.i.d. across the whole frame matrix.
    """

    x = np.asarray(x, dtype=np.float64)
    power = float(np.mean(np.square(x)))
    if power == 0.0:
        raise ValueError("cannot calibrate noise against an all-zero signal")
    sigma = np.sqrt(power * 10.0 ** (-snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return x + rng.normal(0.0, sigma, size=x.shape)


def sample_labels(rng: np.random.Generator, alphabet: SymbolAlphabet, length: int) -> np.ndarray:
    """Uniform label sequence with no immediate repetition."""

    labels = np.empty(length, dtype=np.int64)
    labels[0] = rng.integers(alphabet.size)
    for t in range(1, length):
        # draw from the other V-1 symbols, shifting past the previous one
        draw = rng.integers(alphabet.size - 1)
        labels[t] = draw if draw < labels[t - 1] else draw + 1
    return labels


def make_task(
    spec: TaskSpec,
    alphabet: SymbolAlphabet,
    proto,
    split_ratios: tuple[float, float, float] = (0.94, 0.03, 0.03),
) -> TaskDataset:
    """Generate a task from a prototype generator and split it.

    Features are prototype emissions of the sampled labels; when the
    spec is not clean, calibrated white noise is layered on top. All
    randomness flows from ``spec.seed``.
    """

    from .synthesizer import synthesize

    root = np.random.SeedSequence(spec.seed)
    children = root.spawn(2 * spec.n_utterances + 2)
    label_rng = np.random.default_rng(children[0])
    split_seed = int(children[1].generate_state(1)[0])

    lo, hi = spec.length_range
    utterances = []
    for i in range(spec.n_utterances):
        length = int(label_rng.integers(lo, hi + 1))
        labels = sample_labels(label_rng, alphabet, length)
        emit_seed = int(children[2 + 2 * i].generate_state(1)[0])
        noise_seed = int(children[3 + 2 * i].generate_state(1)[0])
        features = synthesize(proto, labels, seed=emit_seed, with_noise=True)
        if spec.snr_db is not None:
            features = add_noise(features, spec.snr_db, noise_seed)
        utterances.append(Utterance(labels=labels, features=features))

    train, dev, test = split_dataset(utterances, split_ratios, split_seed)
    return TaskDataset(spec=spec, train=train, dev=dev, test=test)


def split_dataset(
    utterances: list[Utterance],
    ratios: tuple[float, float, float],
    seed: int,
) -> tuple[list[Utterance], list[Utterance], list[Utterance]]:
    """Deterministic shuffle-and-cut into train/dev/test.

    Sizes follow the ratios by largest-remainder rounding, so the
    three parts are disjoint and cover the input exactly.
    """

    ratios = tuple(float(r) for r in ratios)
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    n_parts = sum(1 for r in ratios if r > 0)
    if len(utterances) < n_parts:
        raise ValueError(
            f"cannot split {len(utterances)} utterances into {n_parts} non-empty parts"
        )

    n = len(utterances)
    raw = [r * n for r in ratios]
    sizes = [int(np.floor(c)) for c in raw]
    remainder = n - sum(sizes)
    by_fraction = sorted(range(3), key=lambda i: (raw[i] - sizes[i], -i), reverse=True)
    for i in by_fraction[:remainder]:
        sizes[i] += 1

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [utterances[int(i)] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def split_labeled_unlabeled(
    train: list[Utterance],
    labeled_fraction: float,
    seed: int,
) -> tuple[list[Utterance], list[np.ndarray]]:
    """Partition train data into labeled utterances and bare feature matrices.

    The unlabeled side exposes features only; its labels are withheld
    from every consumer.
    """

    if not (0.0 < labeled_fraction <= 1.0):
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    n_labeled = int(round(labeled_fraction * len(train)))
    n_labeled = max(1, min(len(train), n_labeled))
    order = np.random.default_rng(seed).permutation(len(train))
    labeled = [train[int(i)] for i in order[:n_labeled]]
    unlabeled = [train[int(i)].features for i in order[n_labeled:]]
    return labeled, unlabeled
