"""Prototype synthesizer: per-symbol Gaussian emissions.

The synthesizer is the feedback half of the chain. It is fit by
moment matching on aligned labeled pairs (alignment is exact because
every label owns ``FRAMES_PER_SYMBOL`` consecutive frames) and it
generates by tiling prototype rows, optionally with Gaussian emission
noise at the fitted scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .recognizer import (
    OptimizerConfig,
    decode,
    forward,
    run_training_loop,
)
from .tasks import FRAMES_PER_SYMBOL, Utterance


@dataclass(frozen=True)
class SynthesizerModel:
    prototypes: np.ndarray
    emission_sigma: float
    counts: np.ndarray

    def __post_init__(self) -> None:
        prototypes = np.asarray(self.prototypes, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "prototypes", prototypes)
        object.__setattr__(self, "counts", counts)
        if prototypes.ndim != 2:
            raise ValueError("prototypes must be a (V, d) matrix")
        if counts.shape != (prototypes.shape[0],):
            raise ValueError("counts must hold one entry per symbol")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if not np.isfinite(self.emission_sigma) or self.emission_sigma < 0:
            raise ValueError(f"emission_sigma must be finite and >= 0, got {self.emission_sigma}")
        if not np.all(np.isfinite(prototypes)):
            raise ValueError("prototypes must be finite")


def random_prototypes(
    alphabet_size: int,
    feature_dim: int,
    emission_sigma: float,
    seed: int,
    scale: float = 1.0,
) -> SynthesizerModel:
    """Gaussian prototype table, used as a ground-truth generator."""

    rng = np.random.default_rng(seed)
    prototypes = rng.normal(0.0, scale, size=(alphabet_size, feature_dim))
    return SynthesizerModel(
        prototypes=prototypes,
        emission_sigma=emission_sigma,
        counts=np.zeros(alphabet_size, dtype=np.int64),
    )


def fit_synthesizer(pairs, alphabet_size: int) -> SynthesizerModel:
    """Moment-matched fit from labeled pairs.

    Prototype v is the mean of all frames aligned to symbol v; the
    emission scale is the pooled residual standard deviation over every
    frame and coordinate. Every symbol must appear at least once.
    """

    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot fit a synthesizer on zero pairs")
    feature_dim = pairs[0].features.shape[1]
    sums = np.zeros((alphabet_size, feature_dim))
    counts = np.zeros(alphabet_size, dtype=np.int64)
    for utt in pairs:
        frames = utt.features
        for t, label in enumerate(utt.labels):
            block = frames[t * FRAMES_PER_SYMBOL : (t + 1) * FRAMES_PER_SYMBOL]
            sums[label] += block.sum(axis=0)
            counts[label] += FRAMES_PER_SYMBOL

    missing = [int(v) for v in range(alphabet_size) if counts[v] == 0]
    if missing:
        raise ValueError(f"symbols never observed in the pairs: {missing}")

    prototypes = sums / counts[:, None]
    residual = 0.0
    n_values = 0
    for utt in pairs:
        frames = utt.features
        for t, label in enumerate(utt.labels):
            block = frames[t * FRAMES_PER_SYMBOL : (t + 1) * FRAMES_PER_SYMBOL]
            residual += float(np.sum((block - prototypes[label]) ** 2))
            n_values += block.size
    sigma = float(np.sqrt(residual / n_values))
    return SynthesizerModel(prototypes=prototypes, emission_sigma=sigma, counts=counts)


def synthesize(
    synth: SynthesizerModel,
    labels,
    seed: int = 0,
    with_noise: bool = False,
) -> np.ndarray:
    """Emit ``FRAMES_PER_SYMBOL`` frames per label from the prototypes."""

    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty 1-D sequence")
    if np.any(labels < 0) or np.any(labels >= synth.prototypes.shape[0]):
        raise ValueError("label id outside the synthesizer's alphabet")
    frames = np.repeat(synth.prototypes[labels], FRAMES_PER_SYMBOL, axis=0)
    if with_noise:
        rng = np.random.default_rng(seed)
        frames = frames + rng.normal(0.0, synth.emission_sigma, size=frames.shape)
    return frames


def refine_semi_supervised(
    asr,
    synth: SynthesizerModel,
    labeled,
    unlabeled_features,
    text_pool,
    rounds: int,
    seed: int,
    *,
    dev=None,
    optimizer: OptimizerConfig | None = None,
    smoothing: float = 0.1,
    confidence_threshold: float = 0.8,
):
    """Alternate pseudo-labeling and synthetic supervision for ``rounds``.

    Each round the recognizer pseudo-labels the unlabeled features;
    confident pairs (mean per-frame max probability at or above the
    threshold, decoded length matching the frame count) join the
    labeled pairs for a synthesizer refit. The refreshed synthesizer
    then generates features for the text-only pool and the recognizer
    takes one supervised pass over those synthetic pairs.

    Returns (asr, synth, per-round curve). With ``rounds=0`` both
    models come back untouched.
    """

    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    if rounds == 0:
        return asr, synth, []
    unlabeled_features = list(unlabeled_features)
    text_pool = [np.asarray(y, dtype=np.int64) for y in text_pool]
    if not unlabeled_features and not text_pool:
        raise ValueError("refinement needs unlabeled features or text-only labels")
    optimizer = optimizer or OptimizerConfig()
    alphabet_size = synth.prototypes.shape[0]
    round_seeds = np.random.SeedSequence(seed).spawn(rounds)

    curve: list[dict] = []
    for round_index in range(1, rounds + 1):
        seeds = round_seeds[round_index - 1].generate_state(len(text_pool) + 1)
        kept = []
        skipped_confidence = 0
        skipped_length = 0
        for x in unlabeled_features:
            hypothesis = decode(asr, x)
            if hypothesis.size * FRAMES_PER_SYMBOL != x.shape[0]:
                skipped_length += 1
                continue
            confidence = float(forward(asr, x).max(axis=1).mean())
            if confidence < confidence_threshold:
                skipped_confidence += 1
                continue
            kept.append(Utterance(labels=hypothesis, features=x))
        synth = fit_synthesizer(list(labeled) + kept, alphabet_size)

        if text_pool:
            synthetic_pairs = [
                Utterance(labels=y, features=synthesize(synth, y, seed=int(seeds[1 + i]), with_noise=True))
                for i, y in enumerate(text_pool)
            ]
            asr = run_training_loop(
                asr, synthetic_pairs, 1, optimizer, int(seeds[0]), smoothing=smoothing
            )

        row = {
            "round": round_index,
            "pseudo_kept": len(kept),
            "pseudo_skipped_confidence": skipped_confidence,
            "pseudo_skipped_length": skipped_length,
        }
        if dev:
            from .metrics import corpus_cer
            from .recognizer import loss as frame_loss

            row["dev_cer"] = corpus_cer(asr, dev)
            row["dev_loss"] = float(
                np.mean([frame_loss(asr, u.features, u.labels, smoothing).loss for u in dev])
            )
        curve.append(row)
    return asr, synth, curve
