"""Task generation: alphabets, emissions, noise calibration, splits."""

import numpy as np
import pytest

from chaingem.tasks import (
    FRAMES_PER_SYMBOL,
    SymbolAlphabet,
    TaskSpec,
    Utterance,
    add_noise,
    make_task,
    sample_labels,
    split_dataset,
    split_labeled_unlabeled,
)
from chaingem.synthesizer import random_prototypes, synthesize


def test_alphabet_rejects_degenerate_size():
    with pytest.raises(ValueError):
        SymbolAlphabet(size=1)
    assert SymbolAlphabet(size=2).size == 2


def test_utterance_validates_frame_count():
    labels = np.array([0, 1, 0])
    good = np.zeros((FRAMES_PER_SYMBOL * 3, 4))
    Utterance(labels=labels, features=good)
    with pytest.raises(ValueError):
        Utterance(labels=labels, features=np.zeros((FRAMES_PER_SYMBOL * 3 - 1, 4)))


def test_utterance_rejects_repeated_adjacent_labels():
    with pytest.raises(ValueError):
        Utterance(labels=np.array([2, 2]), features=np.zeros((FRAMES_PER_SYMBOL * 2, 4)))


def test_sample_labels_range_and_no_adjacent_repeats():
    rng = np.random.default_rng(7)
    alphabet = SymbolAlphabet(size=6)
    for _ in range(200):
        length = int(rng.integers(1, 15))
        labels = sample_labels(rng, alphabet, length)
        assert labels.shape == (length,)
        assert labels.min() >= 0 and labels.max() < alphabet.size
        if length > 1:
            assert np.all(labels[1:] != labels[:-1])


def test_sample_labels_covers_alphabet():
    rng = np.random.default_rng(3)
    alphabet = SymbolAlphabet(size=5)
    seen = set()
    for _ in range(200):
        seen.update(int(v) for v in sample_labels(rng, alphabet, 8))
    assert seen == set(range(5))


def test_add_noise_hits_target_snr():
    # Empirical SNR within half a dB of the target, on 200+ frame signals.
    proto = random_prototypes(10, 8, emission_sigma=0.35, seed=11)
    rng = np.random.default_rng(5)
    alphabet = SymbolAlphabet(size=10)
    labels = sample_labels(rng, alphabet, 80)
    clean = synthesize(proto, labels, seed=1, with_noise=True)
    assert clean.shape[0] >= 200
    for target in (-5.0, 0.0, 10.0):
        noisy = add_noise(clean, target, seed=99)
        noise = noisy - clean
        measured = 10.0 * np.log10(np.mean(clean**2) / np.mean(noise**2))
        assert abs(measured - target) < 0.5, f"target {target} measured {measured:.3f}"


def test_add_noise_deterministic_and_zero_mean_shape():
    x = np.random.default_rng(0).normal(size=(240, 8))
    a = add_noise(x, 0.0, seed=4)
    b = add_noise(x, 0.0, seed=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, add_noise(x, 0.0, seed=5))


def test_add_noise_rejects_zero_signal():
    with pytest.raises(ValueError):
        add_noise(np.zeros((6, 2)), 0.0, seed=0)


def _spec(task_id=0, snr_db=None, n=50, seed=123):
    return TaskSpec(
        task_id=task_id, snr_db=snr_db, n_utterances=n, length_range=(4, 12), seed=seed
    )


def test_make_task_is_deterministic():
    proto = random_prototypes(10, 8, emission_sigma=0.35, seed=2)
    alphabet = SymbolAlphabet(size=10)
    a = make_task(_spec(), alphabet, proto)
    b = make_task(_spec(), alphabet, proto)
    for ua, ub in zip(a.train + a.dev + a.test, b.train + b.dev + b.test):
        np.testing.assert_array_equal(ua.labels, ub.labels)
        np.testing.assert_array_equal(ua.features, ub.features)


def test_make_task_split_sizes_follow_ratios():
    proto = random_prototypes(10, 8, emission_sigma=0.35, seed=2)
    task = make_task(_spec(n=100), SymbolAlphabet(size=10), proto, (0.94, 0.03, 0.03))
    assert (len(task.train), len(task.dev), len(task.test)) == (94, 3, 3)


def test_make_task_noise_condition_changes_features_only():
    proto = random_prototypes(10, 8, emission_sigma=0.35, seed=2)
    alphabet = SymbolAlphabet(size=10)
    clean = make_task(_spec(snr_db=None), alphabet, proto)
    noisy = make_task(_spec(task_id=1, snr_db=0.0), alphabet, proto)
    np.testing.assert_array_equal(clean.train[0].labels, noisy.train[0].labels)
    assert not np.array_equal(clean.train[0].features, noisy.train[0].features)


def test_split_dataset_partitions_exactly():
    rng = np.random.default_rng(8)
    utts = [
        Utterance(
            labels=np.array([i % 5, (i + 1) % 5]),
            features=rng.normal(size=(2 * FRAMES_PER_SYMBOL, 3)),
        )
        for i in range(37)
    ]
    train, dev, test = split_dataset(utts, (0.8, 0.1, 0.1), seed=21)
    assert len(train) + len(dev) + len(test) == 37
    ids = [id(u) for u in train + dev + test]
    assert len(set(ids)) == 37
    assert set(ids) == {id(u) for u in utts}


def test_split_dataset_rejects_bad_ratios():
    utts = [
        Utterance(labels=np.array([0, 1]), features=np.zeros((2 * FRAMES_PER_SYMBOL, 2)))
        for _ in range(10)
    ]
    with pytest.raises(ValueError):
        split_dataset(utts, (0.5, 0.4, 0.2), seed=0)


def test_split_labeled_unlabeled_counts_and_privacy():
    proto = random_prototypes(10, 8, emission_sigma=0.35, seed=2)
    task = make_task(_spec(n=100), SymbolAlphabet(size=10), proto)
    labeled, unlabeled = split_labeled_unlabeled(task.train, 0.3, seed=9)
    assert len(labeled) == round(0.3 * len(task.train))
    assert len(labeled) + len(unlabeled) == len(task.train)
    # the unlabeled side carries bare feature matrices, no labels
    assert all(isinstance(x, np.ndarray) and x.ndim == 2 for x in unlabeled)
    again, _ = split_labeled_unlabeled(task.train, 0.3, seed=9)
    for ua, ub in zip(labeled, again):
        np.testing.assert_array_equal(ua.features, ub.features)


def test_split_labeled_unlabeled_full_fraction():
    proto = random_prototypes(10, 8, emission_sigma=0.35, seed=2)
    task = make_task(_spec(n=20), SymbolAlphabet(size=10), proto)
    labeled, unlabeled = split_labeled_unlabeled(task.train, 1.0, seed=9)
    assert len(labeled) == len(task.train)
    assert unlabeled == []
