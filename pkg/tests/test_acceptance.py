"""Acceptance suite: exact property checks plus seeded ordinal runs.

Criteria 1-7 verify algebraic contracts of the core pieces exactly.
Criteria 8-14 rerun the pipeline across five seeds and check the
directional claims that hold at this scale. Every test prints one
PASS/FAIL line for its criterion.
"""

import itertools
import math
import time

import numpy as np
import pytest

from chaingem.baselines import (
    ewc_penalty,
    ewc_penalty_gradient,
    ewc_prepare,
    ewc_train,
    fine_tune,
    multitask_train,
)
from chaingem.chain import resolve_config, run_pipeline
from chaingem.gem import GemConfig, gem_step, project
from chaingem.metrics import ErrorMatrix, cer, compute_metrics
from chaingem.recognizer import (
    LayerShape,
    OptimizerConfig,
    RecognizerModel,
    gradient,
    init_model,
    loss,
    sgd_step,
    train_supervised,
)
from chaingem.synthesizer import random_prototypes
from chaingem.tasks import SymbolAlphabet, TaskSpec, Utterance, add_noise, make_task

SEEDS = (0, 1, 2, 3, 4)


def _verdict(number: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    print(f"[criterion {number:2d}] {status}: {detail}")
    assert passed, f"criterion {number}: {detail}"


# ---------------------------------------------------------------------------
# property checks


def _oracle_objective(g: np.ndarray, refs: list[np.ndarray]) -> float:
    """Best objective over every candidate active set of the dual QP."""

    ref_matrix = np.stack(refs)
    gram = ref_matrix @ ref_matrix.T
    margins = ref_matrix @ g
    best = None
    for size in range(len(refs) + 1):
        for subset in itertools.combinations(range(len(refs)), size):
            duals = np.zeros(len(refs))
            if subset:
                idx = list(subset)
                sol, *_ = np.linalg.lstsq(gram[np.ix_(idx, idx)], -margins[idx], rcond=None)
                duals[idx] = sol
            if np.any(duals < -1e-10):
                continue
            candidate = g + ref_matrix.T @ duals
            if np.any(ref_matrix @ candidate < -1e-8):
                continue
            objective = 0.5 * float(np.sum((candidate - g) ** 2))
            if best is None or objective < best:
                best = objective
    assert best is not None
    return best


def test_projection_against_enumeration_oracle():
    rng = np.random.default_rng(2024)
    started = time.monotonic()
    worst_margin = 0.0
    for _ in range(500):
        dim = int(rng.integers(2, 9))
        n_refs = int(rng.integers(1, 4))
        g = rng.normal(size=dim)
        refs = [rng.normal(size=dim) for _ in range(n_refs)]
        result = project(g, refs)
        ref_matrix = np.stack(refs)

        margins = ref_matrix @ result.projected
        worst_margin = min(worst_margin, float(margins.min()))
        assert np.all(margins >= -1e-9)

        objective = 0.5 * float(np.sum((result.projected - g) ** 2))
        assert objective <= _oracle_objective(g, refs) + 1e-4

        assert np.all(result.duals >= 0.0)
        rebuilt = g + ref_matrix.T @ result.duals
        assert np.linalg.norm(result.projected - rebuilt) <= 1e-6
    elapsed = time.monotonic() - started
    ok = elapsed < 10.0
    _verdict(
        1,
        ok,
        f"500 projections match the oracle (worst margin {worst_margin:.2e}, {elapsed:.1f}s)",
    )


def test_projection_identity_on_feasible_input():
    rng = np.random.default_rng(77)
    for _ in range(200):
        dim = int(rng.integers(2, 9))
        n_refs = int(rng.integers(1, 4))
        g = rng.normal(size=dim)
        refs = []
        for _ in range(n_refs):
            r = rng.normal(size=dim)
            if float(r @ g) < 0.0:
                r = -r
            refs.append(r)
        result = project(g, refs)
        assert np.array_equal(result.projected, g)
        assert result.iterations == 0
        assert np.all(result.duals == 0.0)
    _verdict(2, True, "feasible gradients pass through untouched, 200 instances")


def _random_utterance(rng, n_labels: int, alphabet_size: int, feature_dim: int) -> Utterance:
    labels = [int(rng.integers(0, alphabet_size))]
    while len(labels) < n_labels:
        step = int(rng.integers(1, alphabet_size))
        labels.append((labels[-1] + step) % alphabet_size)
    return Utterance(
        labels=np.asarray(labels, dtype=np.int64),
        features=rng.normal(size=(3 * n_labels, feature_dim)),
    )


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(31)
    shape = LayerShape(4, 6, 5)
    worst_data = 0.0
    for _ in range(50):
        model = init_model(shape, int(rng.integers(0, 2**31)))
        batch = [
            _random_utterance(rng, int(rng.integers(1, 5)), shape.output_dim, shape.input_dim)
            for _ in range(2)
        ]
        analytic = gradient(model, batch, 0.1)
        eps = 1e-6
        fd = np.zeros_like(analytic)
        for i in range(model.theta.size):
            up = model.theta.copy()
            up[i] += eps
            down = model.theta.copy()
            down[i] -= eps
            up_model = RecognizerModel(theta=up, shape=model.shape)
            down_model = RecognizerModel(theta=down, shape=model.shape)
            hi = np.mean([loss(up_model, u.features, u.labels, 0.1).loss for u in batch])
            lo = np.mean([loss(down_model, u.features, u.labels, 0.1).loss for u in batch])
            fd[i] = (hi - lo) / (2 * eps)
        rel = np.abs(fd - analytic).max() / max(np.abs(analytic).max(), 1e-12)
        worst_data = max(worst_data, rel)
        assert rel < 1e-3

    worst_penalty = 0.0
    for _ in range(50):
        n = int(rng.integers(3, 30))
        anchor = rng.normal(size=n)
        fisher = rng.uniform(0.0, 2.0, size=n)
        lam = float(rng.uniform(0.1, 50.0))
        state = _ewc_state(anchor, fisher, lam)
        theta = rng.normal(size=n)
        analytic = ewc_penalty_gradient(state, theta)
        eps = 1e-5
        fd = np.zeros(n)
        for i in range(n):
            up = theta.copy()
            up[i] += eps
            down = theta.copy()
            down[i] -= eps
            fd[i] = (ewc_penalty(state, up) - ewc_penalty(state, down)) / (2 * eps)
        rel = np.abs(fd - analytic).max() / max(np.abs(analytic).max(), 1e-12)
        worst_penalty = max(worst_penalty, rel)
        assert rel < 1e-6
    _verdict(
        3,
        True,
        f"finite differences agree (data term {worst_data:.1e}, penalty {worst_penalty:.1e})",
    )


def _ewc_state(anchor, fisher, lam):
    from chaingem.baselines import EwcState

    return EwcState(anchor_theta=anchor, fisher_diag=fisher, lam=lam)


def _edit_distance_dp(ref, hyp) -> int:
    table = np.zeros((len(ref) + 1, len(hyp) + 1), dtype=np.int64)
    table[:, 0] = np.arange(len(ref) + 1)
    table[0, :] = np.arange(len(hyp) + 1)
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            table[i, j] = min(
                table[i - 1, j] + 1, table[i, j - 1] + 1, table[i - 1, j - 1] + cost
            )
    return int(table[len(ref), len(hyp)])


def test_cer_matches_dp_oracle():
    rng = np.random.default_rng(405)
    for _ in range(1000):
        ref = rng.integers(0, 6, size=rng.integers(1, 12)).tolist()
        hyp = rng.integers(0, 6, size=rng.integers(0, 12)).tolist()
        assert cer(ref, hyp) == _edit_distance_dp(ref, hyp) / len(ref)
    sequence = [3, 1, 4, 1]
    assert cer(sequence, sequence) == 0.0
    assert cer([2, 5], []) == 1.0
    assert cer([0], [1, 2, 3, 4, 5]) == 5.0
    _verdict(4, True, "CER equals the DP edit distance on 1000 pairs, identities hold")


def test_metrics_hand_arithmetic():
    two = ErrorMatrix(
        entries=np.array([[0.10, 0.50], [0.15, 0.20]]),
        phase_labels=("after_task_0", "after_task_1"),
        task_ids=(0, 1),
    )
    m = compute_metrics(two, {1: 0.25})
    assert m.avg == (0.15 + 0.20) / 2
    assert m.bwt == 0.15 - 0.10
    assert m.fwt == 0.20 - 0.25

    three = ErrorMatrix(
        entries=np.array(
            [[0.9, 0.8, 0.7], [0.2, 0.5, 0.6], [0.3, 0.1, 0.4]]
        ),
        phase_labels=("p0", "p1", "p2"),
        task_ids=(0, 1, 2),
    )
    m3 = compute_metrics(three, {1: 0.45, 2: 0.5})
    assert m3.avg == np.mean([0.3, 0.1, 0.4])
    assert m3.bwt == np.mean([0.3 - 0.9, 0.1 - 0.5])
    assert m3.fwt == np.mean([0.5 - 0.45, 0.4 - 0.5])

    constant = ErrorMatrix(
        entries=np.full((3, 3), 0.37),
        phase_labels=("p0", "p1", "p2"),
        task_ids=(0, 1, 2),
    )
    assert compute_metrics(constant, {1: 0.37, 2: 0.37}).bwt == 0.0

    scale = 3.0
    scaled = compute_metrics(
        ErrorMatrix(entries=three.entries * scale, phase_labels=three.phase_labels,
                    task_ids=three.task_ids),
        {1: 0.45 * scale, 2: 0.5 * scale},
    )
    for got, base in ((scaled.avg, m3.avg), (scaled.bwt, m3.bwt), (scaled.fwt, m3.fwt)):
        assert math.isclose(got, scale * base, rel_tol=1e-12, abs_tol=1e-15)
    _verdict(5, True, "hand-built matrices give exact AVG/BWT/FWT, scaling is linear")


def _tiny_task(seed: int = 0):
    alphabet = SymbolAlphabet(6)
    proto = random_prototypes(6, 5, 0.3, seed=seed)
    spec = TaskSpec(task_id=0, snr_db=None, n_utterances=40, length_range=(3, 6), seed=seed)
    return make_task(spec, alphabet, proto, (0.8, 0.1, 0.1))


def test_training_reductions_are_bitwise():
    task = _tiny_task(3)
    optimizer = OptimizerConfig(batch_size=8)
    shape = LayerShape(5, 7, 6)
    model = init_model(shape, 12)

    state = ewc_prepare(model, task.train, smoothing=0.1, lam=0.0)
    via_ewc, _ = ewc_train(model, state, task, 2, optimizer, 99)
    via_ft, _ = fine_tune(model, task, 2, optimizer, 99)
    assert np.array_equal(via_ewc.theta, via_ft.theta)

    config = GemConfig()
    batch = task.train[:4]
    stepped, result = gem_step(model, batch, {}, config)
    plain = sgd_step(model, gradient(model, batch, 0.1), config.delta)
    assert np.array_equal(stepped.theta, plain.theta)
    assert result.iterations == 0

    joint, _ = multitask_train(shape, [task], 3, optimizer, 41)
    solo, _ = train_supervised(init_model(shape, 41), task.train, 3, optimizer, 41)
    assert np.array_equal(joint.theta, solo.theta)
    _verdict(6, True, "EWC(0), empty-memory GEM, and single-task multitask reduce bitwise")


def test_noise_calibration():
    rng = np.random.default_rng(88)
    worst = 0.0
    for target in (-5.0, 0.0, 10.0):
        for trial in range(10):
            x = rng.normal(size=(240, 8))
            y = add_noise(x, target, seed=int(rng.integers(0, 2**31)))
            noise = y - x
            measured = 10.0 * np.log10(np.mean(x**2) / np.mean(noise**2))
            worst = max(worst, abs(measured - target))
            assert abs(measured - target) <= 0.5
    _verdict(7, True, f"empirical SNR within 0.5 dB of target (worst {worst:.3f} dB)")


# ---------------------------------------------------------------------------
# seeded ordinal runs


def _pipeline(**overrides):
    return run_pipeline(resolve_config(overrides))


DEEP_NOISE = {
    "n_utterances": 800,
    "emission_sigma": 0.25,
    "followup_snr_db": [-10.0],
    "stage1_epochs": 50,
    "stage3_epochs": 80,
    "stage3_learning_rate": 0.01,
}


@pytest.fixture(scope="module")
def deep_noise_runs():
    """GEM with real replay, EWC, and the speech-chain pipeline, 5 seeds.

    Every run carries its own fine-tuning reference computed under the
    same derived seeds, so comparisons stay paired.
    """

    runs = {"sup": [], "ewc": [], "chain": []}
    for seed in SEEDS:
        runs["sup"].append(
            _pipeline(
                **DEEP_NOISE,
                seed=seed,
                labeled_fraction=1.0,
                stages=[1, 3],
                method="gem",
                replay_source="real",
            ).stage3
        )
        runs["ewc"].append(
            _pipeline(
                **DEEP_NOISE,
                seed=seed,
                labeled_fraction=1.0,
                stages=[1, 3],
                method="ewc",
            ).stage3
        )
        runs["chain"].append(
            _pipeline(
                **DEEP_NOISE,
                seed=seed,
                labeled_fraction=0.3,
                stages=[1, 2, 3],
                stage2_rounds=5,
                method="gem",
                replay_source="synthesizer",
            ).stage3
        )
    return runs


def test_finetuning_forgets_base_task(deep_noise_runs):
    hits = 0
    deltas = []
    for run in deep_noise_runs["sup"]:
        entering = float(run.reference_matrix.entries[0, 0])
        final = float(run.reference_matrix.entries[-1, 0])
        deltas.append(final - entering)
        hits += final > entering
    _verdict(
        8,
        hits >= 4,
        f"fine-tuning raises base-task CER in {hits}/5 seeds (deltas {np.round(deltas, 3)})",
    )


def test_gem_mitigates_forgetting(deep_noise_runs):
    hits = 0
    for run in deep_noise_runs["sup"]:
        base_better = run.final_cers[0] < run.reference_final_cers[0]
        noisy_close = run.final_cers[1] <= 1.25 * run.reference_final_cers[1]
        hits += base_better and noisy_close
    _verdict(9, hits >= 4, f"GEM beats fine-tuning on the base task in {hits}/5 seeds")


@pytest.fixture(scope="module")
def refinement_runs():
    return [
        _pipeline(
            n_utterances=800,
            seed=seed,
            labeled_fraction=0.3,
            stages=[1, 2],
            stage1_epochs=20,
            stage2_rounds=5,
        ).stage2
        for seed in SEEDS
    ]


def test_stage2_refinement_helps(refinement_runs):
    hits = 0
    pairs = []
    for stage2 in refinement_runs:
        before = stage2.report["stage2_dev_cer_before"]
        after = stage2.report["stage2_dev_cer_after"]
        pairs.append((round(before, 3), round(after, 3)))
        hits += after <= before
    _verdict(10, hits >= 4, f"stage 2 lowers clean dev CER in {hits}/5 seeds {pairs}")


def test_chain_error_reduction_vs_finetuning(deep_noise_runs):
    reductions = []
    for task_id in (0, 1):
        gem_mean = np.mean([run.final_cers[task_id] for run in deep_noise_runs["chain"]])
        ft_mean = np.mean(
            [run.reference_final_cers[task_id] for run in deep_noise_runs["chain"]]
        )
        reductions.append(1.0 - gem_mean / ft_mean)
    average = float(np.mean(reductions))
    _verdict(
        11,
        average >= 0.25,
        f"average CER reduction vs fine-tuning is {average:.1%} (per task {np.round(reductions, 3)})",
    )


FRACTIONS = (0.3, 0.5, 0.7)


@pytest.fixture(scope="module")
def fraction_sweep():
    table = {}
    for fraction in FRACTIONS:
        cells = []
        for seed in SEEDS:
            stage2 = _pipeline(
                n_utterances=1200,
                emission_sigma=0.5,
                followup_snr_db=[10.0],
                seed=seed,
                labeled_fraction=fraction,
                stages=[1, 2],
                stage1_epochs=20,
                stage2_rounds=1,
            ).stage2
            cells.append(
                (
                    stage2.report["stage2_test_cer_task_0"],
                    stage2.report["stage2_test_cer_task_1"],
                )
            )
        table[fraction] = cells
    return table


def test_labeled_fraction_trend(fraction_sweep):
    means = [float(np.mean(fraction_sweep[f])) for f in FRACTIONS]
    ok = means[0] >= means[1] >= means[2]
    _verdict(
        12,
        ok,
        "mean test CER over both tasks is non-increasing in the labeled fraction "
        f"({', '.join(f'{f}: {m:.3f}' for f, m in zip(FRACTIONS, means))})",
    )


@pytest.fixture(scope="module")
def boundary_runs():
    return [
        _pipeline(
            n_utterances=800,
            seed=seed,
            labeled_fraction=0.3,
            stages=[1],
            stage1_epochs=30,
            followup_snr_db=[0.0],
        ).stage1
        for seed in SEEDS
    ]


def test_cross_condition_gap(boundary_runs):
    hits = 0
    ratios = []
    for stage1 in boundary_runs:
        clean = stage1.report["stage1_clean_test_cer"]
        cross = stage1.report["stage1_cross_test_cer_task_1"]
        ratios.append(math.inf if clean == 0 else cross / clean)
        hits += cross >= 3.0 * clean
    _verdict(
        13,
        hits == 5,
        f"noisy-condition CER is at least 3x the clean CER in {hits}/5 seeds",
    )


def test_bwt_ordering(deep_noise_runs):
    order_hits = 0
    ewc_hits = 0
    rows = []
    for sup, chain, ewc in zip(
        deep_noise_runs["sup"], deep_noise_runs["chain"], deep_noise_runs["ewc"]
    ):
        sup_bwt = sup.metrics.bwt
        chain_bwt = chain.metrics.bwt
        ft_bwt = sup.reference_metrics.bwt
        rows.append((round(sup_bwt, 4), round(chain_bwt, 4), round(ft_bwt, 4)))
        order_hits += sup_bwt <= chain_bwt < ft_bwt
        ewc_hits += ewc.metrics.bwt < ewc.reference_metrics.bwt
    ok = order_hits >= 4 and ewc_hits >= 3
    _verdict(
        14,
        ok,
        f"BWT ordering GEM <= chain < fine-tune holds in {order_hits}/5 seeds, "
        f"EWC < fine-tune in {ewc_hits}/5 (sup, chain, ft: {rows})",
    )
