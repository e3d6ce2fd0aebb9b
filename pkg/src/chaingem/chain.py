"""Pipeline configuration and the three-stage chain.

Stage 1 trains the recognizer and fits the synthesizer on the labeled
fraction of the clean base task. Stage 2 lets the two models refine
each other on unlabeled features and text-only labels. Stage 3 learns
the follow-up tasks continually with the configured method and scores
every phase snapshot on every task.

All randomness derives from ``config.seed`` through named sub-seeds,
so rerunning any stage from serialized inputs is bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field, replace

import jsonschema
import numpy as np

from .baselines import ewc_prepare, ewc_train, fine_tune, multitask_train
from .gem import (
    EpisodicMemory,
    GemConfig,
    MemorySample,
    continual_learn,
    memory_capacity,
)
from .metrics import (
    CLMetrics,
    ErrorMatrix,
    build_error_matrix,
    compute_metrics,
    corpus_cer,
)
from .recognizer import (
    LayerShape,
    OptimizerConfig,
    RecognizerModel,
    init_model,
    train_supervised,
)
from .synthesizer import (
    SynthesizerModel,
    fit_synthesizer,
    random_prototypes,
    refine_semi_supervised,
)
from .tasks import (
    SymbolAlphabet,
    TaskDataset,
    TaskSpec,
    make_task,
    sample_labels,
    split_labeled_unlabeled,
)

METHODS = ("gem", "finetune", "ewc", "multitask")


class ConfigError(ValueError):
    """Raised for unreadable, malformed, or inconsistent configuration."""


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "alphabet_size": {"type": "integer", "minimum": 2},
        "feature_dim": {"type": "integer", "minimum": 1},
        "hidden_dim": {"type": "integer", "minimum": 1},
        "n_utterances": {"type": "integer", "minimum": 10},
        "length_range": {
            "type": "array",
            "items": {"type": "integer", "minimum": 1},
            "minItems": 2,
            "maxItems": 2,
        },
        "split_ratios": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "maximum": 1},
            "minItems": 3,
            "maxItems": 3,
        },
        "emission_sigma": {"type": "number", "exclusiveMinimum": 0},
        "prototype_scale": {"type": "number", "exclusiveMinimum": 0},
        "followup_snr_db": {"type": "array", "items": {"type": "number"}},
        "labeled_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "method": {"enum": list(METHODS)},
        "stages": {
            "type": "array",
            "items": {"enum": [1, 2, 3]},
            "minItems": 1,
            "uniqueItems": True,
        },
        "replay_source": {"enum": ["synthesizer", "real"]},
        "smoothing": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
            },
        },
        "stage1_epochs": {"type": "integer", "minimum": 0},
        "stage2_rounds": {"type": "integer", "minimum": 0},
        "stage2_text_pool": {"type": ["integer", "null"], "minimum": 1},
        "confidence_threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "stage3_epochs": {"type": "integer", "minimum": 0},
        "stage3_learning_rate": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "gem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta": {"type": "number", "exclusiveMinimum": 0},
                "memory_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "qp_tolerance": {"type": "number", "exclusiveMinimum": 0},
                "qp_max_iterations": {"type": "integer", "minimum": 1},
            },
        },
        "ewc_lambda": {"type": "number", "minimum": 0},
        "eval_every": {"type": "integer", "minimum": 1},
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    alphabet_size: int = 10
    feature_dim: int = 8
    hidden_dim: int = 16
    n_utterances: int = 600
    length_range: tuple[int, int] = (4, 12)
    split_ratios: tuple[float, float, float] = (0.94, 0.03, 0.03)
    emission_sigma: float = 0.35
    prototype_scale: float = 1.0
    followup_snr_db: tuple[float, ...] = (0.0,)
    labeled_fraction: float = 0.3
    method: str = "gem"
    stages: tuple[int, ...] = (1, 2, 3)
    replay_source: str = "synthesizer"
    smoothing: float = 0.1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    stage1_epochs: int = 30
    stage2_rounds: int = 5
    stage2_text_pool: int | None = None
    confidence_threshold: float = 0.8
    stage3_epochs: int = 8
    stage3_learning_rate: float | None = None
    gem: GemConfig = field(default_factory=GemConfig)
    ewc_lambda: float = 100.0
    eval_every: int = 25

    @property
    def n_tasks(self) -> int:
        return 1 + len(self.followup_snr_db)

    @property
    def model_shape(self) -> LayerShape:
        return LayerShape(self.feature_dim, self.hidden_dim, self.alphabet_size)

    def stage3_optimizer(self) -> OptimizerConfig:
        if self.stage3_learning_rate is None:
            return self.optimizer
        return replace(self.optimizer, learning_rate=self.stage3_learning_rate)


def resolve_config(raw: dict) -> PipelineConfig:
    """Validate a raw mapping against the schema and apply defaults."""

    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"invalid config: {err.message}") from err

    kwargs = dict(raw)
    if "length_range" in kwargs:
        kwargs["length_range"] = tuple(kwargs["length_range"])
    if "split_ratios" in kwargs:
        kwargs["split_ratios"] = tuple(float(r) for r in kwargs["split_ratios"])
    if "followup_snr_db" in kwargs:
        kwargs["followup_snr_db"] = tuple(float(s) for s in kwargs["followup_snr_db"])
    if "stages" in kwargs:
        kwargs["stages"] = tuple(sorted(kwargs["stages"]))
    if "optimizer" in kwargs:
        kwargs["optimizer"] = OptimizerConfig(**kwargs["optimizer"])
    if "gem" in kwargs:
        kwargs["gem"] = GemConfig(**kwargs["gem"])

    config = PipelineConfig(**kwargs)

    lo, hi = config.length_range
    if lo > hi:
        raise ConfigError(f"length_range must be ordered, got {config.length_range}")
    if abs(sum(config.split_ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split_ratios must sum to 1, got {config.split_ratios}")
    if 2 in config.stages:
        if config.labeled_fraction >= 1.0:
            raise ConfigError("stage 2 needs labeled_fraction < 1 (nothing to refine otherwise)")
        if config.stage2_rounds < 1:
            raise ConfigError("stage 2 enabled but stage2_rounds is 0")
    if 3 in config.stages and not config.followup_snr_db:
        raise ConfigError("stage 3 enabled but followup_snr_db lists no tasks")
    return config


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return resolve_config(raw)


def config_to_dict(config: PipelineConfig) -> dict:
    return {
        "seed": config.seed,
        "alphabet_size": config.alphabet_size,
        "feature_dim": config.feature_dim,
        "hidden_dim": config.hidden_dim,
        "n_utterances": config.n_utterances,
        "length_range": list(config.length_range),
        "split_ratios": list(config.split_ratios),
        "emission_sigma": config.emission_sigma,
        "prototype_scale": config.prototype_scale,
        "followup_snr_db": list(config.followup_snr_db),
        "labeled_fraction": config.labeled_fraction,
        "method": config.method,
        "stages": list(config.stages),
        "replay_source": config.replay_source,
        "smoothing": config.smoothing,
        "optimizer": {
            "learning_rate": config.optimizer.learning_rate,
            "beta1": config.optimizer.beta1,
            "beta2": config.optimizer.beta2,
            "epsilon": config.optimizer.epsilon,
            "batch_size": config.optimizer.batch_size,
        },
        "stage1_epochs": config.stage1_epochs,
        "stage2_rounds": config.stage2_rounds,
        "stage2_text_pool": config.stage2_text_pool,
        "confidence_threshold": config.confidence_threshold,
        "stage3_epochs": config.stage3_epochs,
        "stage3_learning_rate": config.stage3_learning_rate,
        "gem": {
            "delta": config.gem.delta,
            "memory_fraction": config.gem.memory_fraction,
            "qp_tolerance": config.gem.qp_tolerance,
            "qp_max_iterations": config.gem.qp_max_iterations,
        },
        "ewc_lambda": config.ewc_lambda,
        "eval_every": config.eval_every,
    }


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(canonical.encode("utf-8")).hexdigest()


def derive_seed(root: int, *tags) -> int:
    """Stable named sub-seed; every stage draws from its own stream."""

    entropy = [root] + [zlib.crc32(str(t).encode("utf-8")) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentData:
    alphabet: SymbolAlphabet
    generator: SynthesizerModel
    tasks: tuple[TaskDataset, ...]
    labeled: tuple
    unlabeled: tuple
    text_pool: tuple


def prepare_data(config: PipelineConfig) -> ExperimentData:
    """Generate every task, the labeled/unlabeled split, and the text pool."""

    alphabet = SymbolAlphabet(config.alphabet_size)
    generator = random_prototypes(
        config.alphabet_size,
        config.feature_dim,
        config.emission_sigma,
        seed=derive_seed(config.seed, "generator"),
        scale=config.prototype_scale,
    )
    specs = [
        TaskSpec(
            task_id=0,
            snr_db=None,
            n_utterances=config.n_utterances,
            length_range=config.length_range,
            seed=derive_seed(config.seed, "task", 0),
        )
    ]
    for i, snr in enumerate(config.followup_snr_db, start=1):
        specs.append(
            TaskSpec(
                task_id=i,
                snr_db=snr,
                n_utterances=config.n_utterances,
                length_range=config.length_range,
                seed=derive_seed(config.seed, "task", i),
            )
        )
    tasks = tuple(make_task(spec, alphabet, generator, config.split_ratios) for spec in specs)

    labeled, unlabeled = split_labeled_unlabeled(
        tasks[0].train, config.labeled_fraction, derive_seed(config.seed, "labeled-split")
    )

    pool_size = config.stage2_text_pool if config.stage2_text_pool is not None else len(unlabeled)
    text_rng = np.random.default_rng(derive_seed(config.seed, "text-pool"))
    lo, hi = config.length_range
    text_pool = tuple(
        sample_labels(text_rng, alphabet, int(text_rng.integers(lo, hi + 1)))
        for _ in range(pool_size)
    )
    return ExperimentData(
        alphabet=alphabet,
        generator=generator,
        tasks=tasks,
        labeled=tuple(labeled),
        unlabeled=tuple(unlabeled),
        text_pool=text_pool,
    )


@dataclass(frozen=True)
class StageOneResult:
    asr: RecognizerModel
    synth: SynthesizerModel
    report: dict
    curves: list


@dataclass(frozen=True)
class StageTwoResult:
    asr: RecognizerModel
    synth: SynthesizerModel
    report: dict
    curves: list


@dataclass(frozen=True)
class StageThreeResult:
    asr: RecognizerModel
    matrix: ErrorMatrix
    metrics: CLMetrics
    reference_matrix: ErrorMatrix
    reference_metrics: CLMetrics
    curves: list
    final_cers: dict
    reference_final_cers: dict
    memories: dict
    trace: list
    report: dict


@dataclass(frozen=True)
class PipelineResult:
    config: PipelineConfig
    data: ExperimentData
    asr: RecognizerModel
    synth: SynthesizerModel
    stage1: StageOneResult | None
    stage2: StageTwoResult | None
    stage3: StageThreeResult | None
    curves: list


def run_stage1(config: PipelineConfig, data: ExperimentData | None = None) -> StageOneResult:
    """Supervised base training on the labeled fraction of the clean task."""

    data = data or prepare_data(config)
    base = data.tasks[0]
    asr = init_model(config.model_shape, derive_seed(config.seed, "asr-init"))
    asr, epoch_curve = train_supervised(
        asr,
        list(data.labeled),
        config.stage1_epochs,
        config.optimizer,
        derive_seed(config.seed, "stage1-train"),
        dev=base.dev,
        smoothing=config.smoothing,
    )
    synth = fit_synthesizer(data.labeled, config.alphabet_size)

    report = {
        "stage1_labeled_utterances": len(data.labeled),
        "stage1_clean_dev_cer": corpus_cer(asr, base.dev),
        "stage1_clean_test_cer": corpus_cer(asr, base.test),
    }
    for task in data.tasks[1:]:
        report[f"stage1_cross_test_cer_task_{task.spec.task_id}"] = corpus_cer(asr, task.test)

    curves = [
        {
            "stage": 1,
            "method": "stage1",
            "step": row["step"],
            "task_id": 0,
            "split": "dev",
            "cer": row["dev_cer"],
            "loss": row["dev_loss"],
        }
        for row in epoch_curve
        if "dev_cer" in row
    ]
    return StageOneResult(asr=asr, synth=synth, report=report, curves=curves)


def run_stage2(
    config: PipelineConfig,
    asr: RecognizerModel,
    synth: SynthesizerModel,
    data: ExperimentData | None = None,
) -> StageTwoResult:
    """Mutual semi-supervised refinement; a no-op when stage 2 is disabled."""

    if 2 not in config.stages or config.stage2_rounds == 0:
        return StageTwoResult(asr=asr, synth=synth, report={"stage2_enabled": False}, curves=[])
    data = data or prepare_data(config)
    base = data.tasks[0]
    before = corpus_cer(asr, base.dev)
    asr, synth, rounds = refine_semi_supervised(
        asr,
        synth,
        list(data.labeled),
        list(data.unlabeled),
        list(data.text_pool),
        config.stage2_rounds,
        derive_seed(config.seed, "stage2"),
        dev=base.dev,
        optimizer=config.optimizer,
        smoothing=config.smoothing,
        confidence_threshold=config.confidence_threshold,
    )
    report = {
        "stage2_enabled": True,
        "stage2_rounds": config.stage2_rounds,
        "stage2_dev_cer_before": before,
        "stage2_dev_cer_after": rounds[-1]["dev_cer"] if rounds else before,
        "stage2_pseudo_kept_last_round": rounds[-1]["pseudo_kept"] if rounds else 0,
    }
    for task in data.tasks:
        report[f"stage2_test_cer_task_{task.spec.task_id}"] = corpus_cer(asr, task.test)
    curves = [
        {
            "stage": 2,
            "method": "stage2",
            "step": row["round"],
            "task_id": 0,
            "split": "dev",
            "cer": row.get("dev_cer", ""),
            "loss": row.get("dev_loss", ""),
        }
        for row in rounds
    ]
    return StageTwoResult(asr=asr, synth=synth, report=report, curves=curves)


def _steps_per_run(n_items: int, batch_size: int, epochs: int) -> int:
    return epochs * ((n_items + batch_size - 1) // batch_size)


def _run_finetune_sequence(config, asr, data, label: str):
    """Sequential fine-tuning over the follow-up tasks; returns snapshots and curves."""

    optimizer = config.stage3_optimizer()
    snapshots = [asr]
    curves = []
    offset = 0
    for task in data.tasks[1:]:
        asr, rows = fine_tune(
            asr,
            task,
            config.stage3_epochs,
            optimizer,
            derive_seed(config.seed, "stage3", task.spec.task_id),
            eval_tasks=data.tasks,
            smoothing=config.smoothing,
        )
        for row in rows:
            curves.append({"stage": 3, "method": label, **row, "step": row["step"] + offset})
        offset += _steps_per_run(len(task.train), optimizer.batch_size, config.stage3_epochs)
        snapshots.append(asr)
    return snapshots, curves


def run_stage3(
    config: PipelineConfig,
    asr: RecognizerModel,
    synth: SynthesizerModel,
    data: ExperimentData | None = None,
) -> StageThreeResult:
    """Continual learning over the follow-up tasks with the configured method.

    The synthesizer is consulted for replay generation only; it is not
    updated here. A plain fine-tuning pass under the same seeds always
    runs alongside as the forward-transfer reference.
    """

    data = data or prepare_data(config)
    if len(data.tasks) < 2:
        raise ConfigError("stage 3 needs at least one follow-up task")

    trace: list = []
    memories: dict[int, EpisodicMemory] = {}
    curves: list = []

    if config.method == "gem":
        base_cap = memory_capacity(config.gem.memory_fraction, len(data.tasks[0].train))
        if config.replay_source == "real":
            rng = np.random.default_rng(derive_seed(config.seed, "base-memory"))
            take = min(base_cap, len(data.labeled))
            picks = rng.choice(len(data.labeled), size=take, replace=False)
            memories[0] = EpisodicMemory(
                task_id=0,
                capacity=base_cap,
                samples=tuple(
                    MemorySample(
                        features=data.labeled[int(i)].features,
                        labels=data.labeled[int(i)].labels,
                        synthetic=False,
                    )
                    for i in picks
                ),
            )
        model = asr
        snapshots = [model]
        offset = 0
        for task in data.tasks[1:]:
            model, memories, logs = continual_learn(
                model,
                synth,
                task,
                base_cap,
                config.gem,
                epochs=config.stage3_epochs,
                seed=derive_seed(config.seed, "stage3", task.spec.task_id),
                memories=memories,
                eval_tasks=data.tasks,
                eval_every=config.eval_every,
                smoothing=config.smoothing,
                batch_size=config.optimizer.batch_size,
                replay_source=config.replay_source,
                trace=trace,
            )
            for row in logs:
                curves.append({"stage": 3, "method": "gem", **row, "step": row["step"] + offset})
            offset += _steps_per_run(
                len(task.train), config.optimizer.batch_size, config.stage3_epochs
            )
            snapshots.append(model)
    elif config.method == "finetune":
        snapshots, curves = _run_finetune_sequence(config, asr, data, "finetune")
    elif config.method == "ewc":
        state = ewc_prepare(asr, data.labeled, config.smoothing, config.ewc_lambda)
        optimizer = config.stage3_optimizer()
        model = asr
        snapshots = [model]
        offset = 0
        for task in data.tasks[1:]:
            model, rows = ewc_train(
                model,
                state,
                task,
                config.stage3_epochs,
                optimizer,
                derive_seed(config.seed, "stage3", task.spec.task_id),
                eval_tasks=data.tasks,
                smoothing=config.smoothing,
            )
            for row in rows:
                curves.append({"stage": 3, "method": "ewc", **row, "step": row["step"] + offset})
            offset += _steps_per_run(len(task.train), optimizer.batch_size, config.stage3_epochs)
            snapshots.append(model)
    elif config.method == "multitask":
        base_as_labeled = replace(data.tasks[0], train=list(data.labeled))
        model, rows = multitask_train(
            config.model_shape,
            [base_as_labeled, *data.tasks[1:]],
            config.stage3_epochs,
            config.stage3_optimizer(),
            derive_seed(config.seed, "multitask"),
            eval_tasks=data.tasks,
            smoothing=config.smoothing,
        )
        curves.extend({"stage": 3, "method": "multitask", **row} for row in rows)
        snapshots = [asr] + [model] * len(data.tasks[1:])
    else:
        raise ConfigError(f"unknown method {config.method!r}")

    matrix = build_error_matrix(snapshots, data.tasks)

    if config.method == "finetune":
        reference_matrix = matrix
    else:
        ref_snapshots, ref_curves = _run_finetune_sequence(config, asr, data, "finetune_reference")
        curves.extend(ref_curves)
        reference_matrix = build_error_matrix(ref_snapshots, data.tasks)

    reference_diag = {
        reference_matrix.task_ids[j]: float(reference_matrix.entries[j, j])
        for j in range(1, reference_matrix.entries.shape[0])
    }
    summary = compute_metrics(matrix, reference_diag)
    reference_summary = compute_metrics(reference_matrix, reference_diag)

    last = matrix.entries.shape[0] - 1
    final_cers = {
        matrix.task_ids[j]: float(matrix.entries[last, j]) for j in range(len(matrix.task_ids))
    }
    reference_final = {
        reference_matrix.task_ids[j]: float(reference_matrix.entries[last, j])
        for j in range(len(reference_matrix.task_ids))
    }

    report = {
        "avg": summary.avg,
        "bwt": summary.bwt,
        "fwt": summary.fwt,
        "reference_avg": reference_summary.avg,
        "reference_bwt": reference_summary.bwt,
    }
    for j, task_id in enumerate(matrix.task_ids):
        report[f"entering_cer_task_{task_id}"] = float(matrix.entries[0, j])
    for task_id, value in final_cers.items():
        report[f"final_cer_task_{task_id}"] = value
    for task_id, value in reference_final.items():
        report[f"reference_final_cer_task_{task_id}"] = value

    return StageThreeResult(
        asr=snapshots[-1],
        matrix=matrix,
        metrics=summary,
        reference_matrix=reference_matrix,
        reference_metrics=reference_summary,
        curves=curves,
        final_cers=final_cers,
        reference_final_cers=reference_final,
        memories=memories,
        trace=trace,
        report=report,
    )


def run_pipeline(
    config: PipelineConfig,
    initial: tuple[RecognizerModel, SynthesizerModel] | None = None,
) -> PipelineResult:
    """Execute the stages named in ``config.stages`` in order.

    When stage 1 is skipped, ``initial`` must carry the recognizer and
    synthesizer to start from (typically loaded from checkpoints).
    """

    if not config.stages:
        raise ConfigError("no stages to run")
    if 1 not in config.stages and initial is None:
        raise ConfigError("stage 1 is skipped but no initial models were provided")

    data = prepare_data(config)
    curves: list = []
    stage1 = stage2 = stage3 = None

    if 1 in config.stages:
        stage1 = run_stage1(config, data)
        asr, synth = stage1.asr, stage1.synth
        curves.extend(stage1.curves)
    else:
        asr, synth = initial

    if 2 in config.stages:
        stage2 = run_stage2(config, asr, synth, data)
        asr, synth = stage2.asr, stage2.synth
        curves.extend(stage2.curves)

    if 3 in config.stages:
        stage3 = run_stage3(config, asr, synth, data)
        asr = stage3.asr
        curves.extend(stage3.curves)

    return PipelineResult(
        config=config,
        data=data,
        asr=asr,
        synth=synth,
        stage1=stage1,
        stage2=stage2,
        stage3=stage3,
        curves=curves,
    )
