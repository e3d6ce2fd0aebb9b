"""Desk-scale speech-chain continual learning with GEM replay."""

from .baselines import (
    EwcState,
    ewc_penalty,
    ewc_penalty_gradient,
    ewc_prepare,
    ewc_train,
    fine_tune,
    multitask_train,
)
from .chain import (
    ConfigError,
    ExperimentData,
    PipelineConfig,
    PipelineResult,
    config_hash,
    derive_seed,
    load_config,
    prepare_data,
    resolve_config,
    run_pipeline,
    run_stage1,
    run_stage2,
    run_stage3,
)
from .gem import (
    EpisodicMemory,
    GemConfig,
    MemorySample,
    ProjectionResult,
    QpConvergenceError,
    continual_learn,
    gem_step,
    memory_capacity,
    memory_insert,
    project,
    reference_gradients,
)
from .metrics import (
    CLMetrics,
    ErrorMatrix,
    build_error_matrix,
    cer,
    compute_metrics,
    corpus_cer,
    levenshtein,
)
from .recognizer import (
    LayerShape,
    OptimizerConfig,
    RecognizerModel,
    TrainingDivergenceError,
    decode,
    gradient,
    init_model,
    loss,
    train_supervised,
)
from .synthesizer import (
    SynthesizerModel,
    fit_synthesizer,
    random_prototypes,
    refine_semi_supervised,
    synthesize,
)
from .tasks import (
    SymbolAlphabet,
    TaskDataset,
    TaskSpec,
    Utterance,
    add_noise,
    make_task,
    split_dataset,
    split_labeled_unlabeled,
)

__version__ = "0.1.0"

__all__ = [
    "CLMetrics",
    "ConfigError",
    "EpisodicMemory",
    "ErrorMatrix",
    "EwcState",
    "ExperimentData",
    "GemConfig",
    "LayerShape",
    "MemorySample",
    "OptimizerConfig",
    "PipelineConfig",
    "PipelineResult",
    "ProjectionResult",
    "QpConvergenceError",
    "RecognizerModel",
    "SymbolAlphabet",
    "SynthesizerModel",
    "TaskDataset",
    "TaskSpec",
    "TrainingDivergenceError",
    "Utterance",
    "add_noise",
    "build_error_matrix",
    "cer",
    "compute_metrics",
    "config_hash",
    "continual_learn",
    "corpus_cer",
    "decode",
    "derive_seed",
    "ewc_penalty",
    "ewc_penalty_gradient",
    "ewc_prepare",
    "ewc_train",
    "fine_tune",
    "fit_synthesizer",
    "gem_step",
    "gradient",
    "init_model",
    "levenshtein",
    "load_config",
    "loss",
    "make_task",
    "memory_capacity",
    "memory_insert",
    "multitask_train",
    "prepare_data",
    "project",
    "random_prototypes",
    "reference_gradients",
    "refine_semi_supervised",
    "resolve_config",
    "run_pipeline",
    "run_stage1",
    "run_stage2",
    "run_stage3",
    "split_dataset",
    "split_labeled_unlabeled",
    "synthesize",
    "train_supervised",
]
