"""Sparse-slice volumetric reconstruction toolkit.

Learns a population model of a volume class from 2D slice/pose pairs with a
pose-conditioned normalizing flow coupled to an exchangeable latent process,
then reconstructs dense volumes from zero or more context slices and scores
them with SSIM and cross-correlation.
"""

from .autodiff import Tape, Tensor, grad, precision
from .evaluate import (
    ConditionedModel,
    MetricsReport,
    condition,
    cross_correlation,
    dense_sweep,
    evaluate_dataset,
    generate_slice,
    motion_experiment,
    ssim,
)
from .flow import ConditionalFlow, FlowConfig
from .optim import Adam, AdamState, adam_step, finite_difference_check
from .process import (
    ExchangeableProcess,
    ProcessParams,
    ProcessState,
    init_state,
    joint_logpdf_oracle,
    oracle_conditioning,
    predictive_logpdf,
    predictive_params,
    sample_predictive,
    update_state,
)
from .training import (
    CheckpointError,
    DivergenceError,
    ModelConfig,
    SequenceModel,
    load_checkpoint,
    restore_parameters,
    save_checkpoint,
    train,
)
from .volumes import (
    PhantomSpec,
    SequenceSample,
    SlicePose,
    Volume,
    downsample,
    extract_slices,
    generate_phantom,
    load_volume,
    motion_corrupt_stacks,
    sample_training_sequence,
    save_volume,
    select_context_schedule,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "ConditionalFlow",
    "ConditionedModel",
    "DivergenceError",
    "ExchangeableProcess",
    "FlowConfig",
    "MetricsReport",
    "ModelConfig",
    "PhantomSpec",
    "ProcessParams",
    "ProcessState",
    "SequenceModel",
    "SequenceSample",
    "SlicePose",
    "Tape",
    "Tensor",
    "Volume",
    "adam_step",
    "condition",
    "cross_correlation",
    "dense_sweep",
    "downsample",
    "evaluate_dataset",
    "extract_slices",
    "finite_difference_check",
    "generate_phantom",
    "generate_slice",
    "grad",
    "init_state",
    "joint_logpdf_oracle",
    "load_checkpoint",
    "load_volume",
    "motion_corrupt_stacks",
    "motion_experiment",
    "oracle_conditioning",
    "precision",
    "predictive_logpdf",
    "predictive_params",
    "restore_parameters",
    "sample_predictive",
    "sample_training_sequence",
    "save_checkpoint",
    "save_volume",
    "select_context_schedule",
    "ssim",
    "train",
    "update_state",
]
