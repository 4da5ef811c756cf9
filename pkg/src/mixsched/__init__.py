"""Compute-budget scheduling for multi-task fine-tuning.

A library plus CLI that searches per-task optimal compute inside a
multi-task mixture via iterative roll-out / roll-back, compares it against
four baselines on a deterministic synthetic learning-dynamics simulator,
and accounts for every training and validation FLOP along the way.
"""

from .core import (
    ComputeGrid,
    ConfigError,
    CurveTable,
    EvalRecord,
    MixschedError,
    MixtureSpec,
    RunResult,
    RunTrace,
    SubDatasetSpec,
    grid_points,
)
from .dynamics import DynamicsConfig, TaskCurveParams, loss_at, metric_at, sample_dynamics
from .scheduler import (
    StrategyConfig,
    build_soft_mixture,
    delta_cstar_study,
    earliest_peak,
    forgetting_decomposition,
    peak_of,
    run_continual,
    run_msft,
    run_sft,
    run_soft_sro,
    run_sro,
)
from .trainer import SimulatorSession, TrainerError

__version__ = "0.1.0"

__all__ = [
    "ComputeGrid",
    "ConfigError",
    "CurveTable",
    "DynamicsConfig",
    "EvalRecord",
    "MixschedError",
    "MixtureSpec",
    "RunResult",
    "RunTrace",
    "SimulatorSession",
    "StrategyConfig",
    "SubDatasetSpec",
    "TaskCurveParams",
    "TrainerError",
    "build_soft_mixture",
    "delta_cstar_study",
    "earliest_peak",
    "forgetting_decomposition",
    "grid_points",
    "loss_at",
    "metric_at",
    "peak_of",
    "run_continual",
    "run_msft",
    "run_sft",
    "run_soft_sro",
    "run_sro",
    "sample_dynamics",
]
