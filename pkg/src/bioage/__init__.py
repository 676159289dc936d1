"""Iterative data cleaning for approximating biological-age labels."""

from bioage.aggregate import aggregate_cohort, aggregate_patient
from bioage.cleaning import CleaningConfig, CleaningReport, evaluate_final, run_cleaning
from bioage.core import ChunkSample, Cohort, MetricsReport, PatientEstimate, compute_metrics, group_chunks
from bioage.outlier import ThresholdPolicy, detect, sweep_r
from bioage.regressor import RegressorConfig, RegressorModel, predict, train, train_ridge
from bioage.synth import CohortSpec, GroupSpec, age_balance, generate

__version__ = "0.1.0"

__all__ = [
    "ChunkSample",
    "CleaningConfig",
    "CleaningReport",
    "Cohort",
    "CohortSpec",
    "GroupSpec",
    "MetricsReport",
    "PatientEstimate",
    "RegressorConfig",
    "RegressorModel",
    "ThresholdPolicy",
    "age_balance",
    "aggregate_cohort",
    "aggregate_patient",
    "compute_metrics",
    "detect",
    "evaluate_final",
    "generate",
    "group_chunks",
    "predict",
    "run_cleaning",
    "sweep_r",
    "train",
    "train_ridge",
]
