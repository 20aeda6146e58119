"""Sparse multi-modal graph transformer for survival prediction from cellular graphs."""

from .datagen import SynthConfig, generate_cohort
from .estimator import AmigoSurvival
from .graph import CellularGraph, Cohort, PatientRecord, build_knn_graph
from .metrics import concordance_index, kaplan_meier, logrank_test
from .model import ModelConfig, ModelParams
from .pipeline import RunConfig, cross_validate, sweep_bcp, sweep_sparsity, train

__all__ = [
    "AmigoSurvival",
    "CellularGraph",
    "Cohort",
    "ModelConfig",
    "ModelParams",
    "PatientRecord",
    "RunConfig",
    "SynthConfig",
    "build_knn_graph",
    "concordance_index",
    "cross_validate",
    "generate_cohort",
    "kaplan_meier",
    "logrank_test",
    "sweep_bcp",
    "sweep_sparsity",
    "train",
]
