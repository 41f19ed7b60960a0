"""Dataset containers, accuracy, synthetic data and report emission.

``keyshield.evaluation.experiment`` is imported on demand; it depends on the
defense and attack packages, which themselves read datasets from here.
"""

from .container import DatasetContainer, empty_dataset, load_dataset, save_dataset
from .metrics import accuracy, correct_mask
from .report import load_report, render_csv, render_table, write_report
from .schemas import AdvSetMetadata, ArmResult, EvalReport, ExperimentConfig
from .synthetic import CLASS_NAMES, synthesize_dataset

__all__ = [
    "AdvSetMetadata",
    "ArmResult",
    "CLASS_NAMES",
    "DatasetContainer",
    "EvalReport",
    "ExperimentConfig",
    "accuracy",
    "correct_mask",
    "empty_dataset",
    "load_dataset",
    "load_report",
    "render_csv",
    "render_table",
    "save_dataset",
    "synthesize_dataset",
    "write_report",
]
