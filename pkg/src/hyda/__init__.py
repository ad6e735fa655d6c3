"""Hypergraph dynamic adapter for multi-modal subject classification, in plain numpy."""
from .cohort import (CohortDataset, CohortScaler, ModalitySpec, SubjectRecord, SynthSpec, kfold_split,
                     load_cohort, normalize, save_cohort, synth_cohort)
from .config import RunConfig, Schedule, load_config
from .errors import (ConfigError, FormatError, HydaError, LabelError, MetricError, NumericError, ShapeError,
                     StructureError)
from .estimator import HyDAClassifier
from .metrics import compute_metrics
from .trainer import cross_validate, evaluate, load_checkpoint, run_ablation, save_checkpoint, train_fold

__version__ = "0.1.0"

__all__ = [
    "CohortDataset", "CohortScaler", "ModalitySpec", "SubjectRecord", "SynthSpec", "kfold_split",
    "load_cohort", "normalize", "save_cohort", "synth_cohort", "RunConfig", "Schedule", "load_config",
    "ConfigError", "FormatError", "HydaError", "LabelError", "MetricError", "NumericError", "ShapeError",
    "StructureError", "HyDAClassifier", "compute_metrics", "cross_validate", "evaluate", "load_checkpoint",
    "run_ablation", "save_checkpoint", "train_fold",
]
