"""Multi-modal fusion + Deep Markov Model forecasting of cognitive trajectories."""
from .data import (
    DataError, NormalizationStats, PatientRecord, SyntheticConfig, VisitObservation,
    generate_synthetic_cohort, ingest_cohort, load_cohort, save_cohort, select_split, stratified_split,
)
from .estimator import CognitiveTwin
from .evaluation import (
    MetricsReport, MNARConfig, apply_mnar_mask, auroc, ece, evaluate_model, evaluate_under_mnar,
    mae, r_squared, rmse, run_ablation, run_ablation_matrix, stratify_and_evaluate,
)
from .training import CheckpointError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "CognitiveTwin", "DataError", "MNARConfig", "MetricsReport",
    "NormalizationStats", "NumericalError", "PatientRecord", "SyntheticConfig", "VisitObservation",
    "apply_mnar_mask", "auroc", "ece", "evaluate_model", "evaluate_under_mnar",
    "generate_synthetic_cohort", "ingest_cohort", "load_cohort", "mae", "r_squared", "rmse",
    "run_ablation", "run_ablation_matrix", "save_cohort", "select_split", "stratified_split",
    "stratify_and_evaluate",
]
