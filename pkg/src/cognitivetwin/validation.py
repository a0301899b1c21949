"""Input checks shared by the estimator and the metric functions."""
from __future__ import annotations

import numpy as np

from .data import DataError, PatientRecord


def check_cohort(X, *, allow_empty: bool = False) -> list[PatientRecord]:
    """Return ``X`` as a list of :class:`PatientRecord`, rejecting anything else."""
    if isinstance(X, PatientRecord):
        X = [X]
    try:
        cohort = list(X)
    except TypeError:
        raise DataError(f"expected a sequence of PatientRecord, got {type(X).__name__}") from None
    bad = [type(p).__name__ for p in cohort if not isinstance(p, PatientRecord)]
    if bad:
        raise DataError(f"expected PatientRecord items, got {sorted(set(bad))}")
    if not cohort and not allow_empty:
        raise DataError("cohort is empty")
    ids = [p.patient_id for p in cohort]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids in cohort")
    return cohort


def check_paired(a, b, name_a="predictions", name_b="targets"):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"{name_a} and {name_b} differ in length ({a.size} vs {b.size})")
    if a.size == 0:
        raise ValueError(f"{name_a} is empty")
    return a, b


def check_probabilities(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).ravel()
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return p
