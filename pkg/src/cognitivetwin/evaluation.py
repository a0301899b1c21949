"""Metrics, calibration, fairness strata, MNAR masking and the ablation matrix.

All metric functions are pure and operate on raw MMSE points. Report objects
serialize to JSON tagged ``report/v1``; bin tables, residuals and forecast
trajectories export as CSV for external plotting.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import (
    PatientRecord, derive_forecast_target, derive_progression_label, select_split, visit_seed,
)
from .model import VARIANTS, check_variant
from .validation import check_cohort, check_paired, check_probabilities

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "report/v1"
SEX_GROUPS = ("male", "female")
AGE_GROUPS = ("<65", "65-75", ">75")


# ---------------------------------------------------------------------------
# Point and ranking metrics


def mae(predictions, targets) -> float:
    p, y = check_paired(predictions, targets)
    return float(np.mean(np.abs(p - y)))


def rmse(predictions, targets) -> float:
    p, y = check_paired(predictions, targets)
    err = np.abs(p - y)
    scale = err.max()
    if scale == 0.0 or not np.isfinite(scale):
        return float(math.sqrt(np.mean(err ** 2)))
    # scaled so squaring neither underflows nor overflows
    return float(scale * math.sqrt(np.mean((err / scale) ** 2)))


def r_squared(predictions, targets) -> float:
    """1 - SS_res / SS_tot, with SS_tot taken about the target mean."""
    p, y = check_paired(predictions, targets)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r_squared is undefined for targets with zero variance")
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot


def auroc(scores, labels) -> float | None:
    """P(random positive outranks random negative), ties counted one half.

    Computed from mid-ranks (the Mann-Whitney statistic), which equals the
    pairwise-concordance count. Returns None, with a warning, if only one
    class is present.
    """
    s, y = check_paired(scores, labels, "scores", "labels")
    pos = y.astype(bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        warnings.warn("auroc needs both classes; returning None", RuntimeWarning, stacklevel=2)
        return None
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class CalibrationBins:
    """Equal-width reliability table; empty bins carry NaN confidence/accuracy."""

    edges: np.ndarray  # (M + 1,)
    counts: np.ndarray  # (M,)
    confidence: np.ndarray  # mean predicted probability per bin
    accuracy: np.ndarray  # observed positive rate per bin

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    def rows(self) -> list[dict]:
        return [
            {
                "bin": m, "lower": float(self.edges[m]), "upper": float(self.edges[m + 1]),
                "count": int(self.counts[m]),
                "confidence": _opt(self.confidence[m]), "accuracy": _opt(self.accuracy[m]),
            }
            for m in range(self.n_bins)
        ]


def _opt(x):
    return None if x is None or not np.isfinite(x) else float(x)


def bin_index(probabilities, n_bins: int = 10) -> np.ndarray:
    """Left-closed equal-width bins; 1.0 falls in the last bin."""
    inner = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    return np.searchsorted(inner, probabilities, side="right")


def ece(probabilities, labels, n_bins: int = 10) -> tuple[float, CalibrationBins]:
    """Expected calibration error: sum over bins of |B|/N * |acc(B) - conf(B)|."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    p, y = check_paired(probabilities, labels, "probabilities", "labels")
    p = check_probabilities(p)
    idx = bin_index(p, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=p, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=y, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = np.where(counts > 0, conf_sum / counts, np.nan)
        acc = np.where(counts > 0, acc_sum / counts, np.nan)
    gap = np.where(counts > 0, np.abs(acc - conf), 0.0)
    value = float(np.sum(counts / p.size * gap))
    return value, CalibrationBins(np.linspace(0.0, 1.0, n_bins + 1), counts, conf, acc)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    """Metric set for one cohort (or subgroup). Absent values are None."""

    mae: float | None
    rmse: float | None
    r_squared: float | None
    auroc: float | None
    ece: float | None
    n_patients: int
    n_targets: int = 0
    n_labels: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{f.name: d.get(f.name) for f in dataclasses.fields(cls)})


def compute_metrics(predictions, targets, probabilities=None, labels=None,
                    n_bins: int = 10) -> tuple[MetricsReport, CalibrationBins | None]:
    """Metrics over one cohort, skipping patients whose target/label is NaN.

    Regression metrics use patients with a target; AUROC and ECE use those
    with both a probability and a label.
    """
    p, y = np.asarray(predictions, dtype=float).ravel(), np.asarray(targets, dtype=float).ravel()
    if p.shape != y.shape:
        raise ValueError(f"predictions and targets differ in length ({p.size} vs {y.size})")
    n = int(p.size)
    keep = ~np.isnan(y) & ~np.isnan(p)
    m = r = r2 = None
    if keep.any():
        m, r = mae(p[keep], y[keep]), rmse(p[keep], y[keep])
        if np.ptp(y[keep]) > 0:
            r2 = r_squared(p[keep], y[keep])
        else:
            logger.warning("r_squared omitted: target variance is zero over %d patients", int(keep.sum()))
    else:
        logger.warning("no patient carries a forecast target; regression metrics omitted")
    a = e = bins = None
    n_lab = 0
    if probabilities is not None and labels is not None:
        q = np.asarray(probabilities, dtype=float).ravel()
        lab = np.asarray(labels, dtype=float).ravel()
        if q.shape != lab.shape or q.size != n:
            raise ValueError("probabilities and labels must match the number of predictions")
        ok = ~np.isnan(q) & ~np.isnan(lab)
        n_lab = int(ok.sum())
        if n_lab:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                a = auroc(q[ok], lab[ok])
            if a is None:
                logger.warning("auroc omitted: only one progression class among %d patients", n_lab)
            e, bins = ece(q[ok], lab[ok], n_bins)
    return MetricsReport(m, r, r2, a, e, n, int(keep.sum()), n_lab), bins


def cohort_targets(cohort, horizon_months=24.0, tolerance_months=3.0) -> np.ndarray:
    out = []
    for p in cohort:
        t = derive_forecast_target(p, horizon_months, tolerance_months)
        out.append(np.nan if t is None else t.target_mmse)
    return np.array(out, dtype=float)


def cohort_labels(cohort, threshold_points=3.0, window_months=36.0) -> np.ndarray:
    out = []
    for p in cohort:
        lab = derive_progression_label(p, threshold_points, window_months)
        out.append(np.nan if lab is None else float(lab.progressed))
    return np.array(out, dtype=float)


@dataclass
class Evaluation:
    """Everything one evaluation pass produces."""

    report: MetricsReport
    bins: CalibrationBins | None
    patient_ids: list
    predictions: np.ndarray
    targets: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray


def evaluate_model(model, cohort, n_bins: int = 10) -> Evaluation:
    """Score a fitted :class:`~cognitivetwin.estimator.CognitiveTwin` on raw patients.

    Targets follow the model's horizon/history settings; progression labels
    are derived from the observed trajectories.
    """
    cohort = check_cohort(cohort)
    pred = model.predict(cohort)
    y = model.targets(cohort)
    prob = model.predict_progression_proba(cohort)
    lab = cohort_labels(cohort, model.progression_threshold, model.progression_window)
    report, bins = compute_metrics(pred, y, prob, lab, n_bins)
    return Evaluation(report, bins, [p.patient_id for p in cohort], pred, y, prob, lab)


# ---------------------------------------------------------------------------
# Fairness


def age_group(age: float) -> str:
    """<65, [65, 75], >75."""
    if age < 65:
        return "<65"
    return "65-75" if age <= 75 else ">75"


def _max_difference(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(max(vals) - min(vals)) if len(vals) >= 2 else None


@dataclass
class FairnessReport:
    groups: dict = field(default_factory=dict)  # axis -> {group: MetricsReport}
    max_mae_difference: dict = field(default_factory=dict)  # axis -> float | None
    max_ece_difference: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "groups": {ax: {g: r.to_dict() for g, r in rows.items()} for ax, rows in self.groups.items()},
            "max_mae_difference": dict(self.max_mae_difference),
            "max_ece_difference": dict(self.max_ece_difference),
        }


def stratify_and_evaluate(cohort, predictions, probabilities=None, targets=None, labels=None,
                          n_bins: int = 10) -> FairnessReport:
    """Per-subgroup metrics by sex and baseline-age band, plus max gaps per axis.

    ``targets``/``labels`` default to the 24-month MMSE and 36-month
    progression events derived from each patient's own visits.
    """
    cohort = check_cohort(cohort)
    pred = np.asarray(predictions, dtype=float).ravel()
    if pred.size != len(cohort):
        raise ValueError(f"got {pred.size} predictions for {len(cohort)} patients")
    y = cohort_targets(cohort) if targets is None else np.asarray(targets, dtype=float).ravel()
    prob = None if probabilities is None else np.asarray(probabilities, dtype=float).ravel()
    lab = None
    if prob is not None:
        lab = cohort_labels(cohort) if labels is None else np.asarray(labels, dtype=float).ravel()
    axes = {
        "sex": (SEX_GROUPS, np.array([p.sex for p in cohort])),
        "age": (AGE_GROUPS, np.array([age_group(p.age_at_baseline) for p in cohort])),
    }
    out = FairnessReport()
    for axis, (names, keys) in axes.items():
        rows = {}
        for g in names:
            sel = keys == g
            if not sel.any():
                warnings.warn(f"subgroup {axis}={g} is empty", RuntimeWarning, stacklevel=2)
                rows[g] = MetricsReport(None, None, None, None, None, 0)
                continue
            if sel.sum() == 1:
                warnings.warn(f"subgroup {axis}={g} has a single patient", RuntimeWarning, stacklevel=2)
            rows[g], _ = compute_metrics(
                pred[sel], y[sel],
                None if prob is None else prob[sel], None if lab is None else lab[sel], n_bins,
            )
        out.groups[axis] = rows
        out.max_mae_difference[axis] = _max_difference([r.mae for r in rows.values()])
        out.max_ece_difference[axis] = _max_difference([r.ece for r in rows.values()])
    return out


# ---------------------------------------------------------------------------
# MNAR simulation


@dataclass(frozen=True)
class MNARConfig:
    """Imaging dropout for visits whose observed MMSE is below the threshold."""

    masking_probability: float = 0.15
    mmse_threshold: float = 24.0
    modality: str = "imaging"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.masking_probability <= 1.0:
            raise ValueError(f"masking_probability must lie in [0, 1], got {self.masking_probability}")


@dataclass
class MNARResult:
    cohort: list
    masked: list  # (patient_id, visit_index) pairs
    n_eligible: int

    @property
    def masked_fraction(self) -> float:
        return len(self.masked) / self.n_eligible if self.n_eligible else 0.0


def apply_mnar_mask(cohort, config: MNARConfig | None = None) -> MNARResult:
    """Drop the whole modality at eligible visits, each with its own seeded coin.

    Eligible means the visit's MMSE is observed (raw points) and below the
    threshold. Other visits are returned unchanged.
    """
    config = config or MNARConfig()
    cohort = check_cohort(cohort, allow_empty=True)
    m = config.modality
    out, log, eligible = [], [], 0
    for p in cohort:
        visits = list(p.visits)
        changed = False
        for i, v in enumerate(visits):
            mmse = v.mmse
            if mmse is None or not mmse < config.mmse_threshold:
                continue
            eligible += 1
            if visit_seed(config.seed, p.patient_id, i).random() < config.masking_probability:
                visits[i] = dataclasses.replace(
                    v, **{m: np.zeros_like(getattr(v, m)),
                          "mask_" + m: np.zeros_like(getattr(v, "mask_" + m))}
                )
                log.append((p.patient_id, i))
                changed = True
        out.append(dataclasses.replace(p, visits=tuple(visits)) if changed else p)
    return MNARResult(out, log, eligible)


def degradation(mae_variant: float, mae_full: float) -> float:
    """Relative MAE increase in percent."""
    if mae_full <= 0:
        raise ValueError("reference MAE must be positive")
    return 100.0 * (mae_variant - mae_full) / mae_full


def evaluate_under_mnar(model, cohort, config: MNARConfig | None = None) -> dict:
    """Clean vs MNAR-masked evaluation of one fitted model on the same patients."""
    config = config or MNARConfig()
    clean = evaluate_model(model, cohort)
    masked = apply_mnar_mask(cohort, config)
    dirty = evaluate_model(model, masked.cohort)
    deg = None
    if clean.report.mae is not None and dirty.report.mae is not None and clean.report.mae > 0:
        deg = degradation(dirty.report.mae, clean.report.mae)
    return {
        "config": dataclasses.asdict(config),
        "clean": clean.report.to_dict(),
        "masked": dirty.report.to_dict(),
        "degradation_percent": deg,
        "n_eligible_visits": masked.n_eligible,
        "n_masked_visits": len(masked.masked),
        "masked_fraction": masked.masked_fraction,
    }


# ---------------------------------------------------------------------------
# Ablations


@dataclass(frozen=True)
class AblationVariant:
    tag: str
    description: str


ABLATION_VARIANTS = {
    "full": AblationVariant("full", "fusion encoder and latent dynamics, all modalities"),
    "baseline": AblationVariant("baseline", "concatenated raw features into one recurrent regressor"),
    "no_dmm": AblationVariant("no_dmm", "feed-forward head on the last fused visit, no latent chain"),
    "no_genetics": AblationVariant("no_genetics", "genetic modality masked everywhere"),
    "cognitive_only": AblationVariant("cognitive_only", "only cognitive scores visible"),
}
assert tuple(ABLATION_VARIANTS) == VARIANTS


def _split_dict(splits) -> dict:
    if isinstance(splits, dict):
        return {k: check_cohort(v, allow_empty=True) for k, v in splits.items()}
    cohort = check_cohort(splits)
    return {s: select_split(cohort, s) for s in ("train", "validation", "test")}


def fit_variant(variant, splits, base_config: dict | None = None):
    """Train one ablation variant from scratch on the train/validation splits."""
    from .estimator import CognitiveTwin

    tag = variant.tag if isinstance(variant, AblationVariant) else check_variant(variant)
    parts = _split_dict(splits)
    params = dict(base_config or {})
    params["variant"] = tag
    return CognitiveTwin(**params).fit(parts["train"], validation=parts["validation"])


def run_ablation(variant, splits, base_config: dict | None = None) -> MetricsReport:
    """Train the variant and score it on the test split."""
    model = fit_variant(variant, splits, base_config)
    return evaluate_model(model, _split_dict(splits)["test"]).report


def _ablation_job(args):
    tag, splits, base = args
    return tag, run_ablation(tag, splits, base)


def run_ablation_matrix(variants, splits, base_config: dict | None = None, parallel: bool = False,
                        max_workers: int | None = None) -> dict:
    """Reports for several variants, each compared against ``full``.

    Every variant trains with the same seed and schedule. Returns
    ``{tag: {"report": MetricsReport, "degradation_percent": float | None}}``;
    ``full`` is trained as the reference even when not requested.
    """
    tags = [check_variant(v) for v in variants]
    if not tags:
        raise ValueError("no ablation variants requested")
    parts = _split_dict(splits)
    run = list(dict.fromkeys(["full"] + tags))
    jobs = [(t, parts, base_config) for t in run]
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            reports = dict(pool.map(_ablation_job, jobs))
    else:
        reports = dict(map(_ablation_job, jobs))
    ref = reports["full"].mae
    out = {}
    for t in tags:
        r = reports[t]
        deg = degradation(r.mae, ref) if (ref and r.mae is not None) else None
        out[t] = {"report": r, "degradation_percent": deg}
    return out


# ---------------------------------------------------------------------------
# Serialization


def _jsonable(x):
    if isinstance(x, (MetricsReport, FairnessReport)):
        return _jsonable(x.to_dict())
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def report_payload(kind: str, body) -> dict:
    return {"format": REPORT_SCHEMA, "kind": kind, "body": _jsonable(body)}


def write_report(path, kind: str, body) -> dict:
    """Write a ``report/v1`` JSON document (sorted keys, NaN as null)."""
    payload = report_payload(kind, body)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")
    return payload


def read_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != REPORT_SCHEMA:
        raise ValueError(f"{path}: not a {REPORT_SCHEMA} document")
    return payload


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None or (isinstance(v, float) and not math.isfinite(v)) else v
                        for v in r])


def write_calibration_csv(path, bins: CalibrationBins | None):
    header = ["bin", "lower", "upper", "count", "confidence", "accuracy"]
    rows = [] if bins is None else [[r[k] for k in header] for r in bins.rows()]
    _write_csv(path, header, rows)


def write_residuals_csv(path, patient_ids, predictions, targets):
    rows = []
    for pid, p, y in zip(patient_ids, predictions, targets):
        if np.isnan(y):
            continue
        rows.append([pid, float(p), float(y), float(p - y)])
    _write_csv(path, ["patient_id", "prediction", "target", "residual"], rows)


def write_trajectory_csv(path, patient: PatientRecord, forecast: dict):
    """Observed MMSE history rows, then forecast rows with 95% bounds."""
    rows = []
    for v in patient.visits[: forecast["conditioned_visits"]]:
        rows.append([v.months_since_baseline, None, None, None, v.mmse])
    for t, m, lo, hi in zip(forecast["months"], forecast["mean"], forecast["lower"], forecast["upper"]):
        rows.append([float(t), float(m), float(lo), float(hi), None])
    _write_csv(path, ["month", "mean", "lo95", "hi95", "observed"], rows)
