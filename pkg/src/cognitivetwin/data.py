"""Longitudinal cohort data: records, ingestion, synthetic cohorts, splits,
normalization and derived targets.

All records hold *raw* (clinical-unit) values. Normalization produces new
records; the observation masks are the source of truth for observedness.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MODALITIES = ("cognitive", "biomarker", "imaging", "genetic")
MODALITY_DIMS = (9, 15, 7, 1)
N_FEATURES = sum(MODALITY_DIMS)

FEATURE_NAMES = {
    "cognitive": (
        "MMSE", "ADAS11", "ADAS13", "CDRSB", "RAVLT_immediate",
        "RAVLT_learning", "RAVLT_forgetting", "RAVLT_perc_forgetting", "FAQ",
    ),
    "biomarker": (
        "FDG", "AV45", "ABETA", "TAU", "PTAU", "AGE", "PTGENDER", "PTEDUCAT",
        "FDG_ANGULAR", "FDG_TEMPORAL", "FDG_CINGULUM", "AV45_FRONTAL",
        "AV45_CINGULATE", "AV45_PARIETAL", "AV45_TEMPORAL",
    ),
    "imaging": (
        "Ventricles", "Hippocampus", "WholeBrain", "Entorhinal", "Fusiform",
        "MidTemp", "ICV",
    ),
    "genetic": ("APOE4",),
}
CANONICAL_FEATURES = tuple(n for m in MODALITIES for n in FEATURE_NAMES[m])
MMSE_INDEX = 0  # position of MMSE in the concatenated feature vector
MODALITY_SLICES = {}
_start = 0
for _m, _d in zip(MODALITIES, MODALITY_DIMS):
    MODALITY_SLICES[_m] = slice(_start, _start + _d)
    _start += _d
del _start, _m, _d

SEXES = ("male", "female")
DIAGNOSES = ("CN", "MCI", "Dementia")
SPLITS = ("train", "validation", "test")

COHORT_SCHEMA = "cohort/v1"


class DataError(ValueError):
    """Raised for malformed or inconsistent cohort data."""


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True, eq=False)
class VisitObservation:
    """One visit: four modality vectors plus paired observation masks."""

    months_since_baseline: float
    cognitive: np.ndarray
    biomarker: np.ndarray
    imaging: np.ndarray
    genetic: np.ndarray
    mask_cognitive: np.ndarray
    mask_biomarker: np.ndarray
    mask_imaging: np.ndarray
    mask_genetic: np.ndarray

    def __post_init__(self):
        for m, d in zip(MODALITIES, MODALITY_DIMS):
            v = np.asarray(getattr(self, m), dtype=float)
            k = np.asarray(getattr(self, "mask_" + m), dtype=bool)
            if v.shape != (d,) or k.shape != (d,):
                raise DataError(f"{m} must have dimension {d}, got {v.shape}/{k.shape}")
            v = np.where(k, v, 0.0)
            v.setflags(write=False)
            k.setflags(write=False)
            object.__setattr__(self, m, v)
            object.__setattr__(self, "mask_" + m, k)

    @classmethod
    def from_vectors(cls, month, values, mask):
        """Build from a concatenated 32-vector and mask."""
        values = np.asarray(values, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        kw = {}
        for m in MODALITIES:
            kw[m] = values[MODALITY_SLICES[m]]
            kw["mask_" + m] = mask[MODALITY_SLICES[m]]
        return cls(months_since_baseline=float(month), **kw)

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([getattr(self, m) for m in MODALITIES])

    @property
    def mask(self) -> np.ndarray:
        return np.concatenate([getattr(self, "mask_" + m) for m in MODALITIES])

    @property
    def mmse(self) -> float | None:
        return float(self.cognitive[MMSE_INDEX]) if self.mask_cognitive[MMSE_INDEX] else None

    def equals(self, other: "VisitObservation") -> bool:
        return (
            self.months_since_baseline == other.months_since_baseline
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(frozen=True, eq=False)
class PatientRecord:
    patient_id: str
    visits: tuple
    sex: str
    age_at_baseline: float
    baseline_diagnosis: str
    apoe4_count: int
    split: str | None = None

    def __post_init__(self):
        visits = tuple(self.visits)
        if not visits:
            raise DataError(f"patient {self.patient_id!r} has no visits")
        months = [v.months_since_baseline for v in visits]
        if any(b <= a for a, b in zip(months, months[1:])):
            raise DataError(f"patient {self.patient_id!r}: visit months must be strictly increasing")
        if self.sex not in SEXES:
            raise DataError(f"unknown sex {self.sex!r}")
        if self.baseline_diagnosis not in DIAGNOSES:
            raise DataError(f"unknown diagnosis {self.baseline_diagnosis!r}")
        if self.apoe4_count not in (0, 1, 2):
            raise DataError(f"apoe4_count must be 0, 1 or 2, got {self.apoe4_count!r}")
        if self.split is not None and self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        object.__setattr__(self, "visits", visits)

    @property
    def months(self) -> np.ndarray:
        return np.array([v.months_since_baseline for v in self.visits])

    @property
    def apoe4_carrier(self) -> bool:
        return self.apoe4_count > 0

    @property
    def baseline_mmse(self) -> float | None:
        return self.visits[0].mmse

    def equals(self, other: "PatientRecord") -> bool:
        same_meta = (
            self.patient_id == other.patient_id and self.sex == other.sex
            and self.age_at_baseline == other.age_at_baseline
            and self.baseline_diagnosis == other.baseline_diagnosis
            and self.apoe4_count == other.apoe4_count and self.split == other.split
        )
        return same_meta and len(self.visits) == len(other.visits) and all(
            a.equals(b) for a, b in zip(self.visits, other.visits)
        )


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: str = "train"

    def __post_init__(self):
        if np.any(~(np.asarray(self.std) > 0)):
            raise DataError("normalization deviations must be strictly positive")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), d.get("fitted_on", "train"))


@dataclass(frozen=True)
class ForecastTarget:
    target_mmse: float
    target_month: float
    matched_visit_month: float
    visit_index: int


@dataclass(frozen=True)
class ProgressionLabel:
    progressed: bool
    decline_points: float
    window_months: float


# ---------------------------------------------------------------------------
# Serialization


def _visit_to_json(v: VisitObservation) -> dict:
    out = {"months_since_baseline": v.months_since_baseline}
    for m in MODALITIES:
        vals = getattr(v, m)
        mask = getattr(v, "mask_" + m)
        out[m] = [float(x) if k else None for x, k in zip(vals, mask)]
    return out


def _visit_from_json(d: dict) -> VisitObservation:
    kw = {}
    for m in MODALITIES:
        raw = d[m]
        kw[m] = np.array([0.0 if x is None else float(x) for x in raw])
        kw["mask_" + m] = np.array([x is not None for x in raw])
    return VisitObservation(months_since_baseline=float(d["months_since_baseline"]), **kw)


def cohort_to_dict(cohort: Sequence[PatientRecord]) -> dict:
    return {
        "schema": COHORT_SCHEMA,
        "features": list(CANONICAL_FEATURES),
        "patients": [
            {
                "patient_id": p.patient_id, "sex": p.sex,
                "age_at_baseline": p.age_at_baseline,
                "baseline_diagnosis": p.baseline_diagnosis,
                "apoe4_count": p.apoe4_count, "split": p.split,
                "visits": [_visit_to_json(v) for v in p.visits],
            }
            for p in cohort
        ],
    }


def cohort_from_dict(d: dict) -> list[PatientRecord]:
    if d.get("schema") != COHORT_SCHEMA:
        raise DataError(f"expected schema {COHORT_SCHEMA!r}, got {d.get('schema')!r}")
    return [
        PatientRecord(
            patient_id=p["patient_id"], sex=p["sex"],
            age_at_baseline=float(p["age_at_baseline"]),
            baseline_diagnosis=p["baseline_diagnosis"],
            apoe4_count=int(p["apoe4_count"]), split=p.get("split"),
            visits=tuple(_visit_from_json(v) for v in p["visits"]),
        )
        for p in d["patients"]
    ]


def save_cohort(cohort: Sequence[PatientRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cohort_to_dict(cohort), fh, sort_keys=True)
        fh.write("\n")


def load_cohort(path) -> list[PatientRecord]:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a valid cohort file ({exc})") from exc
    return cohort_from_dict(d)


# ---------------------------------------------------------------------------
# Ingestion

DEFAULT_SCHEMA = {
    "patient_id": "RID",
    "month": "Month",
    "sex": "PTGENDER",
    "age": "AGE",
    "diagnosis": "DX_bl",
    "apoe4": "APOE4",
    "features": {name: name for name in CANONICAL_FEATURES},
}

_DIAGNOSIS_ALIASES = {
    "CN": "CN", "SMC": "CN", "NL": "CN",
    "MCI": "MCI", "EMCI": "MCI", "LMCI": "MCI",
    "AD": "Dementia", "DEMENTIA": "Dementia",
}
_SEX_ALIASES = {"male": "male", "m": "male", "female": "female", "f": "female"}
_MISSING = {"", "na", "nan", "null", "none", "-4"}


def load_schema(path) -> dict:
    """Read a column-mapping file; unspecified entries fall back to the default."""
    with open(path, encoding="utf-8") as fh:
        user = json.load(fh)
    schema = {**DEFAULT_SCHEMA, **{k: v for k, v in user.items() if k != "features"}}
    features = dict(DEFAULT_SCHEMA["features"])
    features.update(user.get("features", {}))
    unknown = set(features) - set(CANONICAL_FEATURES)
    if unknown:
        raise DataError(f"schema maps unknown features: {sorted(unknown)}")
    schema["features"] = features
    return schema


def _parse_float(cell: str, what: str, row: int) -> float | None:
    s = cell.strip()
    if s.lower() in _MISSING:
        return None
    try:
        x = float(s)
    except ValueError:
        raise DataError(f"row {row}: cannot parse {what}={cell!r}") from None
    if not math.isfinite(x):
        raise DataError(f"row {row}: non-finite {what}={cell!r}")
    return x


def _parse_sex(cell: str, row: int) -> str:
    s = _SEX_ALIASES.get(cell.strip().lower())
    if s is None:
        raise DataError(f"row {row}: unknown sex value {cell!r}")
    return s


def _parse_diagnosis(cell: str, row: int) -> str:
    dx = _DIAGNOSIS_ALIASES.get(cell.strip().upper())
    if dx is None:
        raise DataError(f"row {row}: unknown diagnosis value {cell!r}")
    return dx


def ingest_cohort(source: IO[str] | Iterable[str], schema: dict | None = None) -> list[PatientRecord]:
    """Read a TADPOLE-style table (one row per patient visit) into records.

    Missing cells become false mask bits. Visits are sorted and months are
    re-based to each patient's first visit. Demographics are taken from the
    patient's earliest row.
    """
    schema = schema or DEFAULT_SCHEMA
    reader = csv.DictReader(source)
    cols = schema["features"]
    required = [schema[k] for k in ("patient_id", "month", "sex", "age", "diagnosis", "apoe4")]
    header = reader.fieldnames or []
    absent = [c for c in required + [cols[f] for f in CANONICAL_FEATURES] if c not in header]
    if absent:
        raise DataError(f"missing required columns: {absent}")

    rows: dict[str, list] = {}
    for i, row in enumerate(reader, start=1):
        if None in row or any(v is None for v in row.values()):
            raise DataError(f"row {i}: wrong number of fields")
        pid = row[schema["patient_id"]].strip()
        if not pid:
            raise DataError(f"row {i}: empty patient id")
        month = _parse_float(row[schema["month"]], "month", i)
        if month is None:
            raise DataError(f"row {i}: missing visit month")
        values = np.zeros(N_FEATURES)
        mask = np.zeros(N_FEATURES, dtype=bool)
        for j, name in enumerate(CANONICAL_FEATURES):
            cell = row[cols[name]]
            if name == "PTGENDER" and cell.strip().lower() in _SEX_ALIASES:
                x = 1.0 if _parse_sex(cell, i) == "male" else 0.0
            else:
                x = _parse_float(cell, name, i)
            if x is not None:
                values[j] = x
                mask[j] = True
        rows.setdefault(pid, []).append((month, values, mask, row, i))

    cohort = []
    for pid, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        entries_obs = [e for e in entries if e[2].any()]
        if not entries_obs:
            raise DataError(f"patient {pid!r}: no parsable visits")
        first_row, first_idx = entries[0][3], entries[0][4]
        dx = _parse_diagnosis(first_row[schema["diagnosis"]], first_idx)
        # demographics may share columns with masked features; take the first filled row
        sex_row = next((e for e in entries if e[3][schema["sex"]].strip()), None)
        if sex_row is None:
            raise DataError(f"patient {pid!r}: missing sex")
        sex = _parse_sex(sex_row[3][schema["sex"]], sex_row[4])
        age = None
        for e in entries:
            age = _parse_float(e[3][schema["age"]], "age", e[4])
            if age is not None:
                break
        if age is None:
            raise DataError(f"patient {pid!r}: missing baseline age")
        apoe = None
        for e in entries:
            apoe = _parse_float(e[3][schema["apoe4"]], "APOE4", e[4])
            if apoe is not None:
                break
        if apoe is None or apoe not in (0.0, 1.0, 2.0):
            raise DataError(f"patient {pid!r}: APOE4 count missing or invalid ({apoe!r})")
        base = entries_obs[0][0]
        visits = []
        for month, values, mask, _, idx in entries_obs:
            if visits and month - base == visits[-1].months_since_baseline:
                raise DataError(f"row {idx}: duplicate visit month {month} for patient {pid!r}")
            visits.append(VisitObservation.from_vectors(month - base, values, mask))
        cohort.append(
            PatientRecord(
                patient_id=pid, visits=tuple(visits), sex=sex, age_at_baseline=age,
                baseline_diagnosis=dx, apoe4_count=int(apoe),
            )
        )
    return cohort


def write_cohort_csv(cohort: Sequence[PatientRecord], fh: IO[str], schema: dict | None = None) -> None:
    """Inverse of :func:`ingest_cohort` (useful for exporting synthetic data).

    With the default schema the demographic columns double as the AGE and
    PTGENDER features, so patients must have them observed at some visit to
    read back.
    """
    schema = schema or DEFAULT_SCHEMA
    cols = schema["features"]
    meta = [schema[k] for k in ("patient_id", "month", "sex", "age", "diagnosis")]
    feature_cols = [cols[f] for f in CANONICAL_FEATURES]
    header = meta + [c for c in feature_cols if c not in meta]
    if schema["apoe4"] not in header:
        header.append(schema["apoe4"])
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    for p in cohort:
        for v in p.visits:
            cells = {
                schema["patient_id"]: p.patient_id,
                schema["month"]: repr(v.months_since_baseline),
                schema["sex"]: p.sex.capitalize(),
                schema["age"]: repr(p.age_at_baseline),
                schema["diagnosis"]: p.baseline_diagnosis,
            }
            for name, x, k in zip(CANONICAL_FEATURES, v.values, v.mask):
                if name == "PTGENDER" and cols[name] == schema["sex"]:
                    continue
                cells[cols[name]] = repr(float(x)) if k else ""
            cells.setdefault(schema["apoe4"], str(p.apoe4_count))
            writer.writerow([cells.get(h, "") for h in header])


# ---------------------------------------------------------------------------
# Synthetic cohorts


@dataclass
class SyntheticConfig:
    """Parameters of the two-regime (stable vs. decliner) cohort generator.

    Decliners lose ``decliner_rate`` MMSE points per month after a regime
    switch at ``onset`` months (uniform over ``decliner_onset``); everyone
    drifts by ``stable_rate``. Observation noise on MMSE is uniform with
    half-width ``mmse_noise`` so the progression event rate stays analytic.
    Amyloid and tau levels mark the regime; the individual rate shows only
    in the trajectory (MMSE and the tau slope).
    """

    n_patients: int = 200
    visits_min: int = 7
    visits_max: int = 9
    visit_interval: float = 6.0
    decliner_fraction: float = 0.4
    stable_rate: tuple = (0.0, 0.01)
    decliner_rate: tuple = (0.35, 0.8)
    decliner_onset: tuple = (-12.0, 18.0)
    mmse_noise: float = 1.0
    apoe4_relative_risk: float = 2.0
    diagnosis_mix: tuple = (0.305, 0.504, 0.191)
    carrier_rate: tuple = (0.26, 0.40, 0.56)  # per diagnosis, CN/MCI/Dementia
    double_allele_share: float = 0.224
    female_fraction: float = 0.488
    missingness: dict = field(
        default_factory=lambda: {"cognitive": 0.013, "biomarker": 0.6, "imaging": 0.237, "genetic": 0.0}
    )

    def validate(self):
        if not isinstance(self.n_patients, (int, np.integer)) or self.n_patients <= 0:
            raise DataError(f"n_patients must be a positive integer, got {self.n_patients!r}")
        if not 1 <= self.visits_min <= self.visits_max:
            raise DataError("need 1 <= visits_min <= visits_max")
        if not 0.0 <= self.decliner_fraction <= 1.0:
            raise DataError("decliner_fraction must lie in [0, 1]")
        for m, p in self.missingness.items():
            if m not in MODALITIES or not 0.0 <= p <= 1.0:
                raise DataError(f"bad missingness entry {m}={p}")

    def regime_probabilities(self, carrier_share: float) -> tuple[float, float]:
        """P(decliner | carrier), P(decliner | non-carrier) with marginal = decliner_fraction."""
        f, c, rr = self.decliner_fraction, carrier_share, self.apoe4_relative_risk
        denom = c * rr + (1.0 - c)
        p_c, p_n = f * rr / denom, f / denom
        if p_c > 1.0:
            p_c, p_n = 1.0, (f - c) / (1.0 - c)
        return p_c, p_n


def _largest_remainder(total: int, props: Sequence[float]) -> list[int]:
    raw = [total * p for p in props]
    base = [math.floor(r) for r in raw]
    order = sorted(range(len(props)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


_BASELINE_MMSE = {"CN": (28.0, 30.0), "MCI": (24.0, 29.0), "Dementia": (18.0, 25.0)}


def generate_synthetic_cohort(config: SyntheticConfig, seed: int) -> list[PatientRecord]:
    """Draw a cohort from the two-regime generator; deterministic given seed.

    Diagnosis and APOE4-carrier counts follow exact quotas (largest
    remainder), so the stratum composition depends only on ``n_patients``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n = int(config.n_patients)
    dx_counts = _largest_remainder(n, config.diagnosis_mix)
    strata = []
    for dx, count, rate in zip(DIAGNOSES, dx_counts, config.carrier_rate):
        n_car = _largest_remainder(count, (rate, 1.0 - rate))[0]
        strata += [(dx, True)] * n_car + [(dx, False)] * (count - n_car)
    order = rng.permutation(n)
    carrier_share = sum(c for _, c in strata) / n
    p_car, p_non = config.regime_probabilities(carrier_share)
    miss = {m: config.missingness.get(m, 0.0) for m in MODALITIES}

    cohort = []
    for k, idx in enumerate(order):
        dx, carrier = strata[idx]
        apoe = (2 if rng.random() < config.double_allele_share else 1) if carrier else 0
        decliner = rng.random() < (p_car if carrier else p_non)
        sex = "female" if rng.random() < config.female_fraction else "male"
        age = float(np.clip(rng.normal(73.2, 7.4), 55.0, 95.0))
        educ = float(np.clip(rng.normal(15.8, 2.9), 6.0, 22.0))
        mmse0 = rng.uniform(*_BASELINE_MMSE[dx])
        drift = rng.uniform(*config.stable_rate)
        rate = rng.uniform(*config.decliner_rate) if decliner else 0.0
        onset = rng.uniform(*config.decliner_onset) if decliner else np.inf
        icv = rng.normal(1.5e6, 1.2e5)
        amyloid = (1.0 if decliner else 0.0) + rng.normal(0, 0.35)
        tau_level = (1.0 if decliner else 0.0) + rng.normal(0, 0.35)
        n_visits = int(rng.integers(config.visits_min, config.visits_max + 1))

        visits = []
        for v in range(n_visits):
            t = v * config.visit_interval
            decline = drift * t + rate * max(0.0, t - max(onset, 0.0))
            mmse_true = mmse0 - decline
            imp = 30.0 - mmse_true
            mmse_obs = float(np.clip(mmse_true + rng.uniform(-config.mmse_noise, config.mmse_noise), 0, 30))
            tau_t = tau_level + (0.01 * rate * t if decliner else 0.0)
            cog = [
                mmse_obs,
                5.0 + 1.2 * imp + rng.normal(0, 1.5),
                8.0 + 1.8 * imp + rng.normal(0, 2.0),
                max(0.0, 0.3 * imp + rng.normal(0, 0.5)),
                45.0 - 1.5 * imp + rng.normal(0, 4.0),
                6.0 - 0.2 * imp + rng.normal(0, 1.2),
                4.0 + 0.1 * imp + rng.normal(0, 1.3),
                40.0 + 3.0 * imp + rng.normal(0, 10.0),
                max(0.0, 0.8 * imp + rng.normal(0, 1.5)),
            ]
            fdg = 1.3 - 0.01 * imp - 0.08 * tau_t
            av45 = 1.05 + 0.3 * amyloid
            bio = [
                fdg + rng.normal(0, 0.05),
                av45 + rng.normal(0, 0.05),
                1100.0 - 350.0 * amyloid + rng.normal(0, 80.0),
                230.0 + 90.0 * tau_t + rng.normal(0, 25.0),
                22.0 + 10.0 * tau_t + rng.normal(0, 3.0),
                age, 1.0 if sex == "male" else 0.0, educ,
                fdg + 0.05 + rng.normal(0, 0.06),
                fdg - 0.04 + rng.normal(0, 0.06),
                fdg + 0.1 + rng.normal(0, 0.06),
                av45 + 0.02 + rng.normal(0, 0.06),
                av45 + 0.05 + rng.normal(0, 0.06),
                av45 - 0.02 + rng.normal(0, 0.06),
                av45 - 0.04 + rng.normal(0, 0.06),
            ]
            atrophy = imp + 0.5 * decline
            img = [
                30000.0 + 1500.0 * atrophy + rng.normal(0, 4000.0),
                7600.0 - 90.0 * atrophy - 250.0 * tau_t + rng.normal(0, 300.0),
                1.05e6 - 5000.0 * atrophy + rng.normal(0, 3e4),
                3800.0 - 50.0 * atrophy - 150.0 * tau_t + rng.normal(0, 250.0),
                18000.0 - 200.0 * atrophy + rng.normal(0, 1200.0),
                20000.0 - 250.0 * atrophy + rng.normal(0, 1500.0),
                icv + rng.normal(0, 5000.0),
            ]
            values = np.array(cog + bio + img + [float(apoe)])
            mask = np.ones(N_FEATURES, dtype=bool)
            for m in MODALITIES:
                # baseline cognition is always recorded at enrolment
                if m == "cognitive" and v == 0:
                    continue
                if rng.random() < miss[m]:
                    mask[MODALITY_SLICES[m]] = False
            visits.append(VisitObservation.from_vectors(t, values, mask))
        cohort.append(
            PatientRecord(
                patient_id=f"S{k:05d}", visits=tuple(visits), sex=sex,
                age_at_baseline=age, baseline_diagnosis=dx, apoe4_count=apoe,
            )
        )
    return cohort


# ---------------------------------------------------------------------------
# Splitting


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Hamilton apportionment of ``n`` over the splits; ties go to the later split."""
    raw = [n * r for r in ratios]
    base = [math.floor(x + 1e-9) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-round(raw[i] - base[i], 9), -i))
    for i in order[: n - sum(base)]:
        base[i] += 1
    return base


def stratified_split(
    cohort: Sequence[PatientRecord], ratios=(0.70, 0.15, 0.15), seed: int = 0
) -> list[PatientRecord]:
    """Assign train/validation/test per patient within (diagnosis x APOE4 carrier) strata.

    Each stratum is apportioned with largest remainders, rounding leftovers to
    the test split first. Strata with fewer than 3 patients are pooled and
    apportioned together.
    """
    if not cohort:
        raise DataError("cannot split an empty cohort")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    strata: dict[tuple, list[int]] = {}
    for i, p in enumerate(cohort):
        strata.setdefault((p.baseline_diagnosis, p.apoe4_carrier), []).append(i)
    groups = []
    pooled = []
    for key in sorted(strata):
        members = strata[key]
        if len(members) < 3:
            logger.warning("stratum %s has %d patients; assigning by global ratios", key, len(members))
            pooled.extend(members)
        else:
            groups.append(members)
    if pooled:
        groups.append(pooled)

    rng = np.random.default_rng(seed)
    assignment = [None] * len(cohort)
    for members in groups:
        members = sorted(members, key=lambda i: cohort[i].patient_id)
        perm = rng.permutation(len(members))
        counts = _allocate(len(members), ratios)
        tags = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
        for tag, j in zip(tags, perm):
            assignment[members[j]] = tag
    return [replace(p, split=s) for p, s in zip(cohort, assignment)]


def select_split(cohort: Sequence[PatientRecord], split: str) -> list[PatientRecord]:
    return [p for p in cohort if p.split == split]


# ---------------------------------------------------------------------------
# Normalization


def fit_normalization(cohort: Sequence[PatientRecord], split: str | None = "train") -> NormalizationStats:
    """Per-feature z-score statistics from observed values of ``split`` patients.

    ``split=None`` uses every given patient (the caller has already selected
    the training patients). Population deviation; constant features get 1.
    """
    patients = list(cohort) if split is None else select_split(cohort, split)
    if not patients:
        raise DataError(f"no patients in split {split!r} to fit normalization on")
    values = np.array([v.values for p in patients for v in p.visits])
    mask = np.array([v.mask for p in patients for v in p.visits])
    counts = mask.sum(axis=0)
    empty = [CANONICAL_FEATURES[j] for j in np.flatnonzero(counts == 0)]
    if empty:
        raise DataError(f"features with no observed training values: {empty}")
    mean = np.where(mask, values, 0.0).sum(axis=0) / counts
    var = np.where(mask, (values - mean) ** 2, 0.0).sum(axis=0) / counts
    std = np.sqrt(var)
    std = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)
    return NormalizationStats(mean=mean, std=std, fitted_on="train")


def _map_values(cohort, fn):
    out = []
    for p in cohort:
        visits = tuple(
            VisitObservation.from_vectors(v.months_since_baseline, np.where(v.mask, fn(v.values), 0.0), v.mask)
            for v in p.visits
        )
        out.append(replace(p, visits=visits))
    return out


def apply_normalization(cohort: Sequence[PatientRecord], stats: NormalizationStats) -> list[PatientRecord]:
    return _map_values(cohort, lambda x: (x - stats.mean) / stats.std)


def denormalize(cohort: Sequence[PatientRecord], stats: NormalizationStats) -> list[PatientRecord]:
    return _map_values(cohort, lambda x: x * stats.std + stats.mean)


# ---------------------------------------------------------------------------
# Targets and labels


def derive_forecast_target(
    patient: PatientRecord, horizon_months: float = 24.0, tolerance_months: float = 3.0
) -> ForecastTarget | None:
    """Observed MMSE at the visit nearest the horizon (within tolerance; ties -> earlier)."""
    if patient.baseline_mmse is None:
        return None
    best = None
    for i, v in enumerate(patient.visits):
        if i == 0 or v.mmse is None:
            continue
        gap = abs(v.months_since_baseline - horizon_months)
        if gap <= tolerance_months and (best is None or gap < best[0]):
            best = (gap, i, v)
    if best is None:
        return None
    _, i, v = best
    return ForecastTarget(v.mmse, float(horizon_months), v.months_since_baseline, i)


def derive_progression_label(
    patient: PatientRecord, threshold_points: float = 3.0, window_months: float = 36.0
) -> ProgressionLabel | None:
    """Progression iff baseline MMSE minus the lowest MMSE observed within the window exceeds the threshold."""
    base = patient.baseline_mmse
    if base is None:
        return None
    follow = [
        v.mmse for v in patient.visits[1:]
        if v.mmse is not None and v.months_since_baseline <= window_months
    ]
    if not follow:
        return None
    decline = base - min(follow)
    return ProgressionLabel(bool(decline > threshold_points), float(decline), float(window_months))


def visit_seed(seed: int, patient_id: str, visit_index: int) -> np.random.Generator:
    """Independent per-visit random stream (stable under cohort reordering)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(patient_id.encode()), int(visit_index)])
